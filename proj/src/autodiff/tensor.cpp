#include "nrp/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace nrp {

std::int64_t numel_of(const Shape& shape) {
  std::int64_t n = 1;
  for (auto extent : shape) {
    if (extent < 0) throw ShapeError("negative extent in shape " + shape_str(shape));
    n *= extent;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

const char* dtype_name(DType dtype) { return dtype == DType::F64 ? "f64" : "f32"; }

Tensor::Tensor(Shape shape, std::vector<float> values) : shape_(std::move(shape)), dtype_(DType::F32) {
  if (numel_of(shape_) != static_cast<std::int64_t>(values.size()))
    throw ShapeError("shape " + shape_str(shape_) + " does not match " + std::to_string(values.size()) + " values");
  f32_ = std::make_shared<const std::vector<float>>(std::move(values));
}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), dtype_(DType::F64) {
  if (numel_of(shape_) != static_cast<std::int64_t>(values.size()))
    throw ShapeError("shape " + shape_str(shape_) + " does not match " + std::to_string(values.size()) + " values");
  f64_ = std::make_shared<const std::vector<double>>(std::move(values));
}

Tensor Tensor::zeros(const Shape& shape, DType dtype) { return full(shape, 0.0, dtype); }

Tensor Tensor::full(const Shape& shape, double value, DType dtype) {
  const auto n = static_cast<std::size_t>(numel_of(shape));
  return visit_dtype(dtype, [&](auto tag) {
    using T = decltype(tag);
    return Tensor(shape, std::vector<T>(n, static_cast<T>(value)));
  });
}

Tensor Tensor::scalar(double value, DType dtype) { return full({}, value, dtype); }

std::int64_t Tensor::dim(int axis) const {
  if (axis < 0) axis += rank();
  if (axis < 0 || axis >= rank()) throw ShapeError("axis out of range for shape " + shape_str(shape_));
  return shape_[static_cast<std::size_t>(axis)];
}

void Tensor::require_dtype(DType dtype) const {
  if (!defined()) throw std::logic_error("access to undefined tensor");
  if (dtype != dtype_)
    throw std::invalid_argument(std::string("tensor dtype is ") + dtype_name(dtype_) + ", requested " +
                                dtype_name(dtype));
}

double Tensor::at(std::int64_t flat_index) const {
  if (flat_index < 0 || flat_index >= numel()) throw std::out_of_range("tensor index out of range");
  return visit_dtype(dtype_, [&](auto tag) {
    using T = decltype(tag);
    return static_cast<double>(data<T>()[static_cast<std::size_t>(flat_index)]);
  });
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
  return at(0);
}

std::vector<double> Tensor::to_vector() const {
  return visit_dtype(dtype_, [&](auto tag) {
    using T = decltype(tag);
    auto d = data<T>();
    return std::vector<double>(d.begin(), d.end());
  });
}

Tensor Tensor::reshape(Shape shape) const {
  if (numel_of(shape) != numel())
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  Tensor out = *this;
  out.shape_ = std::move(shape);
  return out;
}

Tensor Tensor::cast(DType dtype) const {
  if (dtype == dtype_) return *this;
  return visit_dtype(dtype_, [&](auto src_tag) {
    using S = decltype(src_tag);
    auto src = data<S>();
    return visit_dtype(dtype, [&](auto dst_tag) {
      using D = decltype(dst_tag);
      std::vector<D> out(src.size());
      std::transform(src.begin(), src.end(), out.begin(), [](S v) { return static_cast<D>(v); });
      return Tensor(shape_, std::move(out));
    });
  });
}

bool Tensor::bit_equal(const Tensor& other) const {
  if (shape_ != other.shape_ || dtype_ != other.dtype_ || defined() != other.defined()) return false;
  if (!defined()) return true;
  return visit_dtype(dtype_, [&](auto tag) {
    using T = decltype(tag);
    auto a = data<T>();
    auto b = other.data<T>();
    return std::memcmp(a.data(), b.data(), a.size_bytes()) == 0;
  });
}

bool Tensor::all_finite() const {
  if (!defined()) return true;
  return visit_dtype(dtype_, [&](auto tag) {
    using T = decltype(tag);
    auto d = data<T>();
    return std::all_of(d.begin(), d.end(), [](T v) { return std::isfinite(v); });
  });
}

void Tensor::check_finite(const std::string& context) const {
  if (!all_finite()) throw NonFiniteError(context + ": non-finite value in tensor of shape " + shape_str(shape_));
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("max_abs_diff shape mismatch");
  auto va = a.to_vector();
  auto vb = b.to_vector();
  double m = 0.0;
  for (std::size_t i = 0; i < va.size(); ++i) m = std::max(m, std::abs(va[i] - vb[i]));
  return m;
}

}  // namespace nrp
