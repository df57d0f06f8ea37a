#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace nrp {

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

using Shape = std::vector<std::int64_t>;

std::int64_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);
const char* dtype_name(DType dtype);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <class T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::F32 : DType::F64;
}

// Calls fn(T{}) with T = float or double according to the runtime tag.
template <class Fn>
decltype(auto) visit_dtype(DType dtype, Fn&& fn) {
  if (dtype == DType::F64) return fn(double{});
  return fn(float{});
}

/// Dense row-major n-dimensional array. Values are immutable once built;
/// copies share storage.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<float> values);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(const Shape& shape, DType dtype = DType::F32);
  static Tensor full(const Shape& shape, double value, DType dtype = DType::F32);
  static Tensor scalar(double value, DType dtype = DType::F32);

  bool defined() const { return f32_ != nullptr || f64_ != nullptr; }
  const Shape& shape() const { return shape_; }
  std::int64_t dim(int axis) const;
  int rank() const { return static_cast<int>(shape_.size()); }
  std::int64_t numel() const { return numel_of(shape_); }
  DType dtype() const { return dtype_; }

  template <class T>
  std::span<const T> data() const {
    if constexpr (std::is_same_v<T, float>) {
      require_dtype(DType::F32);
      return {f32_->data(), f32_->size()};
    } else {
      require_dtype(DType::F64);
      return {f64_->data(), f64_->size()};
    }
  }

  double at(std::int64_t flat_index) const;
  double item() const;
  std::vector<double> to_vector() const;

  Tensor reshape(Shape shape) const;
  Tensor cast(DType dtype) const;

  bool bit_equal(const Tensor& other) const;
  bool all_finite() const;
  void check_finite(const std::string& context) const;

 private:
  void require_dtype(DType dtype) const;

  Shape shape_;
  DType dtype_ = DType::F32;
  std::shared_ptr<const std::vector<float>> f32_;
  std::shared_ptr<const std::vector<double>> f64_;
};

/// Builds a tensor from a typed buffer; T selects the dtype.
template <class T>
Tensor make_tensor(Shape shape, std::vector<T> values) {
  return Tensor(std::move(shape), std::move(values));
}

double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace nrp
