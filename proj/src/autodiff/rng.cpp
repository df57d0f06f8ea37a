#include "nrp/rng.hpp"

#include <cmath>
#include <numbers>

namespace nrp {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

Rng::Rng(std::uint64_t seed) : seed_(seed), engine_(splitmix64(seed)) {}

double Rng::uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

std::uint64_t Rng::uniform_int(std::uint64_t n) {
  if (n == 0) throw std::invalid_argument("uniform_int: empty range");
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  std::uint64_t x = engine_();
  while (x >= limit) x = engine_();
  return x % n;
}

Rng Rng::fork(std::uint64_t stream) const { return Rng(splitmix64(seed_ ^ splitmix64(stream + 0x51ed2701ULL))); }

Tensor Rng::uniform_tensor(const Shape& shape, double lo, double hi, DType dtype) {
  const auto n = static_cast<std::size_t>(numel_of(shape));
  return visit_dtype(dtype, [&](auto tag) {
    using T = decltype(tag);
    std::vector<T> v(n);
    for (auto& x : v) x = static_cast<T>(uniform(lo, hi));
    return Tensor(shape, std::move(v));
  });
}

Tensor Rng::normal_tensor(const Shape& shape, double mean, double stddev, DType dtype) {
  const auto n = static_cast<std::size_t>(numel_of(shape));
  return visit_dtype(dtype, [&](auto tag) {
    using T = decltype(tag);
    std::vector<T> v(n);
    for (auto& x : v) x = static_cast<T>(mean + stddev * normal());
    return Tensor(shape, std::move(v));
  });
}

}  // namespace nrp
