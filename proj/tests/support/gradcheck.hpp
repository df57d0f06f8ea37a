#pragma once

// Central finite-difference oracle for tape gradients (f64).

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "nrp/rng.hpp"
#include "nrp/tape.hpp"

namespace nrp::testing {

using ScalarFn = std::function<Var(Tape&, const std::vector<Var>&)>;

struct GradCheck {
  double max_rel_error = 0;  // worst norm-wise relative error over inputs
  std::size_t evaluations = 0;
};

inline double eval_scalar(const ScalarFn& f, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.constant(t));
  return f(tape, vars).value().item();
}

/// Norm-wise relative error ||analytic - numeric|| / max(||analytic||, ||numeric||)
/// per input tensor (tiny norms fall back to absolute error).
inline GradCheck check_gradients(const ScalarFn& f, const std::vector<Tensor>& inputs, double h = 1e-5,
                                 const std::vector<bool>& differentiate = {}) {
  Tape tape;
  std::vector<Var> vars;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const bool d = differentiate.empty() || differentiate[i];
    vars.push_back(tape.leaf(inputs[i], d));
  }
  const auto grads = tape.backward(f(tape, vars));
  GradCheck out;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!differentiate.empty() && !differentiate[i]) continue;
    const auto analytic = grads.of(vars[i]).to_vector();
    auto base = inputs[i].to_vector();
    double diff2 = 0, a2 = 0, n2 = 0;
    for (std::size_t k = 0; k < base.size(); ++k) {
      auto plus = base, minus = base;
      plus[k] += h;
      minus[k] -= h;
      auto with = [&](std::vector<double> v) {
        std::vector<Tensor> in = inputs;
        in[i] = make_tensor(inputs[i].shape(), std::move(v));
        return in;
      };
      const double num = (eval_scalar(f, with(plus)) - eval_scalar(f, with(minus))) / (2 * h);
      out.evaluations += 2;
      diff2 += (analytic[k] - num) * (analytic[k] - num);
      a2 += analytic[k] * analytic[k];
      n2 += num * num;
    }
    const double scale = std::max({std::sqrt(a2), std::sqrt(n2), 1e-3});
    out.max_rel_error = std::max(out.max_rel_error, std::sqrt(diff2) / scale);
  }
  return out;
}

inline Tensor random64(const Shape& shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng r(seed);
  return r.uniform_tensor(shape, lo, hi, DType::F64);
}

}  // namespace nrp::testing
