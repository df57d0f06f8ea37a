#pragma once

// Finite-difference check of a whole network pass, over the input and every
// parameter tensor, in f64.

#include <algorithm>
#include <cmath>

#include "nrp/network.hpp"
#include "support/gradcheck.hpp"

namespace nrp::testing {

inline double network_loss(const nets::Network& net, const Tensor& x, nets::Mode mode, const Tensor& weights) {
  Tape tape;
  auto res = net.forward(tape, tape.constant(x), {mode, {}, true, false});
  return ops::sum(ops::mul(res.output, tape.constant(weights))).value().item();
}

/// Worst norm-wise relative error across the input and all parameters.
inline double network_gradcheck(nets::Network net, const Tensor& x, nets::Mode mode, double h = 1e-5) {
  net = net.cast(DType::F64);
  const Tensor x64 = x.cast(DType::F64);
  Tensor weights;
  {
    Tape probe;
    auto res = net.forward(probe, probe.constant(x64), {mode, {}, true, false});
    weights = random64(res.output.shape(), 777);
  }
  Tape tape;
  Var xin = tape.leaf(x64, true);
  auto res = net.forward(tape, xin, {mode, {}, true, true});
  const auto grads = tape.backward(ops::sum(ops::mul(res.output, tape.constant(weights))));

  double worst = 0;
  auto compare = [&](const std::vector<double>& analytic, const std::vector<double>& numeric) {
    double d2 = 0, a2 = 0, n2 = 0;
    for (std::size_t k = 0; k < analytic.size(); ++k) {
      d2 += (analytic[k] - numeric[k]) * (analytic[k] - numeric[k]);
      a2 += analytic[k] * analytic[k];
      n2 += numeric[k] * numeric[k];
    }
    worst = std::max(worst, std::sqrt(d2) / std::max({std::sqrt(a2), std::sqrt(n2), 1e-3}));
  };

  {  // input
    auto base = x64.to_vector();
    std::vector<double> num(base.size());
    for (std::size_t k = 0; k < base.size(); ++k) {
      auto p = base, m = base;
      p[k] += h;
      m[k] -= h;
      num[k] = (network_loss(net, make_tensor(x64.shape(), p), mode, weights) -
                network_loss(net, make_tensor(x64.shape(), m), mode, weights)) /
               (2 * h);
    }
    compare(grads.of(xin).to_vector(), num);
  }
  const auto params = net.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, value] = params[i];
    auto base = value.to_vector();
    std::vector<double> num(base.size());
    for (std::size_t k = 0; k < base.size(); ++k) {
      auto p = base, m = base;
      p[k] += h;
      m[k] -= h;
      net.set_parameter(name, make_tensor(value.shape(), p));
      const double lp = network_loss(net, x64, mode, weights);
      net.set_parameter(name, make_tensor(value.shape(), m));
      const double lm = network_loss(net, x64, mode, weights);
      num[k] = (lp - lm) / (2 * h);
    }
    net.set_parameter(name, value);
    compare(grads.of(res.params[i]).to_vector(), num);
  }
  return worst;
}

}  // namespace nrp::testing
