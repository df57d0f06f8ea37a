#pragma once

// Finite-difference cases for every differentiable primitive, shared by the
// unit suite and the acceptance run.

#include <string>
#include <vector>

#include "nrp/ops.hpp"
#include "support/gradcheck.hpp"

namespace nrp::testing {

struct OpCase {
  std::string name;
  ScalarFn fn;
  std::vector<Tensor> inputs;
  std::vector<bool> differentiate = {};
};

// Contract an arbitrary-shape output with fixed random weights into a scalar.
inline Var weighted_sum(Tape& tape, const Var& y, std::uint64_t seed = 99) {
  Var w = tape.constant(random64(y.shape(), seed));
  return ops::sum(ops::mul(y, w));
}

inline std::vector<OpCase> op_gradient_cases() {
  std::vector<OpCase> c;
  const auto add = [&](std::string name, ScalarFn f, std::vector<Tensor> in) {
    c.push_back({std::move(name), std::move(f), std::move(in)});
  };
  {
    const auto a = random64({3, 4}, 1), b = random64({3, 4}, 2, 0.5, 2.0);
    add("add", [](Tape& t, const auto& v) { return weighted_sum(t, ops::add(v[0], v[1])); }, {a, b});
    add("sub", [](Tape& t, const auto& v) { return weighted_sum(t, ops::sub(v[0], v[1])); }, {a, b});
    add("mul", [](Tape& t, const auto& v) { return weighted_sum(t, ops::mul(v[0], v[1])); }, {a, b});
    add("div", [](Tape& t, const auto& v) { return weighted_sum(t, ops::div(v[0], v[1])); }, {a, b});
  }
  {
    const auto a = random64({3, 4}, 3), s = random64({}, 4, 0.5, 1.5);
    add("mul broadcast", [](Tape& t, const auto& v) { return weighted_sum(t, ops::mul(v[0], v[1])); }, {a, s});
    add("sub broadcast", [](Tape& t, const auto& v) { return weighted_sum(t, ops::sub(v[1], v[0])); }, {a, s});
    add("div broadcast", [](Tape& t, const auto& v) { return weighted_sum(t, ops::div(v[0], v[1])); }, {a, s});
  }
  {
    const auto x = random64({2, 5}, 5, -2, 2);
    const auto pos = random64({2, 5}, 6, 0.2, 2);
    const auto inside = random64({2, 5}, 7, 0.1, 0.9);
    add("scale", [](Tape& t, const auto& v) { return weighted_sum(t, ops::scale(v[0], -1.7)); }, {x});
    add("add_scalar", [](Tape& t, const auto& v) { return weighted_sum(t, ops::add_scalar(v[0], 0.3)); }, {x});
    add("sigmoid", [](Tape& t, const auto& v) { return weighted_sum(t, ops::sigmoid(v[0])); }, {x});
    add("clamp", [](Tape& t, const auto& v) { return weighted_sum(t, ops::clamp(v[0], 0.0, 1.0)); }, {inside});
    add("abs", [](Tape& t, const auto& v) { return weighted_sum(t, ops::abs(v[0])); }, {pos});
    add("square", [](Tape& t, const auto& v) { return weighted_sum(t, ops::square(v[0])); }, {x});
    add("sqrt", [](Tape& t, const auto& v) { return weighted_sum(t, ops::sqrt(v[0])); }, {pos});
    add("softplus", [](Tape& t, const auto& v) { return weighted_sum(t, ops::softplus(v[0])); }, {x});
    add("log_sigmoid", [](Tape& t, const auto& v) { return weighted_sum(t, ops::log_sigmoid(v[0])); }, {x});
    add("leaky_relu", [](Tape& t, const auto& v) { return weighted_sum(t, ops::leaky_relu(v[0], 0.2)); }, {x});
  }
  {
    const auto x = random64({3, 2, 2}, 8);
    add("sum", [](Tape&, const auto& v) { return ops::sum(ops::square(v[0])); }, {x});
    add("mean", [](Tape&, const auto& v) { return ops::mean(ops::square(v[0])); }, {x});
    add("sum_rows", [](Tape& t, const auto& v) { return weighted_sum(t, ops::sum_rows(ops::square(v[0]))); }, {x});
    add("mean_rows", [](Tape& t, const auto& v) { return weighted_sum(t, ops::mean_rows(ops::square(v[0]))); }, {x});
    add("reshape", [](Tape& t, const auto& v) { return weighted_sum(t, ops::reshape(v[0], {6, 2})); }, {x});
  }
  {
    const auto x = random64({4, 3}, 9), w = random64({5, 3}, 10), b = random64({5}, 11);
    add("dense", [](Tape& t, const auto& v) { return weighted_sum(t, ops::dense(v[0], v[1], v[2])); }, {x, w, b});
    add("dense no bias", [](Tape& t, const auto& v) { return weighted_sum(t, ops::dense(v[0], v[1])); }, {x, w});
  }
  {
    const auto x = random64({2, 3, 5, 6}, 12), k = random64({4, 3, 3, 3}, 13), b = random64({4}, 14);
    for (auto p : {ops::Conv2dParams{1, 1, 1, 1}, ops::Conv2dParams{2, 2, 1, 1}, ops::Conv2dParams{1, 2, 0, 1}}) {
      add("conv2d stride " + std::to_string(p.stride_h) + "x" + std::to_string(p.stride_w),
          [p](Tape& t, const auto& v) { return weighted_sum(t, ops::conv2d(v[0], v[1], v[2], p)); }, {x, k, b});
    }
    const auto k1 = random64({2, 3, 1, 1}, 15);
    add("conv2d 1x1", [](Tape& t, const auto& v) { return weighted_sum(t, ops::conv2d(v[0], v[1])); }, {x, k1});
  }
  {
    const auto x = random64({3, 2, 3, 3}, 16), g = random64({2}, 17, 0.5, 1.5), b = random64({2}, 18);
    add("batch_norm train",
        [](Tape& t, const auto& v) { return weighted_sum(t, ops::batch_norm_train(v[0], v[1], v[2], 1e-5, nullptr)); },
        {x, g, b});
    const auto rm = random64({2}, 19), rv = random64({2}, 20, 0.5, 2);
    add("batch_norm eval",
        [rm, rv](Tape& t, const auto& v) {
          return weighted_sum(t, ops::batch_norm_eval(v[0], v[1], v[2], rm, rv, 1e-5));
        },
        {x, g, b});
  }
  {
    const auto x = random64({2, 2, 4, 6}, 21), y = random64({2, 3, 4, 6}, 22);
    add("max_pool2d", [](Tape& t, const auto& v) { return weighted_sum(t, ops::max_pool2d(v[0], 2, 2)); }, {x});
    add("global_avg_pool", [](Tape& t, const auto& v) { return weighted_sum(t, ops::global_avg_pool(v[0])); }, {x});
    add("concat_channels",
        [](Tape& t, const auto& v) {
          std::vector<Var> parts{v[0], v[1]};
          return weighted_sum(t, ops::concat_channels(parts));
        },
        {x, y});
    add("resize_pad", [](Tape& t, const auto& v) { return weighted_sum(t, ops::resize_pad(v[0], 3, 5, 1, 0)); }, {x});
  }
  {
    const auto z = random64({4, 5}, 23, -3, 3);
    std::vector<int> labels{0, 4, 2, 2};
    add("cross_entropy", [labels](Tape&, const auto& v) { return ops::cross_entropy(v[0], labels); }, {z});
  }
  {
    const auto x = random64({2, 3}, 24), y = random64({2, 3}, 25);
    add("composite",
        [](Tape&, const auto& v) {
          Var d = ops::sub(v[0], v[1]);
          return ops::mean(ops::sqrt(ops::add_scalar(ops::sum_rows(ops::square(d)), 0.1)));
        },
        {x, y});
  }
  return c;
}

}  // namespace nrp::testing
