#pragma once

#include <span>
#include <vector>

#include "nrp/tape.hpp"

// Differentiable primitives. Binary elementwise ops accept equal shapes or a
// single-element operand broadcast against the other; nothing else broadcasts.
namespace nrp::ops {

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
Var add_scalar(const Var& a, double offset);

Var sigmoid(const Var& x);
/// sign(0) == 0; gradient is zero everywhere.
Var sign(const Var& x);
Var clamp(const Var& x, double lo, double hi);
Var abs(const Var& x);
Var square(const Var& x);
/// Gradient at 0 is defined as 0.
Var sqrt(const Var& x);
/// log(1 + exp(x)), evaluated stably.
Var softplus(const Var& x);
/// log(sigmoid(x)) == -softplus(-x).
Var log_sigmoid(const Var& x);
Var leaky_relu(const Var& x, double slope);

Var sum(const Var& x);
Var mean(const Var& x);
/// Reduces every axis except the first: [N, ...] -> [N].
Var sum_rows(const Var& x);
Var mean_rows(const Var& x);

Var reshape(const Var& x, Shape shape);

/// x [N,K], weight [O,K], bias [O] (optional) -> [N,O].
Var dense(const Var& x, const Var& weight, const Var& bias = {});

struct Conv2dParams {
  int stride_h = 1;
  int stride_w = 1;
  int pad_h = 0;
  int pad_w = 0;
};

/// Cross-correlation. input [N,C,H,W], kernel [O,C,KH,KW], bias [O] (optional).
Var conv2d(const Var& input, const Var& kernel, const Var& bias = {}, Conv2dParams params = {});

struct BatchNormStats {
  Tensor mean;
  Tensor var;  // unbiased, as folded into running statistics
};

/// Normalises with batch statistics over (N,H,W). Requires N >= 2.
Var batch_norm_train(const Var& x, const Var& gamma, const Var& beta, double eps, BatchNormStats* batch_stats);
/// Normalises with fixed running statistics.
Var batch_norm_eval(const Var& x, const Var& gamma, const Var& beta, const Tensor& running_mean,
                    const Tensor& running_var, double eps);

Var max_pool2d(const Var& x, int kernel = 2, int stride = 2);
/// [N,C,H,W] -> [N,C]
Var global_avg_pool(const Var& x);
Var concat_channels(std::span<const Var> parts);

/// Mean softmax cross-entropy of logits [N,C] against integer labels.
Var cross_entropy(const Var& logits, std::span<const int> labels);

/// Nearest-neighbour resize of every image to (height, width), placed at
/// (top, left) on a zero canvas of the original spatial size.
Var resize_pad(const Var& x, int height, int width, int top, int left);

/// Forward value is `value`; the backward pass hands the incoming gradient to
/// `x` unchanged.
Var straight_through(const Var& x, const Tensor& value);

Var detach(const Var& x);

}  // namespace nrp::ops
