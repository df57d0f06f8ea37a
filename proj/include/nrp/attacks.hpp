#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "nrp/builders.hpp"
#include "nrp/network.hpp"
#include "nrp/rng.hpp"

namespace nrp::attacks {

enum class Method { Fgsm, Rfgsm, Ifgsm, Mifgsm, Dim, Ssp, BpdaSsp, BpdaIfgsm };
enum class Metric { Mae, L2, Cosine };

std::string method_name(Method method);
Method parse_method(const std::string& name);
std::string metric_name(Metric metric);
Metric parse_metric(const std::string& name);

/// True for methods that ascend a classifier's cross-entropy (and so consume labels).
bool uses_labels(Method method);
/// True for methods driven by feature distortion on a tap.
bool uses_tap(Method method);

class AttackError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Everything that determines one attack run. Budgets are in [0,1] pixel units.
struct AttackSpec {
  Method method = Method::Ssp;
  double epsilon = 16.0 / 255.0;
  double step = 1.6 / 255.0;
  int iterations = 100;
  double momentum = 1.0;
  double diversity_prob = 0.7;
  std::string tap = nets::kDefaultTap;
  Metric metric = Metric::Mae;
  /// Half-width of the uniform noise SSP starts from; defaults to epsilon / 2.
  std::optional<double> init_noise;
  /// R-FGSM random step; defaults to epsilon / 3.
  std::optional<double> random_step;
  std::uint64_t seed = 0;

  /// Reference settings for a method: FGSM steps the full budget once; the
  /// iterative baselines run 10 steps of 1.6/255; SSP runs 100.
  static AttackSpec defaults(Method method);

  void validate() const;
  double init_noise_or_default() const { return init_noise.value_or(epsilon / 2.0); }
  double random_step_or_default() const { return random_step.value_or(epsilon / 3.0); }

  /// Single-token description without commas, e.g.
  /// "ssp;eps=16;step=1.6;iters=100;mu=1;p=0.7;tap=b3c3;metric=mae;seed=7"
  /// (budgets on the 0-255 scale, printed round-trippably).
  std::string digest() const;
  static AttackSpec from_digest(const std::string& digest);
};

/// Clamp to the epsilon-ball around x, then to [0,1].
Tensor linf_project(const Tensor& x_adv, const Tensor& x, double epsilon);

/// Differentiable distance between two feature tensors [N,...].
/// MAE: mean |a-b|; L2: batch mean of per-sample Euclidean norm;
/// cosine: batch mean of 1 - cos(a_i, b_i).
Var distance(const Var& a, const Var& b, Metric metric);

/// Feature distortion between clean features (already computed) and the tap
/// activation of `x_adv`, recorded on the tape of `x_adv`.
Var feature_distortion(const nets::Network& extractor, const Var& clean_features, const Var& x_adv,
                       const std::string& tap, Metric metric);
/// Scalar feature distortion of two image batches.
double feature_distortion(const nets::Network& extractor, const Tensor& x, const Tensor& x_adv,
                          const std::string& tap, Metric metric);

/// Random resize within [0.85, 1] of the original extent, zero-padded back to
/// the original size at a random offset; applied with probability p.
Var input_diversity(const Var& x, double p, Rng& rng);
Tensor input_diversity_transform(const Tensor& x, double p, std::uint64_t seed);

struct AttackTrace {
  std::vector<Tensor> iterates;  // after each projected step
  std::vector<Tensor> momentum;  // accumulated gradient after each step (momentum methods)
  std::vector<Tensor> gradients; // raw input gradients per step
};

/// Models an attack may consult. Only the members the method needs are read.
struct AttackContext {
  const nets::Network* feature_extractor = nullptr;
  const nets::Network* classifier = nullptr;
  const nets::Network* purifier = nullptr;  // BPDA variants
};

using IterationObserver = std::function<void(int iteration, const Tensor& x_adv)>;

/// Self-supervised perturbation: maximise feature distortion at spec.tap from a
/// random start. Takes no labels.
Tensor ssp_attack(const nets::Network& extractor, const Tensor& x, const AttackSpec& spec,
                  AttackTrace* trace = nullptr, const IterationObserver& observer = {});

Tensor fgsm(const nets::Network& classifier, const Tensor& x, std::span<const int> labels, const AttackSpec& spec,
            AttackTrace* trace = nullptr);
Tensor rfgsm(const nets::Network& classifier, const Tensor& x, std::span<const int> labels, const AttackSpec& spec,
             AttackTrace* trace = nullptr);
Tensor ifgsm(const nets::Network& classifier, const Tensor& x, std::span<const int> labels, const AttackSpec& spec,
             AttackTrace* trace = nullptr, const IterationObserver& observer = {});
Tensor mifgsm(const nets::Network& classifier, const Tensor& x, std::span<const int> labels, const AttackSpec& spec,
              AttackTrace* trace = nullptr, const IterationObserver& observer = {});
Tensor dim(const nets::Network& classifier, const Tensor& x, std::span<const int> labels, const AttackSpec& spec,
           AttackTrace* trace = nullptr, const IterationObserver& observer = {});

/// Attack through a frozen purifier: forward passes route through it, the
/// backward pass treats it as the identity. BpdaSsp ascends feature distortion
/// of the purified input (needs the extractor); BpdaIfgsm ascends classifier
/// cross-entropy (needs the classifier and labels).
Tensor bpda_attack(const nets::Network& purifier, const AttackContext& ctx, const Tensor& x,
                   std::span<const int> labels, const AttackSpec& spec, AttackTrace* trace = nullptr);

/// Dispatches on spec.method.
Tensor run_attack(const AttackContext& ctx, const Tensor& x, std::span<const int> labels, const AttackSpec& spec,
                  AttackTrace* trace = nullptr, const IterationObserver& observer = {});

/// Signature of a differentiable objective the sign-ascent loop maximises.
using Objective = std::function<Var(const Var& input)>;

struct AscentOptions {
  double epsilon = 0.0;
  double step = 0.0;
  int iterations = 0;
  double momentum = 0.0;           // 0 disables accumulation
  bool use_momentum = false;
  double diversity_prob = -1.0;    // < 0 disables the diversity transform
  const nets::Network* purifier = nullptr;  // straight-through purifier
  std::uint64_t seed = 0;
};

/// Iterated projected sign-gradient ascent from `start` inside the epsilon-ball
/// around `x`. The building block for every iterative method.
Tensor sign_ascent(const Objective& objective, const Tensor& x, const Tensor& start, const AscentOptions& options,
                   AttackTrace* trace = nullptr, const IterationObserver& observer = {});

}  // namespace nrp::attacks
