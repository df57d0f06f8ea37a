#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "nrp/attacks.hpp"
#include "nrp/data.hpp"
#include "nrp/network.hpp"
#include "nrp/optim.hpp"

namespace nrp::training {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Weights of the generator objective: alpha * l_adv + gamma * l_img + lambda * l_feat.
struct LossWeights {
  double alpha = 5e-3;
  double gamma = 1e-2;
  double lambda = 1.0;
  void validate() const;
};

enum class Ablation { Full, NoFeat, NoPixel, VanillaGan, GaussianPurifier, FgsmPurifier };
std::string ablation_name(Ablation a);
Ablation parse_ablation(const std::string& name);

enum class AdversaryMode { Ssp, Gaussian, Fgsm };
AdversaryMode adversary_for(Ablation a);
/// Zeroes lambda for no-feat and gamma for no-pixel; other modes keep `base`.
LossWeights weights_for(Ablation a, LossWeights base);

struct TrainConfig {
  int batch = 16;
  int crop = 24;
  int steps = 200;
  double lr_generator = 1e-4;
  double lr_critic = 1e-4;
  LossWeights weights;
  Ablation ablation = Ablation::Full;
  /// Budgets sampled uniformly per batch.
  std::vector<double> epsilons{4.0 / 255, 8.0 / 255, 12.0 / 255, 16.0 / 255};
  /// Training-time SSP: iterations, step (defaults to max(1.6/255, eps / iterations)), tap, metric.
  int adversary_iterations = 5;
  std::optional<double> adversary_step;
  std::string tap = "b3c3";
  attacks::Metric metric = attacks::Metric::Mae;
  /// Gaussian-purifier noise standard deviation as a multiple of epsilon.
  double gaussian_sigma_scale = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
  double adversary_step_for(double epsilon) const;
};

struct LogRecord {
  int step = 0;
  double l_adv = 0;
  double l_img = 0;
  double l_feat = 0;
  double total = 0;
  double critic_loss = 0;
};

std::string log_csv_header();
std::string log_csv(std::span<const LogRecord> records);

// ---- losses ---------------------------------------------------------------

/// Feature loss between clean images and purified output (same definition as
/// the attack's feature distortion).
Var loss_feat(const nets::Network& extractor, const Tensor& x, const Var& x_purified, const std::string& tap,
              attacks::Metric metric = attacks::Metric::Mae);
/// Per-image root-sum-square difference, averaged over the batch.
Var loss_img(const Var& x_purified, const Var& x);
/// Generator loss: -mean log sigmoid(C(fake) - mean C(real)). Non-relativistic
/// form drops the mean real score.
Var loss_adv(const Var& real_scores, const Var& fake_scores, bool relativistic = true);
/// Critic loss: -mean log sigmoid(C(real) - mean C(fake)) - mean log sigmoid(-(C(fake) - mean C(real))).
Var critic_loss(const Var& real_scores, const Var& fake_scores, bool relativistic = true);
/// alpha * l_adv + gamma * l_img + lambda * l_feat.
double loss_total(const LossWeights& w, double l_adv, double l_img, double l_feat);
Var loss_total(const LossWeights& w, const Var& l_adv, const Var& l_img, const Var& l_feat);

/// Adversary used to train the purifier. SSP ignores labels; FGSM uses the
/// extractor's own classification head against `labels`; Gaussian adds
/// clipped noise of standard deviation sigma_scale * epsilon.
Tensor make_training_adversary(AdversaryMode mode, const nets::Network& extractor, const Tensor& x,
                               std::span<const int> labels, const attacks::AttackSpec& spec,
                               double gaussian_sigma_scale = 1.0);

/// Random square crops (one offset per image) of side `size`.
Tensor random_crop(const Tensor& images, int size, Rng& rng);

// ---- training loops -------------------------------------------------------

struct TrainCallbacks {
  std::function<void(const LogRecord&)> on_step;
  /// Called every `checkpoint_every` steps and at the end.
  std::function<void(int step, const nets::Network& purifier, const nets::Network& critic)> on_checkpoint;
  int checkpoint_every = 0;
};

struct TrainResult {
  std::vector<LogRecord> log;
  LossWeights weights;  // effective weights after the ablation
};

/// Trains purifier and critic in place. The extractor is never modified.
/// A non-finite loss restores the last good state and throws TrainingError.
TrainResult train_nrp(const nets::Network& extractor, nets::Network& purifier, nets::Network& critic,
                      const io::Dataset& data, const TrainConfig& config, const TrainCallbacks& callbacks = {});

struct ClassifierTrainConfig {
  int batch = 32;
  int steps = 400;
  double lr = 1e-3;
  std::uint64_t seed = 0;
};

/// Cross-entropy training of a classification network (the extractor or the
/// target classifier). Returns the per-step losses.
std::vector<double> train_classifier(nets::Network& net, const io::Dataset& data, const ClassifierTrainConfig& config,
                                     const std::function<void(int, double)>& on_step = {});

}  // namespace nrp::training
