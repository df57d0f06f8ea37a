#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nrp/attacks.hpp"
#include "nrp/data.hpp"
#include "nrp/network.hpp"

namespace nrp::eval {

// ---- batching helpers -----------------------------------------------------

Tensor slice_rows(const Tensor& t, std::int64_t begin, std::int64_t count);
Tensor concat_rows(std::span<const Tensor> parts);
/// Eval-mode forward in chunks of `chunk` images.
Tensor infer_chunked(const nets::Network& net, const Tensor& x, std::int64_t chunk = 100);

// ---- metrics --------------------------------------------------------------

/// Argmax per row; ties go to the lowest index.
std::vector<int> argmax_rows(const Tensor& logits);
/// Whether each label is among the k largest logits (lowest index wins ties).
std::vector<bool> top_k_hits(const Tensor& logits, std::span<const int> labels, int k);
double top_k_accuracy(const Tensor& logits, std::span<const int> labels, int k);
double top_k_accuracy(const nets::Network& classifier, const io::ImageBatch& data, int k, std::int64_t chunk = 100);
/// Fraction of samples whose prediction on `adv` differs from that on `clean`.
double fooling_rate(const nets::Network& classifier, const Tensor& clean, const Tensor& adv, std::int64_t chunk = 100);
/// Feature distortion of each sample on its own.
std::vector<double> per_sample_distortion(const nets::Network& extractor, const Tensor& x, const Tensor& x_adv,
                                          const std::string& tap, attacks::Metric metric);

// ---- attacks over whole sets ----------------------------------------------

/// Runs an attack chunk by chunk. Chunk i uses seed splitmix64(spec.seed + i),
/// so results do not depend on anything but (inputs, spec, chunk size).
Tensor attack_set(const attacks::AttackContext& ctx, const io::ImageBatch& data, const attacks::AttackSpec& spec,
                  std::int64_t chunk = 50);

// ---- defenses -------------------------------------------------------------

struct Defense {
  std::string id = "none";
  const nets::Network* purifier = nullptr;  // nullptr: no defense
  /// Dynamic variant: uniform noise of this magnitude before purification.
  double dynamic_noise = 0.0;
  std::uint64_t seed = 0;
};

Tensor apply_defense(const Defense& defense, const Tensor& x, std::int64_t chunk = 100);
/// x + U(-magnitude, magnitude), clamped to [0,1], then purified.
Tensor dynamic_defense_purify(const nets::Network& purifier, const Tensor& x, double magnitude, std::uint64_t seed,
                              std::int64_t chunk = 100);

// ---- reports --------------------------------------------------------------

struct ReportRow {
  std::string model;
  std::string attack;  // attack-spec digest, or "none"
  std::string defense;
  std::string metric;
  double value = 0;
  std::int64_t n = 0;
  std::uint64_t seed = 0;
};

class EvalReport {
 public:
  /// Rejects duplicate (model, attack, defense, metric) keys, n <= 0, and
  /// rate metrics outside [0,1].
  void add(ReportRow row);
  const std::vector<ReportRow>& rows() const { return rows_; }
  const ReportRow* find(const std::string& attack, const std::string& defense, const std::string& metric) const;
  std::string to_csv() const;
  static std::string csv_header();

 private:
  std::vector<ReportRow> rows_;
};

bool is_rate_metric(const std::string& metric);

/// Accuracy grid: {no attack, each attack} x {each defense}. Transfer attacks
/// are generated once and shared across defenses; BPDA attacks are regenerated
/// through each defense's purifier (plain attack when the defense has none).
EvalReport defense_table(const nets::Network& classifier, const attacks::AttackContext& ctx,
                         std::span<const Defense> defenses, std::span<const attacks::AttackSpec> specs,
                         const io::ImageBatch& data, const std::string& model_id = "classifier",
                         std::int64_t chunk = 50);

// ---- experiment drivers ---------------------------------------------------

struct CurvePoint {
  int iterations = 0;
  double mean_distortion = 0;
  double fooling_rate = 0;
  std::vector<double> per_sample;  // distortion of each sample
};

/// One attack run of max(grid) iterations; the iterate after each grid count
/// is scored (identical to running the attack with that many iterations).
std::vector<CurvePoint> distortion_curve(const nets::Network& extractor, const nets::Network& classifier,
                                         const attacks::AttackSpec& family, const io::ImageBatch& data,
                                         std::span<const int> grid, std::int64_t chunk = 50);

struct SweepRow {
  std::string tap;
  double fooling_rate = 0;
  double mean_distortion = 0;
};

/// One SSP run per tap, scored by the transfer classifier's fooling rate.
std::vector<SweepRow> layer_sweep(const nets::Network& extractor, const nets::Network& classifier,
                                  const io::ImageBatch& data, std::span<const std::string> taps,
                                  const attacks::AttackSpec& spec, std::int64_t chunk = 50);

}  // namespace nrp::eval
