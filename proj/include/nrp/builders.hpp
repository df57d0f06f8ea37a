#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "nrp/network.hpp"

namespace nrp::nets {

inline constexpr double kLeakySlope = 0.2;

/// VGG-style plain convolution stack. Max-pool between blocks, global average
/// pool and a dense classification head after the last block. Taps are named
/// b<block>c<conv>, 1-based, taken after the activation.
struct FeatureExtractorConfig {
  int in_channels = 3;
  std::vector<int> widths{8, 16, 32, 32};
  std::vector<int> convs_per_block{2, 2, 3, 3};
  int num_classes = 10;
};

/// Head conv, basic blocks of three residual dense blocks (five convs with
/// dense concatenation), tail conv back to the input channel count. No path
/// from input to output avoids a convolution.
struct PurifierConfig {
  int in_channels = 3;
  int width = 32;
  int growth = 16;
  int basic_blocks = 2;
  double residual_scale = 0.2;
  /// Start head/tail as a channel pass-through and shrink the dense-block
  /// weights (x0.1), so the untrained purifier is close to the identity map.
  bool identity_init = true;
};

/// Five conv + batch-norm + leaky-relu blocks, global pooling, one dense unit.
struct CriticConfig {
  int in_channels = 3;
  std::vector<int> widths{16, 32, 32, 64, 64};
  std::vector<int> strides{1, 2, 2, 2, 2};
};

/// Small conv net, architecturally distinct from the feature extractor.
struct ClassifierConfig {
  int in_channels = 3;
  std::vector<int> widths{16, 32, 64};
  int num_classes = 10;
};

inline const std::string kDefaultTap = "b3c3";

Network build_feature_extractor(const FeatureExtractorConfig& config, std::uint64_t seed);
Network build_purifier(const PurifierConfig& config, std::uint64_t seed);
Network build_critic(const CriticConfig& config, std::uint64_t seed);
Network build_toy_classifier(const ClassifierConfig& config, std::uint64_t seed);

/// Closed-form scalar parameter count of a purifier.
std::int64_t purifier_parameter_count(const PurifierConfig& config);

/// Key/value round trip of builder configurations (stored in Network metadata).
std::map<std::string, std::string> to_metadata(const FeatureExtractorConfig& c);
std::map<std::string, std::string> to_metadata(const PurifierConfig& c);
std::map<std::string, std::string> to_metadata(const CriticConfig& c);
std::map<std::string, std::string> to_metadata(const ClassifierConfig& c);

/// Rebuilds an architecture from metadata written by a builder (kind plus
/// config keys). Parameters are freshly initialised.
Network build_from_metadata(const std::map<std::string, std::string>& metadata, std::uint64_t seed = 0);

}  // namespace nrp::nets
