#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "nrp/ops.hpp"
#include "nrp/tape.hpp"

namespace nrp::nets {

enum class LayerKind {
  Input,
  Conv,
  LeakyRelu,
  BatchNorm,
  MaxPool,
  GlobalAvgPool,
  Dense,
  Concat,
  ScaledAdd,  // inputs[0] + scale * inputs[1]
};

const char* layer_kind_name(LayerKind kind);

struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::Input;
  std::vector<int> inputs;
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 3;
  int stride = 1;
  int padding = 1;
  bool bias = true;
  double slope = 0.2;
  double scale = 1.0;
};

struct NamedTensor {
  std::string name;
  Tensor value;
};

enum class Mode { Train, Eval };

struct ForwardOptions {
  Mode mode = Mode::Eval;
  std::vector<std::string> taps;
  bool want_output = true;
  /// Bind parameters as gradient-carrying leaves.
  bool trainable = false;
};

struct ForwardResult {
  Var output;  // unbound when want_output is false
  std::map<std::string, Var> taps;
  std::vector<Var> params;  // one per parameter, in declaration order
  /// Running-statistic values produced by train-mode batch norm, keyed by
  /// buffer index. Not applied until Network::apply_stat_updates.
  std::vector<std::pair<std::size_t, Tensor>> stat_updates;
};

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// Declarative layer graph with named parameters and tap points. Layers are
/// stored in topological order; layer 0 is the input.
class Network {
 public:
  Network(std::string kind, int in_channels);

  /// Appends a layer, allocating its parameters (uninitialised: zeros).
  int add_layer(LayerSpec spec);
  void declare_tap(const std::string& name, int layer);
  void set_output(int layer);

  const std::string& kind() const { return kind_; }
  int in_channels() const { return in_channels_; }
  const std::vector<LayerSpec>& layers() const { return layers_; }
  int output_layer() const { return output_; }
  int layer_index(const std::string& name) const;

  /// Tap names in depth order.
  std::vector<std::string> tap_names() const;
  bool has_tap(const std::string& name) const;

  const std::vector<NamedTensor>& parameters() const { return params_; }
  const std::vector<NamedTensor>& buffers() const { return buffers_; }
  std::vector<Tensor> parameter_values() const;
  void set_parameter_values(std::vector<Tensor> values);
  void set_parameter(const std::string& name, Tensor value);
  void set_buffer(const std::string& name, Tensor value);
  /// Parameters followed by buffers; the persisted state.
  std::vector<NamedTensor> state() const;
  void load_state(const std::vector<NamedTensor>& state);
  std::int64_t parameter_count() const;

  std::map<std::string, std::string>& metadata() { return metadata_; }
  const std::map<std::string, std::string>& metadata() const { return metadata_; }

  ForwardResult forward(Tape& tape, const Var& input, const ForwardOptions& options) const;
  void apply_stat_updates(const ForwardResult& result);

  /// Eval-mode output without gradients.
  Tensor infer(const Tensor& input) const;
  /// Eval-mode tap activation without gradients.
  Tensor tap(const Tensor& input, const std::string& name) const;

  /// Network consisting of the ancestors of `tap`, whose output is that tap.
  Network truncated(const std::string& tap) const;
  Network cast(DType dtype) const;

  /// True when some path leads from the input to the output without passing
  /// through a convolution.
  bool input_bypasses_convolutions() const;

  void check_acyclic() const;

  DType dtype() const;

 private:
  struct LayerSlots {
    int weight = -1;
    int bias = -1;
    int running_mean = -1;
    int running_var = -1;
  };

  std::vector<bool> needed_layers(const ForwardOptions& options) const;
  void check_input(const Tensor& x) const;

  std::string kind_;
  int in_channels_;
  std::vector<LayerSpec> layers_;
  std::vector<LayerSlots> slots_;
  std::vector<NamedTensor> params_;
  std::vector<NamedTensor> buffers_;
  std::vector<std::pair<std::string, int>> taps_;
  int output_ = 0;
  std::map<std::string, std::string> metadata_;
};

/// Network whose output is its input.
Network identity_network(int channels);

}  // namespace nrp::nets
