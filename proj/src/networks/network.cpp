#include "nrp/network.hpp"

#include <algorithm>
#include <deque>
#include <stdexcept>

namespace nrp::nets {

const char* layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::Input: return "input";
    case LayerKind::Conv: return "conv";
    case LayerKind::LeakyRelu: return "leaky_relu";
    case LayerKind::BatchNorm: return "batch_norm";
    case LayerKind::MaxPool: return "max_pool";
    case LayerKind::GlobalAvgPool: return "global_avg_pool";
    case LayerKind::Dense: return "dense";
    case LayerKind::Concat: return "concat";
    case LayerKind::ScaledAdd: return "scaled_add";
  }
  return "?";
}

Network::Network(std::string kind, int in_channels) : kind_(std::move(kind)), in_channels_(in_channels) {
  if (in_channels < 1) throw std::invalid_argument("network needs at least one input channel");
  LayerSpec input;
  input.name = "input";
  input.kind = LayerKind::Input;
  input.out_channels = in_channels;
  layers_.push_back(input);
  slots_.push_back({});
}

int Network::add_layer(LayerSpec spec) {
  if (spec.kind == LayerKind::Input) throw std::invalid_argument("only one input layer is allowed");
  if (spec.inputs.empty()) throw std::invalid_argument("layer '" + spec.name + "' has no inputs");
  const int index = static_cast<int>(layers_.size());
  for (int in : spec.inputs)
    if (in < 0 || in >= index)
      throw std::invalid_argument("layer '" + spec.name + "' references a layer that does not precede it");
  if (layer_index(spec.name) >= 0) throw std::invalid_argument("duplicate layer name '" + spec.name + "'");

  auto channels_of = [&](int layer) { return layers_[static_cast<std::size_t>(layer)].out_channels; };
  const int first_c = channels_of(spec.inputs[0]);
  auto expect_inputs = [&](std::size_t n) {
    if (spec.inputs.size() != n)
      throw std::invalid_argument("layer '" + spec.name + "' expects " + std::to_string(n) + " input(s)");
  };

  LayerSlots slot;
  auto add_param = [&](const std::string& suffix, Shape shape) {
    params_.push_back({spec.name + "." + suffix, Tensor::zeros(shape)});
    return static_cast<int>(params_.size() - 1);
  };
  auto add_buffer = [&](const std::string& suffix, Shape shape, double fill) {
    buffers_.push_back({spec.name + "." + suffix, Tensor::full(shape, fill)});
    return static_cast<int>(buffers_.size() - 1);
  };

  switch (spec.kind) {
    case LayerKind::Conv:
      expect_inputs(1);
      if (spec.in_channels != first_c)
        throw std::invalid_argument("conv '" + spec.name + "' expects " + std::to_string(spec.in_channels) +
                                    " channels, producer has " + std::to_string(first_c));
      if (spec.out_channels < 1 || spec.kernel < 1 || spec.stride < 1 || spec.padding < 0)
        throw std::invalid_argument("conv '" + spec.name + "' has invalid geometry");
      slot.weight = add_param("weight", {spec.out_channels, spec.in_channels, spec.kernel, spec.kernel});
      if (spec.bias) slot.bias = add_param("bias", {spec.out_channels});
      break;
    case LayerKind::Dense:
      expect_inputs(1);
      if (spec.in_channels != first_c)
        throw std::invalid_argument("dense '" + spec.name + "' expects " + std::to_string(spec.in_channels) +
                                    " features, producer has " + std::to_string(first_c));
      slot.weight = add_param("weight", {spec.out_channels, spec.in_channels});
      if (spec.bias) slot.bias = add_param("bias", {spec.out_channels});
      break;
    case LayerKind::BatchNorm:
      expect_inputs(1);
      spec.in_channels = spec.out_channels = first_c;
      slot.weight = add_param("gamma", {first_c});
      params_.back().value = Tensor::full({first_c}, 1.0);
      slot.bias = add_param("beta", {first_c});
      slot.running_mean = add_buffer("running_mean", {first_c}, 0.0);
      slot.running_var = add_buffer("running_var", {first_c}, 1.0);
      break;
    case LayerKind::LeakyRelu:
    case LayerKind::MaxPool:
    case LayerKind::GlobalAvgPool:
      expect_inputs(1);
      spec.in_channels = spec.out_channels = first_c;
      break;
    case LayerKind::Concat: {
      int total = 0;
      for (int in : spec.inputs) total += channels_of(in);
      spec.in_channels = spec.out_channels = total;
      break;
    }
    case LayerKind::ScaledAdd:
      expect_inputs(2);
      if (channels_of(spec.inputs[1]) != first_c)
        throw std::invalid_argument("scaled_add '" + spec.name + "' joins different channel counts");
      spec.in_channels = spec.out_channels = first_c;
      break;
    case LayerKind::Input:
      break;
  }
  layers_.push_back(std::move(spec));
  slots_.push_back(slot);
  output_ = index;
  return index;
}

void Network::declare_tap(const std::string& name, int layer) {
  if (layer < 0 || layer >= static_cast<int>(layers_.size())) throw std::out_of_range("tap layer out of range");
  if (has_tap(name)) throw std::invalid_argument("duplicate tap '" + name + "'");
  taps_.emplace_back(name, layer);
}

void Network::set_output(int layer) {
  if (layer < 0 || layer >= static_cast<int>(layers_.size())) throw std::out_of_range("output layer out of range");
  output_ = layer;
}

int Network::layer_index(const std::string& name) const {
  for (std::size_t i = 0; i < layers_.size(); ++i)
    if (layers_[i].name == name) return static_cast<int>(i);
  return -1;
}

std::vector<std::string> Network::tap_names() const {
  auto ordered = taps_;
  std::stable_sort(ordered.begin(), ordered.end(), [](const auto& a, const auto& b) { return a.second < b.second; });
  std::vector<std::string> names;
  for (const auto& t : ordered) names.push_back(t.first);
  return names;
}

bool Network::has_tap(const std::string& name) const {
  return std::any_of(taps_.begin(), taps_.end(), [&](const auto& t) { return t.first == name; });
}

std::vector<Tensor> Network::parameter_values() const {
  std::vector<Tensor> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.value);
  return out;
}

void Network::set_parameter_values(std::vector<Tensor> values) {
  if (values.size() != params_.size()) throw ShapeError("parameter count mismatch for " + kind_);
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i].shape() != params_[i].value.shape())
      throw ShapeError("parameter '" + params_[i].name + "' expects shape " + shape_str(params_[i].value.shape()) +
                       ", got " + shape_str(values[i].shape()));
    params_[i].value = std::move(values[i]);
  }
}

void Network::set_parameter(const std::string& name, Tensor value) {
  for (auto& p : params_) {
    if (p.name != name) continue;
    if (p.value.shape() != value.shape())
      throw ShapeError("parameter '" + name + "' expects shape " + shape_str(p.value.shape()));
    p.value = std::move(value);
    return;
  }
  throw std::invalid_argument("unknown parameter '" + name + "'");
}

void Network::set_buffer(const std::string& name, Tensor value) {
  for (auto& b : buffers_) {
    if (b.name != name) continue;
    if (b.value.shape() != value.shape())
      throw ShapeError("buffer '" + name + "' expects shape " + shape_str(b.value.shape()));
    b.value = std::move(value);
    return;
  }
  throw std::invalid_argument("unknown buffer '" + name + "'");
}

std::vector<NamedTensor> Network::state() const {
  std::vector<NamedTensor> out = params_;
  out.insert(out.end(), buffers_.begin(), buffers_.end());
  return out;
}

void Network::load_state(const std::vector<NamedTensor>& state) {
  const std::size_t expected = params_.size() + buffers_.size();
  for (std::size_t i = 0; i < std::min(expected, state.size()); ++i) {
    const auto& want = i < params_.size() ? params_[i] : buffers_[i - params_.size()];
    if (state[i].name != want.name) throw std::invalid_argument("state mismatch at '" + state[i].name + "', expected '" + want.name + "'");
    if (state[i].value.shape() != want.value.shape())
      throw ShapeError("state mismatch at '" + want.name + "': shape " + shape_str(state[i].value.shape()) +
                       ", expected " + shape_str(want.value.shape()));
  }
  if (state.size() != expected) {
    const std::string name = state.size() > expected ? state[expected].name
                                                     : (expected - 1 < params_.size() ? params_[state.size()].name
                                                                                     : buffers_[state.size() - params_.size()].name);
    throw std::invalid_argument("state mismatch at '" + name + "': expected " + std::to_string(expected) +
                                " tensors, got " + std::to_string(state.size()));
  }
  for (std::size_t i = 0; i < expected; ++i) {
    auto& slot = i < params_.size() ? params_[i] : buffers_[i - params_.size()];
    slot.value = state[i].value;
  }
}

std::int64_t Network::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

DType Network::dtype() const { return params_.empty() ? DType::F32 : params_.front().value.dtype(); }

std::vector<bool> Network::needed_layers(const ForwardOptions& options) const {
  std::vector<bool> needed(layers_.size(), false);
  std::vector<int> stack;
  if (options.want_output) stack.push_back(output_);
  for (const auto& name : options.taps) {
    auto it = std::find_if(taps_.begin(), taps_.end(), [&](const auto& t) { return t.first == name; });
    if (it == taps_.end()) throw std::invalid_argument("unknown tap '" + name + "' for " + kind_);
    stack.push_back(it->second);
  }
  while (!stack.empty()) {
    const int l = stack.back();
    stack.pop_back();
    if (needed[static_cast<std::size_t>(l)]) continue;
    needed[static_cast<std::size_t>(l)] = true;
    for (int in : layers_[static_cast<std::size_t>(l)].inputs) stack.push_back(in);
  }
  return needed;
}

void Network::check_input(const Tensor& x) const {
  if (x.rank() != 4 || x.dim(1) != in_channels_)
    throw ShapeError(kind_ + ": expected input [N," + std::to_string(in_channels_) + ",H,W], got " + shape_str(x.shape()));
}

ForwardResult Network::forward(Tape& tape, const Var& input, const ForwardOptions& options) const {
  check_input(input.value());
  const auto needed = needed_layers(options);
  ForwardResult result;
  result.params.reserve(params_.size());
  for (const auto& p : params_) {
    if (p.value.dtype() != input.dtype())
      throw std::invalid_argument(kind_ + ": parameter dtype differs from input dtype");
    result.params.push_back(tape.leaf(p.value, options.trainable));
  }
  std::vector<Var> vals(layers_.size());
  vals[0] = input;
  for (std::size_t i = 1; i < layers_.size(); ++i) {
    if (!needed[i]) continue;
    const auto& L = layers_[i];
    const auto& S = slots_[i];
    const Var& x = vals[static_cast<std::size_t>(L.inputs[0])];
    auto param = [&](int idx) { return idx >= 0 ? result.params[static_cast<std::size_t>(idx)] : Var{}; };
    switch (L.kind) {
      case LayerKind::Conv:
        vals[i] = ops::conv2d(x, param(S.weight), param(S.bias), {L.stride, L.stride, L.padding, L.padding});
        break;
      case LayerKind::Dense:
        vals[i] = ops::dense(x, param(S.weight), param(S.bias));
        break;
      case LayerKind::LeakyRelu:
        vals[i] = ops::leaky_relu(x, L.slope);
        break;
      case LayerKind::BatchNorm:
        if (options.mode == Mode::Train) {
          ops::BatchNormStats stats;
          vals[i] = ops::batch_norm_train(x, param(S.weight), param(S.bias), kBatchNormEps, &stats);
          auto blend = [&](int buf, const Tensor& batch) {
            const auto& old = buffers_[static_cast<std::size_t>(buf)].value;
            auto o = old.to_vector();
            auto b = batch.to_vector();
            return visit_dtype(old.dtype(), [&](auto tag) {
              using T = decltype(tag);
              std::vector<T> out(o.size());
              for (std::size_t k = 0; k < o.size(); ++k)
                out[k] = static_cast<T>((1.0 - kBatchNormMomentum) * o[k] + kBatchNormMomentum * b[k]);
              return Tensor(old.shape(), std::move(out));
            });
          };
          result.stat_updates.emplace_back(static_cast<std::size_t>(S.running_mean), blend(S.running_mean, stats.mean));
          result.stat_updates.emplace_back(static_cast<std::size_t>(S.running_var), blend(S.running_var, stats.var));
        } else {
          vals[i] = ops::batch_norm_eval(x, param(S.weight), param(S.bias),
                                         buffers_[static_cast<std::size_t>(S.running_mean)].value,
                                         buffers_[static_cast<std::size_t>(S.running_var)].value, kBatchNormEps);
        }
        break;
      case LayerKind::MaxPool:
        vals[i] = ops::max_pool2d(x, L.kernel, L.stride);
        break;
      case LayerKind::GlobalAvgPool:
        vals[i] = ops::global_avg_pool(x);
        break;
      case LayerKind::Concat: {
        std::vector<Var> parts;
        for (int in : L.inputs) parts.push_back(vals[static_cast<std::size_t>(in)]);
        vals[i] = ops::concat_channels(parts);
        break;
      }
      case LayerKind::ScaledAdd:
        vals[i] = ops::add(x, ops::scale(vals[static_cast<std::size_t>(L.inputs[1])], L.scale));
        break;
      case LayerKind::Input:
        break;
    }
  }
  if (options.want_output) result.output = vals[static_cast<std::size_t>(output_)];
  for (const auto& name : options.taps) {
    auto it = std::find_if(taps_.begin(), taps_.end(), [&](const auto& t) { return t.first == name; });
    result.taps[name] = vals[static_cast<std::size_t>(it->second)];
  }
  return result;
}

void Network::apply_stat_updates(const ForwardResult& result) {
  for (const auto& [idx, value] : result.stat_updates) buffers_.at(idx).value = value;
}

Tensor Network::infer(const Tensor& input) const {
  Tape tape;
  auto x = tape.constant(input);
  return forward(tape, x, {}).output.value();
}

Tensor Network::tap(const Tensor& input, const std::string& name) const {
  Tape tape;
  auto x = tape.constant(input);
  ForwardOptions opts;
  opts.taps = {name};
  opts.want_output = false;
  return forward(tape, x, opts).taps.at(name).value();
}

Network Network::truncated(const std::string& tap_name) const {
  ForwardOptions opts;
  opts.taps = {tap_name};
  opts.want_output = false;
  const auto needed = needed_layers(opts);
  Network out(kind_ + "/" + tap_name, in_channels_);
  out.metadata_ = metadata_;
  std::vector<int> remap(layers_.size(), -1);
  remap[0] = 0;
  for (std::size_t i = 1; i < layers_.size(); ++i) {
    if (!needed[i]) continue;
    LayerSpec spec = layers_[i];
    for (auto& in : spec.inputs) in = remap[static_cast<std::size_t>(in)];
    remap[i] = out.add_layer(spec);
    const auto& S = slots_[i];
    const auto& D = out.slots_[static_cast<std::size_t>(remap[i])];
    if (S.weight >= 0) out.params_[static_cast<std::size_t>(D.weight)].value = params_[static_cast<std::size_t>(S.weight)].value;
    if (S.bias >= 0) out.params_[static_cast<std::size_t>(D.bias)].value = params_[static_cast<std::size_t>(S.bias)].value;
    if (S.running_mean >= 0) {
      out.buffers_[static_cast<std::size_t>(D.running_mean)].value = buffers_[static_cast<std::size_t>(S.running_mean)].value;
      out.buffers_[static_cast<std::size_t>(D.running_var)].value = buffers_[static_cast<std::size_t>(S.running_var)].value;
    }
  }
  int tap_layer = 0;
  for (const auto& [name, layer] : taps_) {
    if (!needed[static_cast<std::size_t>(layer)]) continue;
    out.declare_tap(name, remap[static_cast<std::size_t>(layer)]);
    if (name == tap_name) tap_layer = layer;
  }
  out.set_output(remap[static_cast<std::size_t>(tap_layer)]);
  return out;
}

Network Network::cast(DType dtype) const {
  Network out = *this;
  for (auto& p : out.params_) p.value = p.value.cast(dtype);
  for (auto& b : out.buffers_) b.value = b.value.cast(dtype);
  return out;
}

bool Network::input_bypasses_convolutions() const {
  std::vector<std::vector<int>> consumers(layers_.size());
  for (std::size_t i = 1; i < layers_.size(); ++i)
    for (int in : layers_[i].inputs) consumers[static_cast<std::size_t>(in)].push_back(static_cast<int>(i));
  std::vector<bool> seen(layers_.size(), false);
  std::deque<int> queue{0};
  seen[0] = true;
  while (!queue.empty()) {
    const int l = queue.front();
    queue.pop_front();
    if (l == output_) return true;
    for (int next : consumers[static_cast<std::size_t>(l)]) {
      if (seen[static_cast<std::size_t>(next)] || layers_[static_cast<std::size_t>(next)].kind == LayerKind::Conv) continue;
      seen[static_cast<std::size_t>(next)] = true;
      queue.push_back(next);
    }
  }
  return false;
}

void Network::check_acyclic() const {
  for (std::size_t i = 0; i < layers_.size(); ++i)
    for (int in : layers_[i].inputs)
      if (in >= static_cast<int>(i)) throw std::logic_error("layer graph of " + kind_ + " is not topologically ordered");
}

Network identity_network(int channels) {
  Network net("identity", channels);
  net.metadata() = {{"kind", "identity"}, {"in_channels", std::to_string(channels)}};
  return net;
}

}  // namespace nrp::nets
