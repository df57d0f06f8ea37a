#include "nrp/builders.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "nrp/rng.hpp"

namespace nrp::nets {
namespace {

LayerSpec conv_spec(std::string name, int input, int in_c, int out_c, int kernel = 3, int stride = 1) {
  LayerSpec s;
  s.name = std::move(name);
  s.kind = LayerKind::Conv;
  s.inputs = {input};
  s.in_channels = in_c;
  s.out_channels = out_c;
  s.kernel = kernel;
  s.stride = stride;
  s.padding = kernel / 2;
  return s;
}

LayerSpec simple_spec(std::string name, LayerKind kind, std::vector<int> inputs) {
  LayerSpec s;
  s.name = std::move(name);
  s.kind = kind;
  s.inputs = std::move(inputs);
  s.slope = kLeakySlope;
  return s;
}

// Kaiming (fan-in) normal init for conv/dense weights, zero biases.
void initialise(Network& net, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Tensor> values = net.parameter_values();
  const auto& params = net.parameters();
  const double gain = std::sqrt(2.0 / (1.0 + kLeakySlope * kLeakySlope));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& name = params[i].name;
    const auto& shape = params[i].value.shape();
    if (name.ends_with(".weight")) {
      std::int64_t fan_in = 1;
      for (std::size_t d = 1; d < shape.size(); ++d) fan_in *= shape[d];
      values[i] = rng.normal_tensor(shape, 0.0, gain / std::sqrt(static_cast<double>(fan_in)));
    }
  }
  net.set_parameter_values(std::move(values));
}

// Head copies input channel c to feature c (other features random), tail reads
// feature c back; dense-block convs shrink so the trunk starts near pass-through.
void identity_start(Network& net, const PurifierConfig& config) {
  std::vector<Tensor> values = net.parameter_values();
  const auto& params = net.parameters();
  const int in = config.in_channels;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& name = params[i].name;
    if (!name.ends_with(".weight")) continue;
    auto v = values[i].to_vector();
    const auto& shape = values[i].shape();  // [O, C, 3, 3]
    const std::int64_t C = shape[1];
    auto at = [&](std::int64_t o, std::int64_t c, int y, int x) -> double& { return v[((o * C + c) * 3 + y) * 3 + x]; };
    if (name == "head.weight") {
      for (int o = 0; o < in; ++o)
        for (std::int64_t c = 0; c < C; ++c)
          for (int y = 0; y < 3; ++y)
            for (int x = 0; x < 3; ++x) at(o, c, y, x) = (c == o && y == 1 && x == 1) ? 1.0 : 0.0;
    } else if (name == "tail.weight") {
      // each basic block scales the pass-through by (1 + residual_scale)
      std::fill(v.begin(), v.end(), 0.0);
      const double gain = std::pow(1.0 + config.residual_scale, -config.basic_blocks);
      for (int o = 0; o < in; ++o) at(o, o, 1, 1) = gain;
    } else {
      for (auto& e : v) e *= 0.1;
    }
    std::vector<float> f(v.begin(), v.end());
    values[i] = make_tensor(shape, std::move(f));
  }
  net.set_parameter_values(std::move(values));
}

std::string join(const std::vector<int>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

std::vector<int> split_ints(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stoi(item));
  return out;
}

const std::string& need(const std::map<std::string, std::string>& m, const std::string& key) {
  auto it = m.find(key);
  if (it == m.end()) throw std::invalid_argument("network metadata lacks '" + key + "'");
  return it->second;
}

}  // namespace

Network build_feature_extractor(const FeatureExtractorConfig& config, std::uint64_t seed) {
  if (config.widths.empty() || config.widths.size() != config.convs_per_block.size())
    throw std::invalid_argument("feature extractor: widths and convs_per_block must align");
  Network net("feature_extractor", config.in_channels);
  int prev = 0;
  int channels = config.in_channels;
  for (std::size_t b = 0; b < config.widths.size(); ++b) {
    if (b > 0) {
      auto pool = simple_spec("pool" + std::to_string(b), LayerKind::MaxPool, {prev});
      pool.kernel = 2;
      pool.stride = 2;
      prev = net.add_layer(pool);
    }
    for (int c = 0; c < config.convs_per_block[b]; ++c) {
      const std::string tag = "b" + std::to_string(b + 1) + "c" + std::to_string(c + 1);
      prev = net.add_layer(conv_spec(tag + ".conv", prev, channels, config.widths[b]));
      prev = net.add_layer(simple_spec(tag + ".act", LayerKind::LeakyRelu, {prev}));
      net.declare_tap(tag, prev);
      channels = config.widths[b];
    }
  }
  prev = net.add_layer(simple_spec("gap", LayerKind::GlobalAvgPool, {prev}));
  LayerSpec head = simple_spec("head", LayerKind::Dense, {prev});
  head.in_channels = channels;
  head.out_channels = config.num_classes;
  net.add_layer(head);
  initialise(net, seed);
  net.metadata() = to_metadata(config);
  return net;
}

Network build_purifier(const PurifierConfig& config, std::uint64_t seed) {
  if (config.basic_blocks < 1) throw std::invalid_argument("purifier needs at least one basic block");
  if (config.width < 1 || config.growth < 1) throw std::invalid_argument("purifier widths must be positive");
  Network net("purifier", config.in_channels);
  const int w = config.width;
  const int g = config.growth;
  int trunk = net.add_layer(conv_spec("head", 0, config.in_channels, w));
  for (int b = 0; b < config.basic_blocks; ++b) {
    const std::string bb = "rb" + std::to_string(b);
    const int block_in = trunk;
    int x = trunk;
    for (int d = 0; d < 3; ++d) {
      const std::string db = bb + ".d" + std::to_string(d);
      std::vector<int> features{x};
      int channels = w;
      for (int c = 0; c < 4; ++c) {
        const int in = features.size() == 1
                           ? features[0]
                           : net.add_layer(simple_spec(db + ".cat" + std::to_string(c), LayerKind::Concat, features));
        int y = net.add_layer(conv_spec(db + ".c" + std::to_string(c), in, channels, g));
        y = net.add_layer(simple_spec(db + ".a" + std::to_string(c), LayerKind::LeakyRelu, {y}));
        features.push_back(y);
        channels += g;
      }
      const int cat = net.add_layer(simple_spec(db + ".cat4", LayerKind::Concat, features));
      const int last = net.add_layer(conv_spec(db + ".c4", cat, channels, w));
      auto res = simple_spec(db + ".res", LayerKind::ScaledAdd, {x, last});
      res.scale = config.residual_scale;
      x = net.add_layer(res);
    }
    auto res = simple_spec(bb + ".res", LayerKind::ScaledAdd, {block_in, x});
    res.scale = config.residual_scale;
    trunk = net.add_layer(res);
  }
  net.add_layer(conv_spec("tail", trunk, w, config.in_channels));
  initialise(net, seed);
  if (config.identity_init) identity_start(net, config);
  net.metadata() = to_metadata(config);
  return net;
}

Network build_critic(const CriticConfig& config, std::uint64_t seed) {
  if (config.widths.size() != config.strides.size() || config.widths.empty())
    throw std::invalid_argument("critic: widths and strides must align");
  Network net("critic", config.in_channels);
  int prev = 0;
  int channels = config.in_channels;
  for (std::size_t b = 0; b < config.widths.size(); ++b) {
    const std::string tag = "blk" + std::to_string(b + 1);
    auto conv = conv_spec(tag + ".conv", prev, channels, config.widths[b], 3, config.strides[b]);
    conv.bias = false;
    prev = net.add_layer(conv);
    prev = net.add_layer(simple_spec(tag + ".bn", LayerKind::BatchNorm, {prev}));
    prev = net.add_layer(simple_spec(tag + ".act", LayerKind::LeakyRelu, {prev}));
    net.declare_tap(tag, prev);
    channels = config.widths[b];
  }
  prev = net.add_layer(simple_spec("gap", LayerKind::GlobalAvgPool, {prev}));
  LayerSpec fc = simple_spec("fc", LayerKind::Dense, {prev});
  fc.in_channels = channels;
  fc.out_channels = 1;
  net.add_layer(fc);
  initialise(net, seed);
  net.metadata() = to_metadata(config);
  return net;
}

Network build_toy_classifier(const ClassifierConfig& config, std::uint64_t seed) {
  if (config.widths.empty()) throw std::invalid_argument("classifier needs at least one conv stage");
  Network net("classifier", config.in_channels);
  int prev = 0;
  int channels = config.in_channels;
  for (std::size_t s = 0; s < config.widths.size(); ++s) {
    const std::string tag = "s" + std::to_string(s + 1);
    prev = net.add_layer(conv_spec(tag + ".conv", prev, channels, config.widths[s]));
    prev = net.add_layer(simple_spec(tag + ".act", LayerKind::LeakyRelu, {prev}));
    net.declare_tap(tag, prev);
    if (s + 1 < config.widths.size()) {
      auto pool = simple_spec(tag + ".pool", LayerKind::MaxPool, {prev});
      pool.kernel = 2;
      pool.stride = 2;
      prev = net.add_layer(pool);
    }
    channels = config.widths[s];
  }
  prev = net.add_layer(simple_spec("gap", LayerKind::GlobalAvgPool, {prev}));
  LayerSpec fc = simple_spec("fc", LayerKind::Dense, {prev});
  fc.in_channels = channels;
  fc.out_channels = config.num_classes;
  net.add_layer(fc);
  initialise(net, seed);
  net.metadata() = to_metadata(config);
  return net;
}

std::int64_t purifier_parameter_count(const PurifierConfig& c) {
  const std::int64_t w = c.width, g = c.growth, in = c.in_channels;
  std::int64_t dense_block = 0;
  for (std::int64_t j = 0; j < 4; ++j) dense_block += 9 * (w + j * g) * g + g;
  dense_block += 9 * (w + 4 * g) * w + w;
  return (9 * in * w + w) + 3 * c.basic_blocks * dense_block + (9 * w * in + in);
}

std::map<std::string, std::string> to_metadata(const FeatureExtractorConfig& c) {
  return {{"kind", "feature_extractor"},
          {"in_channels", std::to_string(c.in_channels)},
          {"widths", join(c.widths)},
          {"convs_per_block", join(c.convs_per_block)},
          {"num_classes", std::to_string(c.num_classes)}};
}

std::map<std::string, std::string> to_metadata(const PurifierConfig& c) {
  std::ostringstream scale;
  scale.precision(17);
  scale << c.residual_scale;
  return {{"kind", "purifier"},
          {"in_channels", std::to_string(c.in_channels)},
          {"width", std::to_string(c.width)},
          {"growth", std::to_string(c.growth)},
          {"basic_blocks", std::to_string(c.basic_blocks)},
          {"residual_scale", scale.str()},
          {"identity_init", c.identity_init ? "1" : "0"}};
}

std::map<std::string, std::string> to_metadata(const CriticConfig& c) {
  return {{"kind", "critic"},
          {"in_channels", std::to_string(c.in_channels)},
          {"widths", join(c.widths)},
          {"strides", join(c.strides)}};
}

std::map<std::string, std::string> to_metadata(const ClassifierConfig& c) {
  return {{"kind", "classifier"},
          {"in_channels", std::to_string(c.in_channels)},
          {"widths", join(c.widths)},
          {"num_classes", std::to_string(c.num_classes)}};
}

Network build_from_metadata(const std::map<std::string, std::string>& m, std::uint64_t seed) {
  const auto& kind = need(m, "kind");
  if (kind == "feature_extractor") {
    FeatureExtractorConfig c;
    c.in_channels = std::stoi(need(m, "in_channels"));
    c.widths = split_ints(need(m, "widths"));
    c.convs_per_block = split_ints(need(m, "convs_per_block"));
    c.num_classes = std::stoi(need(m, "num_classes"));
    return build_feature_extractor(c, seed);
  }
  if (kind == "purifier") {
    PurifierConfig c;
    c.in_channels = std::stoi(need(m, "in_channels"));
    c.width = std::stoi(need(m, "width"));
    c.growth = std::stoi(need(m, "growth"));
    c.basic_blocks = std::stoi(need(m, "basic_blocks"));
    c.residual_scale = std::stod(need(m, "residual_scale"));
    if (auto it = m.find("identity_init"); it != m.end()) c.identity_init = it->second == "1";
    return build_purifier(c, seed);
  }
  if (kind == "critic") {
    CriticConfig c;
    c.in_channels = std::stoi(need(m, "in_channels"));
    c.widths = split_ints(need(m, "widths"));
    c.strides = split_ints(need(m, "strides"));
    return build_critic(c, seed);
  }
  if (kind == "classifier") {
    ClassifierConfig c;
    c.in_channels = std::stoi(need(m, "in_channels"));
    c.widths = split_ints(need(m, "widths"));
    c.num_classes = std::stoi(need(m, "num_classes"));
    return build_toy_classifier(c, seed);
  }
  if (kind == "identity") {
    auto net = identity_network(std::stoi(need(m, "in_channels")));
    net.metadata() = m;
    return net;
  }
  throw std::invalid_argument("unknown network kind '" + kind + "'");
}

}  // namespace nrp::nets
