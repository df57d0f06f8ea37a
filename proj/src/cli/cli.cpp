#include "nrp/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <deque>
#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>

#include "nrp/builders.hpp"
#include "nrp/checkpoint.hpp"
#include "nrp/data.hpp"
#include "nrp/eval.hpp"
#include "nrp/training.hpp"

namespace nrp::cli {
namespace {

namespace fs = std::filesystem;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Config = std::map<std::string, std::string>;

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep))
    if (!cur.empty()) out.push_back(cur);
  return out;
}

std::vector<int> parse_ints(const std::string& s, const std::string& what) {
  std::vector<int> out;
  for (const auto& part : split(s, ',')) {
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(part, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != part.size()) throw UsageError(what + ": '" + part + "' is not an integer");
    out.push_back(v);
  }
  if (out.empty()) throw UsageError(what + ": empty list");
  return out;
}

std::vector<double> parse_doubles(const std::string& s, const std::string& what) {
  std::vector<double> out;
  for (const auto& part : split(s, ',')) {
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(part, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != part.size()) throw UsageError(what + ": '" + part + "' is not a number");
    out.push_back(v);
  }
  if (out.empty()) throw UsageError(what + ": empty list");
  return out;
}

bool given(const CLI::App* app, const std::string& name) { return app->get_option(name)->count() > 0; }

/// Every option of the subcommand with its effective value.
Config resolve(const CLI::App* app) {
  Config c;
  c["command"] = app->get_name();
  for (const CLI::Option* opt : app->get_options()) {
    const auto& name = opt->get_lnames();
    if (name.empty() || name[0] == "help" || name[0] == "config") continue;
    c[name[0]] = opt->count() ? opt->as<std::string>() : opt->get_default_str();
  }
  return c;
}

Config prefixed(const Config& c) {
  Config out;
  for (const auto& [k, v] : c) out["config." + k] = v;
  return out;
}

void write_sidecar(const fs::path& path, const Config& c) {
  io::atomic_write_text(io::meta_path(path), io::format_key_values(prefixed(c)));
}

io::Dataset load_data(const std::string& handle, std::int64_t count) {
  auto d = io::load_dataset(io::DatasetHandle::parse(handle));
  if (count > 0 && count < d.count) d = d.head(count);
  return d;
}

io::Dataset to_dataset(const Tensor& images, const std::vector<int>& labels, int num_classes) {
  io::Dataset d;
  d.count = images.dim(0);
  d.channels = static_cast<int>(images.dim(1));
  d.height = static_cast<int>(images.dim(2));
  d.width = static_cast<int>(images.dim(3));
  d.num_classes = num_classes;
  d.labels = labels;
  const auto v = images.to_vector();
  d.pixels.resize(v.size());
  for (std::size_t i = 0; i < v.size(); ++i)
    d.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(v[i], 0.0, 1.0) * 255.0));
  return d;
}

std::string stem(const std::string& path) { return fs::path(path).stem().string(); }

// ---- attack flags -----------------------------------------------------------

struct AttackFlags {
  std::string method = "ssp";
  double epsilon = 16;
  double step = 1.6;
  int iters = 100;
  std::string tap = nets::kDefaultTap;
  std::string metric = "mae";
  double momentum = 1.0;
  double diversity = 0.7;
  std::uint64_t seed = 0;
};

void add_attack_flags(CLI::App* app, AttackFlags& f, bool with_method = true) {
  if (with_method) app->add_option("--method", f.method, "fgsm|rfgsm|ifgsm|mifgsm|dim|ssp|bpda-ssp|bpda-ifgsm");
  app->add_option("--epsilon", f.epsilon, "L-inf budget on the 0-255 scale");
  app->add_option("--step", f.step, "step size on the 0-255 scale")->default_str("per-method");
  app->add_option("--iters", f.iters, "iterations")->default_str("per-method");
  app->add_option("--tap", f.tap, "feature tap for feature-space attacks");
  app->add_option("--metric", f.metric, "feature distance: mae|l2|cosine");
  app->add_option("--momentum", f.momentum, "momentum decay (mifgsm, dim)");
  app->add_option("--diversity", f.diversity, "input-diversity probability (dim)");
  app->add_option("--seed", f.seed, "attack seed");
}

bool has_momentum(attacks::Method m) { return m == attacks::Method::Mifgsm || m == attacks::Method::Dim; }

/// Builds the AttackSpec for `method` from the flags. With `strict`, flags that do
/// not apply to the method are usage errors; otherwise they are skipped.
attacks::AttackSpec build_spec(const CLI::App* app, const AttackFlags& f, attacks::Method m, bool strict) {
  using attacks::Method;
  auto s = attacks::AttackSpec::defaults(m);
  const auto reject = [&](const std::string& flag, const std::string& why) {
    if (strict) throw UsageError(flag + " cannot be used with --method " + attacks::method_name(m) + ": " + why);
  };
  s.epsilon = f.epsilon / 255.0;
  const bool single = m == Method::Fgsm || m == Method::Rfgsm;
  if (given(app, "--step")) {
    s.step = f.step / 255.0;
  } else if (single) {
    s.step = s.epsilon;
  }
  if (given(app, "--iters")) {
    if (single && f.iters != 1)
      reject("--iters", "single-step method");
    else if (!single)
      s.iterations = f.iters;
  }
  const bool feature = attacks::uses_tap(m);
  if (given(app, "--tap")) {
    if (feature)
      s.tap = f.tap;
    else
      reject("--tap", "the method does not attack features");
  }
  if (given(app, "--metric")) {
    if (feature)
      s.metric = attacks::parse_metric(f.metric);
    else
      reject("--metric", "the method does not attack features");
  }
  if (given(app, "--momentum")) {
    if (has_momentum(m))
      s.momentum = f.momentum;
    else
      reject("--momentum", "only mifgsm and dim use momentum");
  }
  if (given(app, "--diversity")) {
    if (m == Method::Dim)
      s.diversity_prob = f.diversity;
    else
      reject("--diversity", "only dim uses input diversity");
  }
  s.seed = f.seed;
  try {
    s.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  return s;
}

void require(bool ok, const std::string& message) {
  if (!ok) throw UsageError(message);
}

// ---- commands ---------------------------------------------------------------

struct TrainNetFlags {
  std::string data = "synthetic";
  std::int64_t count = 0;
  int steps = 400;
  int batch = 32;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  std::string widths;
  std::string convs = "2,2,3,3";
  std::string out;
};

int train_network(const CLI::App* app, const TrainNetFlags& f, bool extractor, std::ostream& out) {
  const auto data = load_data(f.data, f.count);
  const std::uint64_t init_seed = splitmix64(f.seed ^ 0x696e6974ULL);
  nets::Network net = [&] {
    if (extractor) {
      nets::FeatureExtractorConfig c;
      c.in_channels = data.channels;
      c.widths = parse_ints(f.widths, "--widths");
      c.convs_per_block = parse_ints(f.convs, "--convs");
      c.num_classes = data.num_classes;
      return nets::build_feature_extractor(c, init_seed);
    }
    nets::ClassifierConfig c;
    c.in_channels = data.channels;
    c.widths = parse_ints(f.widths, "--widths");
    c.num_classes = data.num_classes;
    return nets::build_toy_classifier(c, init_seed);
  }();
  const int report_every = std::max(1, f.steps / 10);
  training::train_classifier(net, data, {f.batch, f.steps, f.lr, f.seed}, [&](int step, double loss) {
    if (step % report_every == 0 || step == f.steps) out << "step " << step << " loss " << loss << '\n';
  });
  const auto eval_n = std::min<std::int64_t>(data.count, 2000);
  out << "train_accuracy=" << eval::top_k_accuracy(net, data.slice(0, eval_n), 1) << " (first " << eval_n
      << " samples)\n";
  io::save_checkpoint(net, f.out, prefixed(resolve(app)));
  out << "wrote " << f.out << '\n';
  return 0;
}

struct Networks {
  std::deque<nets::Network> store;
  const nets::Network* load(const std::string& path) {
    if (path.empty()) return nullptr;
    if (path == "identity") throw UsageError("'identity' is only valid as a defense");
    store.push_back(io::load_network(path));
    return &store.back();
  }
};

struct AttackCmd {
  AttackFlags attack;
  std::string in, out, extractor, classifier, purifier;
  std::int64_t count = 0;
  std::int64_t chunk = 50;
};

int run_attack_cmd(const CLI::App* app, const AttackCmd& f, std::ostream& out) {
  const auto m = attacks::parse_method(f.attack.method);
  const auto spec = build_spec(app, f.attack, m, true);
  require(!attacks::uses_tap(m) || !f.extractor.empty(), "--method " + f.attack.method + " needs --extractor");
  require(!attacks::uses_labels(m) || !f.classifier.empty(), "--method " + f.attack.method + " needs --classifier");
  const bool bpda = m == attacks::Method::BpdaSsp || m == attacks::Method::BpdaIfgsm;
  require(bpda == !f.purifier.empty(), bpda ? "BPDA attacks need --purifier" : "--purifier only applies to bpda-*");
  Networks nets;
  const attacks::AttackContext ctx{nets.load(f.extractor), nets.load(f.classifier), nets.load(f.purifier)};
  const auto data = load_data(f.in, f.count);
  const auto batch = data.slice(0, data.count);
  const Tensor adv = eval::attack_set(ctx, batch, spec, f.chunk);
  io::write_imgb(to_dataset(adv, batch.labels, data.num_classes), f.out);
  write_sidecar(f.out, resolve(app));
  const auto a = adv.to_vector(), x = batch.images.to_vector();
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - x[i]));
  out << "attack=" << spec.digest() << "\nimages=" << data.count << " max_linf=" << worst * 255.0 << "/255\n";
  out << "wrote " << f.out << '\n';
  return 0;
}

struct TrainNrpCmd {
  std::string data = "synthetic";
  std::int64_t count = 0;
  std::string extractor, out, critic_out, log;
  std::string ablation = "full";
  double alpha = 5e-3, gamma = 1e-2, lambda = 1.0;
  double lr = 1e-4;
  int batch = 16, crop = 24, steps = 200;
  std::uint64_t seed = 0;
  int width = 32, growth = 16, blocks = 2;
  std::string tap = nets::kDefaultTap;
  std::string epsilons = "4,8,12,16";
  int adversary_iters = 5;
  double adversary_step = 0;
  double gaussian_sigma = 1.0;
  int checkpoint_every = 0;
  int print_every = 10;
};

int run_train_nrp(const CLI::App* app, const TrainNrpCmd& f, std::ostream& out) {
  const auto config = resolve(app);
  const nets::Network F = io::load_network(f.extractor);
  const auto data = load_data(f.data, f.count);

  training::TrainConfig tc;
  tc.batch = f.batch;
  tc.crop = f.crop;
  tc.steps = f.steps;
  tc.lr_generator = tc.lr_critic = f.lr;
  tc.weights = {f.alpha, f.gamma, f.lambda};
  tc.ablation = training::parse_ablation(f.ablation);
  tc.epsilons.clear();
  for (double e : parse_doubles(f.epsilons, "--epsilons")) tc.epsilons.push_back(e / 255.0);
  tc.adversary_iterations = f.adversary_iters;
  if (given(app, "--adversary-step")) tc.adversary_step = f.adversary_step / 255.0;
  tc.tap = f.tap;
  tc.gaussian_sigma_scale = f.gaussian_sigma;
  tc.seed = f.seed;
  try {
    tc.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  require(tc.crop <= data.height && tc.crop <= data.width, "--crop exceeds the image size");

  nets::PurifierConfig pc;
  pc.in_channels = data.channels;
  pc.width = f.width;
  pc.growth = f.growth;
  pc.basic_blocks = f.blocks;
  nets::Network P = nets::build_purifier(pc, splitmix64(f.seed ^ 0x707572ULL));
  nets::CriticConfig cc;
  cc.in_channels = data.channels;
  nets::Network C = nets::build_critic(cc, splitmix64(f.seed ^ 0x637269ULL));

  std::vector<training::LogRecord> log;
  training::TrainCallbacks cb;
  cb.on_step = [&](const training::LogRecord& r) {
    log.push_back(r);
    if (f.print_every > 0 && (r.step % f.print_every == 0 || r.step == f.steps))
      out << "step " << r.step << " l_adv " << r.l_adv << " l_img " << r.l_img << " l_feat " << r.l_feat << " total "
          << r.total << " critic " << r.critic_loss << '\n';
  };
  cb.checkpoint_every = f.checkpoint_every;
  cb.on_checkpoint = [&](int step, const nets::Network& p, const nets::Network& c) {
    auto extra = prefixed(config);
    extra["step"] = std::to_string(step);
    io::save_checkpoint(p, f.out, extra);
    if (!f.critic_out.empty()) io::save_checkpoint(c, f.critic_out, extra);
    if (!f.log.empty()) io::atomic_write_text(f.log, training::log_csv(log));
  };
  try {
    training::train_nrp(F, P, C, data, tc, cb);
  } catch (const training::TrainingError&) {
    if (!f.log.empty()) io::atomic_write_text(f.log, training::log_csv(log));
    throw;
  }
  out << "wrote " << f.out << '\n';
  return 0;
}

struct PurifyCmd {
  std::string purifier, in, out;
  std::int64_t count = 0;
  double dynamic_noise = 0;
  std::uint64_t seed = 0;
  std::int64_t chunk = 100;
};

int run_purify(const CLI::App* app, const PurifyCmd& f, std::ostream& out) {
  const nets::Network P = io::load_network(f.purifier);
  const auto data = load_data(f.in, f.count);
  const auto batch = data.slice(0, data.count);
  const Tensor y = f.dynamic_noise > 0 ? eval::dynamic_defense_purify(P, batch.images, f.dynamic_noise / 255.0, f.seed, f.chunk)
                                       : eval::infer_chunked(P, batch.images, f.chunk);
  io::write_imgb(to_dataset(y, batch.labels, data.num_classes), f.out);
  write_sidecar(f.out, resolve(app));
  out << "wrote " << f.out << " (" << data.count << " images)\n";
  return 0;
}

struct EvalCmd {
  AttackFlags attack;
  std::string attacks = "ssp";
  std::string data = "synthetic:seed=2";
  std::int64_t count = 0;
  std::string classifier, extractor, defenses, out, model_id;
  double dynamic_noise = 0;
  std::int64_t chunk = 50;
};

void emit(const eval::EvalReport& report, const std::string& path, const Config& config, std::ostream& out) {
  if (path.empty()) {
    out << report.to_csv();
    return;
  }
  io::atomic_write_text(path, report.to_csv());
  write_sidecar(path, config);
  out << "wrote " << path << " (" << report.rows().size() << " rows)\n";
}

std::vector<attacks::AttackSpec> specs_for_list(const CLI::App* app, const AttackFlags& flags, const std::string& list) {
  std::vector<attacks::AttackSpec> specs;
  for (const auto& name : split(list, ',')) {
    if (name == "none") continue;
    specs.push_back(build_spec(app, flags, attacks::parse_method(name), false));
  }
  const auto any = [&](auto pred) { return std::any_of(specs.begin(), specs.end(), pred); };
  if ((given(app, "--tap") || given(app, "--metric")) && !any([](const auto& s) { return attacks::uses_tap(s.method); }))
    throw UsageError("--tap/--metric given but no listed attack uses features");
  if (given(app, "--momentum") && !any([](const auto& s) { return has_momentum(s.method); }))
    throw UsageError("--momentum given but no listed attack uses momentum");
  if (given(app, "--diversity") && !any([](const auto& s) { return s.method == attacks::Method::Dim; }))
    throw UsageError("--diversity given but dim is not listed");
  return specs;
}

int run_eval(const CLI::App* app, const EvalCmd& f, std::ostream& out) {
  const auto specs = specs_for_list(app, f.attack, f.attacks);
  Networks nets;
  const nets::Network* T = nets.load(f.classifier);
  const nets::Network* F = nets.load(f.extractor);
  for (const auto& s : specs) require(!attacks::uses_tap(s.method) || F, attacks::method_name(s.method) + " needs --extractor");
  const auto data = load_data(f.data, f.count);

  std::vector<eval::Defense> defenses{{"none", nullptr, 0, 0}};
  for (const auto& entry : split(f.defenses, ',')) {
    const auto eq = entry.find('=');
    require(eq != std::string::npos && eq > 0, "--defenses entries are name=checkpoint (or name=identity)");
    const auto name = entry.substr(0, eq), path = entry.substr(eq + 1);
    require(name != "none", "defense name 'none' is reserved");
    const nets::Network* p = nullptr;
    if (path == "identity") {
      nets.store.push_back(nets::identity_network(data.channels));
      p = &nets.store.back();
    } else {
      p = nets.load(path);
    }
    defenses.push_back({name, p, f.dynamic_noise / 255.0, f.attack.seed});
  }
  const auto model = f.model_id.empty() ? stem(f.classifier) : f.model_id;
  const auto report = eval::defense_table(*T, {F, T, nullptr}, defenses, specs, data.slice(0, data.count), model, f.chunk);
  emit(report, f.out, resolve(app), out);
  return 0;
}

struct CurveCmd {
  AttackFlags attack;
  std::string grid = "1,2,5,10,20,50,100";
  std::string data = "synthetic:seed=2";
  std::int64_t count = 0;
  std::string extractor, classifier, out, model_id;
  std::int64_t chunk = 50;
};

int run_curve(const CLI::App* app, const CurveCmd& f, std::ostream& out) {
  const auto m = attacks::parse_method(f.attack.method);
  require(m == attacks::Method::Ssp || m == attacks::Method::Ifgsm || m == attacks::Method::Mifgsm ||
              m == attacks::Method::Dim,
          "distortion-curve supports ssp, ifgsm, mifgsm and dim");
  require(!given(app, "--iters"), "--iters is implied by --grid");
  auto family = build_spec(app, f.attack, m, true);
  const auto grid = parse_ints(f.grid, "--grid");
  Networks nets;
  const nets::Network* F = nets.load(f.extractor);
  const nets::Network* T = f.classifier.empty() ? F : nets.load(f.classifier);
  const auto data = load_data(f.data, f.count);
  const auto batch = data.slice(0, data.count);
  const auto curve = eval::distortion_curve(*F, *T, family, batch, grid, f.chunk);
  eval::EvalReport report;
  const auto model = f.model_id.empty() ? stem(f.classifier.empty() ? f.extractor : f.classifier) : f.model_id;
  for (const auto& p : curve) {
    auto s = family;
    s.iterations = p.iterations;
    report.add({model, s.digest(), "none", "mean_distortion", p.mean_distortion, batch.size(), s.seed});
    report.add({model, s.digest(), "none", "fooling_rate", p.fooling_rate, batch.size(), s.seed});
  }
  emit(report, f.out, resolve(app), out);
  return 0;
}

struct SweepCmd {
  AttackFlags attack;
  std::string taps;
  std::string data = "synthetic:seed=2";
  std::int64_t count = 0;
  std::string extractor, classifier, out, model_id;
  std::int64_t chunk = 50;
};

int run_sweep(const CLI::App* app, const SweepCmd& f, std::ostream& out) {
  require(!given(app, "--tap"), "--tap is replaced by --taps in layer-sweep");
  const auto spec = build_spec(app, f.attack, attacks::Method::Ssp, true);
  Networks nets;
  const nets::Network* F = nets.load(f.extractor);
  const nets::Network* T = nets.load(f.classifier);
  const auto taps = f.taps.empty() ? F->tap_names() : split(f.taps, ',');
  for (const auto& t : taps) require(F->has_tap(t), "extractor has no tap '" + t + "'");
  const auto data = load_data(f.data, f.count);
  const auto batch = data.slice(0, data.count);
  const auto rows = eval::layer_sweep(*F, *T, batch, taps, spec, f.chunk);
  eval::EvalReport report;
  const auto model = f.model_id.empty() ? stem(f.classifier) : f.model_id;
  for (const auto& r : rows) {
    auto s = spec;
    s.tap = r.tap;
    report.add({model, s.digest(), "none", "fooling_rate", r.fooling_rate, batch.size(), s.seed});
    report.add({model, s.digest(), "none", "mean_distortion", r.mean_distortion, batch.size(), s.seed});
  }
  emit(report, f.out, resolve(app), out);
  return 0;
}

/// Splices `--config FILE` entries in front of the command-line flags, so
/// that later (command-line) values win under the take-last policy.
std::vector<std::string> expand_config(const std::vector<std::string>& args) {
  std::vector<std::string> rest;
  std::vector<std::string> from_file;
  for (std::size_t i = 0; i < args.size(); ++i) {
    std::string file;
    if (args[i] == "--config") {
      if (i + 1 >= args.size()) throw UsageError("--config needs a file");
      file = args[++i];
    } else if (args[i].rfind("--config=", 0) == 0) {
      file = args[i].substr(9);
    } else {
      rest.push_back(args[i]);
      continue;
    }
    for (const auto& [k, v] : io::read_key_values(file)) from_file.push_back("--" + k + "=" + v);
  }
  if (from_file.empty() || rest.empty() || rest[0].rfind("-", 0) == 0) return rest;
  std::vector<std::string> out{rest[0]};
  out.insert(out.end(), from_file.begin(), from_file.end());
  out.insert(out.end(), rest.begin() + 1, rest.end());
  return out;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Feature-space purification toolkit: train, attack, purify, evaluate."};
  app.name("nrp");
  app.require_subcommand(1, 1);
  app.option_defaults()->always_capture_default()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.footer("Any command also accepts --config FILE: key=value lines named after long options.\n"
             "Command-line flags override config-file values, which override defaults.");

  TrainNetFlags te, tcf;
  te.widths = "8,16,32,32";
  tcf.widths = "16,32,64";
  auto add_train_net = [&](CLI::App* sub, TrainNetFlags& f, bool extractor) {
    sub->add_option("--data", f.data, "dataset: synthetic[:k=v,...] | cifar10:<dir>[:train|test] | imgb:<file>");
    sub->add_option("--count", f.count, "use only the first N samples (0 = all)");
    sub->add_option("--steps", f.steps);
    sub->add_option("--batch", f.batch);
    sub->add_option("--lr", f.lr);
    sub->add_option("--seed", f.seed);
    sub->add_option("--widths", f.widths, "channel widths per block");
    if (extractor) sub->add_option("--convs", f.convs, "convolutions per block");
    sub->add_option("--out", f.out, "checkpoint path")->required();
  };
  auto* s_te = app.add_subcommand("train-extractor", "train the surrogate feature extractor");
  add_train_net(s_te, te, true);
  auto* s_tc = app.add_subcommand("train-classifier", "train the target classifier");
  add_train_net(s_tc, tcf, false);

  AttackCmd ac;
  auto* s_at = app.add_subcommand("attack", "craft adversarial images");
  add_attack_flags(s_at, ac.attack);
  s_at->add_option("--in", ac.in, "input dataset handle")->required();
  s_at->add_option("--out", ac.out, "output IMGB file")->required();
  s_at->add_option("--count", ac.count);
  s_at->add_option("--extractor", ac.extractor, "feature extractor checkpoint");
  s_at->add_option("--classifier", ac.classifier, "classifier checkpoint (label-based attacks)");
  s_at->add_option("--purifier", ac.purifier, "purifier checkpoint (bpda-*)");
  s_at->add_option("--chunk", ac.chunk);

  TrainNrpCmd tn;
  auto* s_tn = app.add_subcommand("train-nrp", "train the purifier against self-supervised perturbations");
  s_tn->add_option("--data", tn.data);
  s_tn->add_option("--count", tn.count);
  s_tn->add_option("--extractor", tn.extractor, "feature extractor checkpoint")->required();
  s_tn->add_option("--out", tn.out, "purifier checkpoint path")->required();
  s_tn->add_option("--critic-out", tn.critic_out);
  s_tn->add_option("--log", tn.log, "training log CSV");
  s_tn->add_option("--ablation", tn.ablation,
                   "full|no-feat|no-pixel|vanilla-gan|gaussian-purifier|fgsm-purifier");
  s_tn->add_option("--alpha", tn.alpha, "adversarial loss weight");
  s_tn->add_option("--gamma", tn.gamma, "pixel loss weight");
  s_tn->add_option("--lambda", tn.lambda, "feature loss weight");
  s_tn->add_option("--lr", tn.lr, "Adam learning rate (purifier and critic)");
  s_tn->add_option("--batch", tn.batch);
  s_tn->add_option("--crop", tn.crop);
  s_tn->add_option("--steps", tn.steps);
  s_tn->add_option("--seed", tn.seed);
  s_tn->add_option("--width", tn.width, "purifier feature width");
  s_tn->add_option("--growth", tn.growth, "dense-block growth");
  s_tn->add_option("--blocks", tn.blocks, "basic blocks");
  s_tn->add_option("--tap", tn.tap, "feature tap for the adversary and the feature loss");
  s_tn->add_option("--epsilons", tn.epsilons, "training budgets on the 0-255 scale");
  s_tn->add_option("--adversary-iters", tn.adversary_iters);
  s_tn->add_option("--adversary-step", tn.adversary_step, "0-255 scale (default max(1.6, eps/iters))");
  s_tn->add_option("--gaussian-sigma", tn.gaussian_sigma, "noise sigma / epsilon for gaussian-purifier");
  s_tn->add_option("--checkpoint-every", tn.checkpoint_every);
  s_tn->add_option("--print-every", tn.print_every);

  PurifyCmd pu;
  auto* s_pu = app.add_subcommand("purify", "run a purifier over a dataset");
  s_pu->add_option("--purifier", pu.purifier)->required();
  s_pu->add_option("--in", pu.in)->required();
  s_pu->add_option("--out", pu.out, "output IMGB file")->required();
  s_pu->add_option("--count", pu.count);
  s_pu->add_option("--dynamic-noise", pu.dynamic_noise, "uniform pre-noise magnitude, 0-255 scale");
  s_pu->add_option("--seed", pu.seed);
  s_pu->add_option("--chunk", pu.chunk);

  EvalCmd ev;
  auto* s_ev = app.add_subcommand("eval", "accuracy table over attacks x defenses (CSV)");
  add_attack_flags(s_ev, ev.attack, false);
  s_ev->add_option("--attacks", ev.attacks, "comma list of attack methods, or none");
  s_ev->add_option("--data", ev.data);
  s_ev->add_option("--count", ev.count);
  s_ev->add_option("--classifier", ev.classifier)->required();
  s_ev->add_option("--extractor", ev.extractor);
  s_ev->add_option("--defenses", ev.defenses, "comma list of name=checkpoint (checkpoint may be 'identity')");
  s_ev->add_option("--dynamic-noise", ev.dynamic_noise, "0-255 scale");
  s_ev->add_option("--out", ev.out, "CSV path (default: stdout)");
  s_ev->add_option("--model-id", ev.model_id);
  s_ev->add_option("--chunk", ev.chunk);

  CurveCmd cu;
  auto* s_cu = app.add_subcommand("distortion-curve", "feature distortion and fooling rate versus iterations");
  add_attack_flags(s_cu, cu.attack);
  s_cu->add_option("--grid", cu.grid, "iteration counts");
  s_cu->add_option("--data", cu.data);
  s_cu->add_option("--count", cu.count);
  s_cu->add_option("--extractor", cu.extractor)->required();
  s_cu->add_option("--classifier", cu.classifier, "scoring classifier (default: the extractor)");
  s_cu->add_option("--out", cu.out);
  s_cu->add_option("--model-id", cu.model_id);
  s_cu->add_option("--chunk", cu.chunk);

  SweepCmd sw;
  auto* s_sw = app.add_subcommand("layer-sweep", "SSP fooling rate per extractor tap");
  add_attack_flags(s_sw, sw.attack, false);
  s_sw->add_option("--taps", sw.taps, "comma list (default: every tap)");
  s_sw->add_option("--data", sw.data);
  s_sw->add_option("--count", sw.count);
  s_sw->add_option("--extractor", sw.extractor)->required();
  s_sw->add_option("--classifier", sw.classifier)->required();
  s_sw->add_option("--out", sw.out);
  s_sw->add_option("--model-id", sw.model_id);
  s_sw->add_option("--chunk", sw.chunk);

  try {
    auto expanded = expand_config(args);
    std::reverse(expanded.begin(), expanded.end());
    app.parse(expanded);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  } catch (const std::exception& e) {
    err << "nrp: " << e.what() << '\n';
    return 2;
  }

  const CLI::App* sub = app.get_subcommands().front();
  try {
    out << "# resolved config\n" << io::format_key_values(resolve(sub));
    if (sub == s_te) return train_network(sub, te, true, out);
    if (sub == s_tc) return train_network(sub, tcf, false, out);
    if (sub == s_at) return run_attack_cmd(sub, ac, out);
    if (sub == s_tn) return run_train_nrp(sub, tn, out);
    if (sub == s_pu) return run_purify(sub, pu, out);
    if (sub == s_ev) return run_eval(sub, ev, out);
    if (sub == s_cu) return run_curve(sub, cu, out);
    if (sub == s_sw) return run_sweep(sub, sw, out);
  } catch (const UsageError& e) {
    err << "nrp " << sub->get_name() << ": " << e.what() << '\n';
    return 2;
  } catch (const std::invalid_argument& e) {
    err << "nrp " << sub->get_name() << ": " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "nrp " << sub->get_name() << ": " << e.what() << '\n';
    return 1;
  }
  return 1;
}

}  // namespace nrp::cli
