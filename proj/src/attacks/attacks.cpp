#include "nrp/attacks.hpp"

#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

namespace nrp::attacks {
namespace {

const std::map<std::string, Method>& method_table() {
  static const std::map<std::string, Method> table{
      {"fgsm", Method::Fgsm},   {"rfgsm", Method::Rfgsm}, {"ifgsm", Method::Ifgsm},        {"mifgsm", Method::Mifgsm},
      {"dim", Method::Dim},     {"ssp", Method::Ssp},     {"bpda-ssp", Method::BpdaSsp}, {"bpda-ifgsm", Method::BpdaIfgsm}};
  return table;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void check_batch(const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("attack input must be [N,C,H,W], got " + shape_str(x.shape()));
}

void check_labels(const Tensor& x, std::span<const int> labels) {
  if (static_cast<std::int64_t>(labels.size()) != x.dim(0))
    throw std::invalid_argument("attack: " + std::to_string(labels.size()) + " labels for a batch of " +
                                std::to_string(x.dim(0)));
}

// x_adv + step * sign(direction), projected.
Tensor signed_step(const Tensor& x_adv, const Tensor& direction, const Tensor& x, double step, double epsilon) {
  return visit_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto a = x_adv.data<T>();
    auto d = direction.data<T>();
    std::vector<T> out(a.size());
    const T s = static_cast<T>(step);
    for (std::size_t i = 0; i < a.size(); ++i) {
      const T sg = d[i] > T(0) ? T(1) : (d[i] < T(0) ? T(-1) : T(0));
      out[i] = a[i] + s * sg;
    }
    return linf_project(make_tensor(x.shape(), std::move(out)), x, epsilon);
  });
}

// acc <- mu * acc + g / ||g||_1, per image. Zero-gradient images contribute nothing.
Tensor accumulate_momentum(const Tensor& acc, const Tensor& g, double mu) {
  return visit_dtype(g.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto a = acc.data<T>();
    auto gd = g.data<T>();
    const std::int64_t n = g.dim(0);
    const std::int64_t per = g.numel() / n;
    std::vector<T> out(gd.size());
    const T m = static_cast<T>(mu);
    for (std::int64_t i = 0; i < n; ++i) {
      T norm = 0;
      for (std::int64_t j = 0; j < per; ++j) norm += std::abs(gd[i * per + j]);
      for (std::int64_t j = 0; j < per; ++j) {
        const auto k = i * per + j;
        out[k] = m * a[k] + (norm > T(0) ? gd[k] / norm : T(0));
      }
    }
    return make_tensor(g.shape(), std::move(out));
  });
}

Objective cross_entropy_objective(const nets::Network& classifier, std::span<const int> labels) {
  return [&classifier, labels](const Var& input) {
    Tape& tape = *input.tape();
    auto res = classifier.forward(tape, input, {});
    return ops::cross_entropy(res.output, labels);
  };
}

Objective feature_objective(const nets::Network& extractor, const Tensor& clean, const AttackSpec& spec) {
  return [&extractor, clean, tap = spec.tap, metric = spec.metric](const Var& input) {
    Var c = input.tape()->constant(clean);
    return feature_distortion(extractor, c, input, tap, metric);
  };
}

const nets::Network& need(const nets::Network* net, const char* what, Method m) {
  if (!net) throw std::invalid_argument(method_name(m) + " needs a " + what);
  return *net;
}

}  // namespace

std::string method_name(Method method) {
  for (const auto& [name, m] : method_table())
    if (m == method) return name;
  return "?";
}

Method parse_method(const std::string& name) {
  auto it = method_table().find(name);
  if (it == method_table().end()) throw std::invalid_argument("unknown attack method '" + name + "'");
  return it->second;
}

std::string metric_name(Metric metric) {
  switch (metric) {
    case Metric::Mae: return "mae";
    case Metric::L2: return "l2";
    case Metric::Cosine: return "cosine";
  }
  return "?";
}

Metric parse_metric(const std::string& name) {
  if (name == "mae") return Metric::Mae;
  if (name == "l2") return Metric::L2;
  if (name == "cosine") return Metric::Cosine;
  throw std::invalid_argument("unknown distance metric '" + name + "'");
}

bool uses_labels(Method m) { return m != Method::Ssp && m != Method::BpdaSsp; }
bool uses_tap(Method m) { return m == Method::Ssp || m == Method::BpdaSsp; }

AttackSpec AttackSpec::defaults(Method method) {
  AttackSpec s;
  s.method = method;
  s.epsilon = 16.0 / 255.0;
  switch (method) {
    case Method::Fgsm:
    case Method::Rfgsm:
      s.step = s.epsilon;
      s.iterations = 1;
      break;
    case Method::Ifgsm:
    case Method::Mifgsm:
    case Method::Dim:
    case Method::BpdaIfgsm:
      s.step = 1.6 / 255.0;
      s.iterations = 10;
      break;
    case Method::Ssp:
    case Method::BpdaSsp:
      s.step = 1.6 / 255.0;
      s.iterations = 100;
      break;
  }
  return s;
}

void AttackSpec::validate() const {
  auto bad = [](const std::string& m) { throw std::invalid_argument("attack spec: " + m); };
  if (!std::isfinite(epsilon) || epsilon < 0.0 || epsilon > 1.0) bad("epsilon must lie in [0,1]");
  if (!std::isfinite(step) || step < 0.0) bad("step must be >= 0");
  if (iterations < 0) bad("iterations must be >= 0");
  if (!std::isfinite(momentum) || momentum < 0.0) bad("momentum must be >= 0");
  if (!(diversity_prob >= 0.0 && diversity_prob <= 1.0)) bad("diversity probability must lie in [0,1]");
  if (uses_tap(method) && tap.empty()) bad("a tap layer is required");
  if (init_noise && !(*init_noise >= 0.0 && *init_noise <= epsilon)) bad("init noise must lie in [0, epsilon]");
  if (random_step && !(*random_step >= 0.0 && *random_step <= epsilon)) bad("random step must lie in [0, epsilon]");
  if ((method == Method::Fgsm || method == Method::Rfgsm) && iterations > 1) bad("single-step methods take one iteration");
}

std::string AttackSpec::digest() const {
  std::ostringstream os;
  os << method_name(method) << ";eps=" << fmt(epsilon) << ";step=" << fmt(step) << ";iters=" << iterations
     << ";mu=" << fmt(momentum) << ";p=" << fmt(diversity_prob) << ";tap=" << tap << ";metric=" << metric_name(metric);
  if (init_noise) os << ";init=" << fmt(*init_noise);
  if (random_step) os << ";rstep=" << fmt(*random_step);
  os << ";seed=" << seed;
  return os.str();
}

AttackSpec AttackSpec::from_digest(const std::string& digest) {
  std::stringstream ss(digest);
  std::string item;
  if (!std::getline(ss, item, ';')) throw std::invalid_argument("empty attack digest");
  AttackSpec s = defaults(parse_method(item));
  s.init_noise.reset();
  s.random_step.reset();
  while (std::getline(ss, item, ';')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("bad attack digest field '" + item + "'");
    const std::string key = item.substr(0, eq), val = item.substr(eq + 1);
    if (key == "eps") s.epsilon = std::stod(val);
    else if (key == "step") s.step = std::stod(val);
    else if (key == "iters") s.iterations = std::stoi(val);
    else if (key == "mu") s.momentum = std::stod(val);
    else if (key == "p") s.diversity_prob = std::stod(val);
    else if (key == "tap") s.tap = val;
    else if (key == "metric") s.metric = parse_metric(val);
    else if (key == "init") s.init_noise = std::stod(val);
    else if (key == "rstep") s.random_step = std::stod(val);
    else if (key == "seed") s.seed = std::stoull(val);
    else throw std::invalid_argument("unknown attack digest key '" + key + "'");
  }
  return s;
}

Tensor linf_project(const Tensor& x_adv, const Tensor& x, double epsilon) {
  if (x_adv.shape() != x.shape() || x_adv.dtype() != x.dtype())
    throw ShapeError("linf_project: shape/dtype mismatch " + shape_str(x_adv.shape()) + " vs " + shape_str(x.shape()));
  if (!(epsilon >= 0.0)) throw std::invalid_argument("linf_project: epsilon must be >= 0");
  return visit_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto a = x_adv.data<T>();
    auto c = x.data<T>();
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      const T lo = static_cast<T>(c[i] - epsilon);
      const T hi = static_cast<T>(c[i] + epsilon);
      T v = a[i] < lo ? lo : (a[i] > hi ? hi : a[i]);
      if (v < T(0)) v = T(0);
      if (v > T(1)) v = T(1);
      out[i] = v;
    }
    return make_tensor(x.shape(), std::move(out));
  });
}

Var distance(const Var& a, const Var& b, Metric metric) {
  if (a.shape() != b.shape()) throw ShapeError("distance: shapes differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  switch (metric) {
    case Metric::Mae:
      return ops::mean(ops::abs(ops::sub(a, b)));
    case Metric::L2:
      return ops::mean(ops::sqrt(ops::sum_rows(ops::square(ops::sub(a, b)))));
    case Metric::Cosine: {
      Var dot = ops::sum_rows(ops::mul(a, b));
      Var na = ops::sqrt(ops::sum_rows(ops::square(a)));
      Var nb = ops::sqrt(ops::sum_rows(ops::square(b)));
      Var cos = ops::div(dot, ops::add_scalar(ops::mul(na, nb), 1e-12));
      return ops::add_scalar(ops::scale(ops::mean(cos), -1.0), 1.0);
    }
  }
  throw std::logic_error("distance: unhandled metric");
}

Var feature_distortion(const nets::Network& extractor, const Var& clean_features, const Var& x_adv,
                       const std::string& tap, Metric metric) {
  nets::ForwardOptions opts;
  opts.taps = {tap};
  opts.want_output = false;
  auto res = extractor.forward(*x_adv.tape(), x_adv, opts);
  return distance(clean_features, res.taps.at(tap), metric);
}

double feature_distortion(const nets::Network& extractor, const Tensor& x, const Tensor& x_adv,
                          const std::string& tap, Metric metric) {
  Tape tape;
  Var clean = tape.constant(extractor.tap(x, tap));
  return feature_distortion(extractor, clean, tape.constant(x_adv), tap, metric).value().item();
}

Var input_diversity(const Var& x, double p, Rng& rng) {
  if (x.shape().size() != 4) throw ShapeError("input diversity expects [N,C,H,W]");
  const bool apply = rng.bernoulli(p);
  if (!apply) return x;
  const auto H = static_cast<int>(x.shape()[2]);
  const auto W = static_cast<int>(x.shape()[3]);
  const int min_h = static_cast<int>(std::ceil(0.85 * H));
  const int min_w = static_cast<int>(std::ceil(0.85 * W));
  const int h = min_h + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(H - min_h + 1)));
  const int w = min_w + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(W - min_w + 1)));
  const int top = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(H - h + 1)));
  const int left = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(W - w + 1)));
  return ops::resize_pad(x, h, w, top, left);
}

Tensor input_diversity_transform(const Tensor& x, double p, std::uint64_t seed) {
  Tape tape;
  Rng rng(seed);
  return input_diversity(tape.constant(x), p, rng).value();
}

Tensor sign_ascent(const Objective& objective, const Tensor& x, const Tensor& start, const AscentOptions& o,
                   AttackTrace* trace, const IterationObserver& observer) {
  check_batch(x);
  Rng diversity_rng(splitmix64(o.seed ^ 0xd1b54a32d192ed03ULL));
  Tensor x_adv = linf_project(start, x, o.epsilon);
  Tensor acc = Tensor::zeros(x.shape(), x.dtype());
  if (observer) observer(0, x_adv);
  for (int it = 0; it < o.iterations; ++it) {
    Tape tape;
    Var xv = tape.leaf(x_adv, true);
    Var in = xv;
    if (o.purifier) in = ops::straight_through(xv, o.purifier->infer(x_adv));
    if (o.diversity_prob >= 0.0) in = input_diversity(in, o.diversity_prob, diversity_rng);
    Var loss = objective(in);
    if (!loss.value().all_finite())
      throw AttackError("non-finite attack objective at iteration " + std::to_string(it));
    Tensor g = tape.backward(loss).of(xv);
    if (!g.all_finite()) throw AttackError("non-finite input gradient at iteration " + std::to_string(it));
    Tensor direction = g;
    if (o.use_momentum) {
      acc = accumulate_momentum(acc, g, o.momentum);
      direction = acc;
    }
    x_adv = signed_step(x_adv, direction, x, o.step, o.epsilon);
    if (trace) {
      trace->gradients.push_back(g);
      if (o.use_momentum) trace->momentum.push_back(acc);
      trace->iterates.push_back(x_adv);
    }
    if (observer) observer(it + 1, x_adv);
  }
  return x_adv;
}

Tensor ssp_attack(const nets::Network& extractor, const Tensor& x, const AttackSpec& spec, AttackTrace* trace,
                  const IterationObserver& observer) {
  spec.validate();
  check_batch(x);
  if (!extractor.has_tap(spec.tap)) throw std::invalid_argument("feature extractor has no tap '" + spec.tap + "'");
  Rng rng(spec.seed);
  const double r = spec.init_noise_or_default();
  Tensor noise = rng.uniform_tensor(x.shape(), -r, r, x.dtype());
  Tensor start = visit_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto a = x.data<T>();
    auto n = noise.data<T>();
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + n[i];
    return make_tensor(x.shape(), std::move(out));
  });
  AscentOptions o;
  o.epsilon = spec.epsilon;
  o.step = spec.step;
  o.iterations = spec.iterations;
  o.seed = spec.seed;
  const Tensor clean = extractor.tap(x, spec.tap);
  return sign_ascent(feature_objective(extractor, clean, spec), x, start, o, trace, observer);
}

Tensor fgsm(const nets::Network& classifier, const Tensor& x, std::span<const int> labels, const AttackSpec& spec,
            AttackTrace* trace) {
  spec.validate();
  check_batch(x);
  check_labels(x, labels);
  AscentOptions o;
  o.epsilon = spec.epsilon;
  o.step = spec.epsilon;
  o.iterations = 1;
  return sign_ascent(cross_entropy_objective(classifier, labels), x, x, o, trace);
}

Tensor rfgsm(const nets::Network& classifier, const Tensor& x, std::span<const int> labels, const AttackSpec& spec,
             AttackTrace* trace) {
  spec.validate();
  check_batch(x);
  check_labels(x, labels);
  const double alpha = spec.random_step_or_default();
  Rng rng(spec.seed);
  Tensor noise = rng.normal_tensor(x.shape(), 0.0, 1.0, x.dtype());
  Tensor start = signed_step(x, noise, x, alpha, spec.epsilon);
  AscentOptions o;
  o.epsilon = spec.epsilon;
  o.step = spec.epsilon - alpha;
  o.iterations = 1;
  return sign_ascent(cross_entropy_objective(classifier, labels), x, start, o, trace);
}

Tensor ifgsm(const nets::Network& classifier, const Tensor& x, std::span<const int> labels, const AttackSpec& spec,
             AttackTrace* trace, const IterationObserver& observer) {
  spec.validate();
  check_batch(x);
  check_labels(x, labels);
  AscentOptions o;
  o.epsilon = spec.epsilon;
  o.step = spec.step;
  o.iterations = spec.iterations;
  return sign_ascent(cross_entropy_objective(classifier, labels), x, x, o, trace, observer);
}

Tensor mifgsm(const nets::Network& classifier, const Tensor& x, std::span<const int> labels, const AttackSpec& spec,
              AttackTrace* trace, const IterationObserver& observer) {
  spec.validate();
  check_batch(x);
  check_labels(x, labels);
  AscentOptions o;
  o.epsilon = spec.epsilon;
  o.step = spec.step;
  o.iterations = spec.iterations;
  o.use_momentum = true;
  o.momentum = spec.momentum;
  return sign_ascent(cross_entropy_objective(classifier, labels), x, x, o, trace, observer);
}

Tensor dim(const nets::Network& classifier, const Tensor& x, std::span<const int> labels, const AttackSpec& spec,
           AttackTrace* trace, const IterationObserver& observer) {
  spec.validate();
  check_batch(x);
  check_labels(x, labels);
  AscentOptions o;
  o.epsilon = spec.epsilon;
  o.step = spec.step;
  o.iterations = spec.iterations;
  o.use_momentum = true;
  o.momentum = spec.momentum;
  o.diversity_prob = spec.diversity_prob;
  o.seed = spec.seed;
  return sign_ascent(cross_entropy_objective(classifier, labels), x, x, o, trace, observer);
}

Tensor bpda_attack(const nets::Network& purifier, const AttackContext& ctx, const Tensor& x,
                   std::span<const int> labels, const AttackSpec& spec, AttackTrace* trace) {
  spec.validate();
  check_batch(x);
  AscentOptions o;
  o.epsilon = spec.epsilon;
  o.step = spec.step;
  o.iterations = spec.iterations;
  o.purifier = &purifier;
  o.seed = spec.seed;
  if (spec.method == Method::BpdaSsp) {
    const auto& f = need(ctx.feature_extractor, "feature extractor", spec.method);
    if (!f.has_tap(spec.tap)) throw std::invalid_argument("feature extractor has no tap '" + spec.tap + "'");
    Rng rng(spec.seed);
    const double r = spec.init_noise_or_default();
    Tensor noise = rng.uniform_tensor(x.shape(), -r, r, x.dtype());
    Tensor start = visit_dtype(x.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto a = x.data<T>();
      auto n = noise.data<T>();
      std::vector<T> out(a.size());
      for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + n[i];
      return make_tensor(x.shape(), std::move(out));
    });
    const Tensor clean = f.tap(x, spec.tap);
    return sign_ascent(feature_objective(f, clean, spec), x, start, o, trace);
  }
  if (spec.method == Method::BpdaIfgsm) {
    const auto& c = need(ctx.classifier, "classifier", spec.method);
    check_labels(x, labels);
    return sign_ascent(cross_entropy_objective(c, labels), x, x, o, trace);
  }
  throw std::invalid_argument("bpda_attack: method must be bpda-ssp or bpda-ifgsm");
}

Tensor run_attack(const AttackContext& ctx, const Tensor& x, std::span<const int> labels, const AttackSpec& spec,
                  AttackTrace* trace, const IterationObserver& observer) {
  switch (spec.method) {
    case Method::Fgsm: return fgsm(need(ctx.classifier, "classifier", spec.method), x, labels, spec, trace);
    case Method::Rfgsm: return rfgsm(need(ctx.classifier, "classifier", spec.method), x, labels, spec, trace);
    case Method::Ifgsm:
      return ifgsm(need(ctx.classifier, "classifier", spec.method), x, labels, spec, trace, observer);
    case Method::Mifgsm:
      return mifgsm(need(ctx.classifier, "classifier", spec.method), x, labels, spec, trace, observer);
    case Method::Dim: return dim(need(ctx.classifier, "classifier", spec.method), x, labels, spec, trace, observer);
    case Method::Ssp:
      return ssp_attack(need(ctx.feature_extractor, "feature extractor", spec.method), x, spec, trace, observer);
    case Method::BpdaSsp:
    case Method::BpdaIfgsm:
      return bpda_attack(need(ctx.purifier, "purifier", spec.method), ctx, x, labels, spec, trace);
  }
  throw std::logic_error("run_attack: unhandled method");
}

}  // namespace nrp::attacks
