#include "nrp/training.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

namespace nrp::training {
namespace {

std::vector<Tensor> grads_of(const Gradients& g, const std::vector<Var>& params) {
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(g.of(p));
  return out;
}

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

struct Snapshot {
  std::vector<nets::NamedTensor> purifier, critic;
};

}  // namespace

void LossWeights::validate() const {
  for (double w : {alpha, gamma, lambda})
    if (!(w >= 0.0) || !std::isfinite(w)) throw std::invalid_argument("loss weights must be finite and >= 0");
}

std::string ablation_name(Ablation a) {
  switch (a) {
    case Ablation::Full: return "full";
    case Ablation::NoFeat: return "no-feat";
    case Ablation::NoPixel: return "no-pixel";
    case Ablation::VanillaGan: return "vanilla-gan";
    case Ablation::GaussianPurifier: return "gaussian-purifier";
    case Ablation::FgsmPurifier: return "fgsm-purifier";
  }
  return "?";
}

Ablation parse_ablation(const std::string& name) {
  for (auto a : {Ablation::Full, Ablation::NoFeat, Ablation::NoPixel, Ablation::VanillaGan, Ablation::GaussianPurifier,
                 Ablation::FgsmPurifier})
    if (ablation_name(a) == name) return a;
  throw std::invalid_argument("unknown ablation '" + name + "'");
}

AdversaryMode adversary_for(Ablation a) {
  if (a == Ablation::GaussianPurifier) return AdversaryMode::Gaussian;
  if (a == Ablation::FgsmPurifier) return AdversaryMode::Fgsm;
  return AdversaryMode::Ssp;
}

LossWeights weights_for(Ablation a, LossWeights w) {
  if (a == Ablation::NoFeat) w.lambda = 0.0;
  if (a == Ablation::NoPixel) w.gamma = 0.0;
  return w;
}

void TrainConfig::validate() const {
  if (batch < 2) throw std::invalid_argument("train: batch must be >= 2 (critic batch norm)");
  if (crop < 8) throw std::invalid_argument("train: crop must be >= 8");
  if (steps < 0) throw std::invalid_argument("train: steps must be >= 0");
  if (!(lr_generator > 0) || !(lr_critic > 0)) throw std::invalid_argument("train: learning rates must be > 0");
  weights.validate();
  if (epsilons.empty()) throw std::invalid_argument("train: need at least one epsilon");
  for (double e : epsilons)
    if (!(e >= 0.0 && e <= 1.0)) throw std::invalid_argument("train: epsilon outside [0,1]");
  if (adversary_iterations < 0) throw std::invalid_argument("train: adversary iterations must be >= 0");
  if (!(gaussian_sigma_scale >= 0.0)) throw std::invalid_argument("train: gaussian sigma scale must be >= 0");
}

double TrainConfig::adversary_step_for(double epsilon) const {
  if (adversary_step) return *adversary_step;
  const double reach = adversary_iterations > 0 ? epsilon / adversary_iterations : epsilon;
  return std::max(1.6 / 255.0, reach);
}

std::string log_csv_header() { return "step,l_adv,l_img,l_feat,total,critic_loss"; }

std::string log_csv(std::span<const LogRecord> records) {
  std::ostringstream os;
  os << log_csv_header() << '\n';
  for (const auto& r : records)
    os << r.step << ',' << num(r.l_adv) << ',' << num(r.l_img) << ',' << num(r.l_feat) << ',' << num(r.total) << ','
       << num(r.critic_loss) << '\n';
  return os.str();
}

Var loss_feat(const nets::Network& extractor, const Tensor& x, const Var& x_purified, const std::string& tap,
              attacks::Metric metric) {
  if (x.shape() != x_purified.shape())
    throw ShapeError("loss_feat: shapes differ " + shape_str(x.shape()) + " vs " + shape_str(x_purified.shape()));
  Var clean = x_purified.tape()->constant(extractor.tap(x, tap));
  return attacks::feature_distortion(extractor, clean, x_purified, tap, metric);
}

Var loss_img(const Var& x_purified, const Var& x) {
  if (x.shape() != x_purified.shape()) throw ShapeError("loss_img: shapes differ");
  return ops::mean(ops::sqrt(ops::sum_rows(ops::square(ops::sub(x_purified, x)))));
}

Var loss_adv(const Var& real, const Var& fake, bool relativistic) {
  if (!fake.value().all_finite() || !real.value().all_finite()) throw NonFiniteError("loss_adv: non-finite critic score");
  Var rel = relativistic ? ops::sub(fake, ops::mean(real)) : fake;
  return ops::scale(ops::mean(ops::log_sigmoid(rel)), -1.0);
}

Var critic_loss(const Var& real, const Var& fake, bool relativistic) {
  if (!fake.value().all_finite() || !real.value().all_finite()) throw NonFiniteError("critic_loss: non-finite score");
  Var r = relativistic ? ops::sub(real, ops::mean(fake)) : real;
  Var f = relativistic ? ops::sub(fake, ops::mean(real)) : fake;
  Var a = ops::mean(ops::log_sigmoid(r));
  Var b = ops::mean(ops::log_sigmoid(ops::scale(f, -1.0)));
  return ops::scale(ops::add(a, b), -1.0);
}

double loss_total(const LossWeights& w, double l_adv, double l_img, double l_feat) {
  return w.alpha * l_adv + w.gamma * l_img + w.lambda * l_feat;
}

Var loss_total(const LossWeights& w, const Var& l_adv, const Var& l_img, const Var& l_feat) {
  // Terms with zero weight are left out of the graph entirely.
  Var total;
  auto add = [&](const Var& term, double weight) {
    if (weight == 0.0) return;
    Var t = ops::scale(term, weight);
    total = total.valid() ? ops::add(total, t) : t;
  };
  add(l_adv, w.alpha);
  add(l_img, w.gamma);
  add(l_feat, w.lambda);
  if (!total.valid()) total = ops::scale(l_feat, 0.0);
  return total;
}

Tensor make_training_adversary(AdversaryMode mode, const nets::Network& extractor, const Tensor& x,
                               std::span<const int> labels, const attacks::AttackSpec& spec,
                               double gaussian_sigma_scale) {
  switch (mode) {
    case AdversaryMode::Ssp: {
      auto s = spec;
      s.method = attacks::Method::Ssp;
      return attacks::ssp_attack(extractor, x, s);
    }
    case AdversaryMode::Fgsm: {
      auto s = spec;
      s.method = attacks::Method::Fgsm;
      s.iterations = 1;
      return attacks::fgsm(extractor, x, labels, s);
    }
    case AdversaryMode::Gaussian: {
      Rng rng(spec.seed);
      const double sigma = gaussian_sigma_scale * spec.epsilon;
      Tensor noise = rng.normal_tensor(x.shape(), 0.0, sigma, x.dtype());
      Tensor moved = visit_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto a = x.data<T>();
        auto n = noise.data<T>();
        std::vector<T> out(a.size());
        for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + n[i];
        return make_tensor(x.shape(), std::move(out));
      });
      return attacks::linf_project(moved, x, spec.epsilon);
    }
  }
  throw std::logic_error("unhandled adversary mode");
}

Tensor random_crop(const Tensor& images, int size, Rng& rng) {
  if (images.rank() != 4) throw ShapeError("random_crop expects [N,C,H,W]");
  const auto N = images.dim(0), C = images.dim(1), H = images.dim(2), W = images.dim(3);
  if (size > H || size > W) throw std::invalid_argument("crop larger than image");
  if (size == H && size == W) return images;
  return visit_dtype(images.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = images.data<T>();
    std::vector<T> out(static_cast<std::size_t>(N * C * size * size));
    for (std::int64_t n = 0; n < N; ++n) {
      const auto top = static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(H - size + 1)));
      const auto left = static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(W - size + 1)));
      for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t y = 0; y < size; ++y)
          for (std::int64_t x = 0; x < size; ++x)
            out[((n * C + c) * size + y) * size + x] = src[((n * C + c) * H + top + y) * W + left + x];
    }
    return make_tensor(Shape{N, C, size, size}, std::move(out));
  });
}

TrainResult train_nrp(const nets::Network& extractor, nets::Network& purifier, nets::Network& critic,
                      const io::Dataset& data, const TrainConfig& config, const TrainCallbacks& callbacks) {
  config.validate();
  if (data.count == 0) throw std::invalid_argument("train_nrp: empty dataset");
  if (!extractor.has_tap(config.tap)) throw std::invalid_argument("train_nrp: extractor has no tap '" + config.tap + "'");

  TrainResult result;
  result.weights = weights_for(config.ablation, config.weights);
  const LossWeights& w = result.weights;
  const bool relativistic = config.ablation != Ablation::VanillaGan;
  const AdversaryMode mode = adversary_for(config.ablation);

  Adam gen_opt({config.lr_generator});
  Adam critic_opt({config.lr_critic});
  io::BatchStream stream(data, config.batch, config.seed, /*drop_last=*/data.count >= config.batch);
  const Rng root(splitmix64(config.seed ^ 0x7261696eULL));

  for (int step = 1; step <= config.steps; ++step) {
    Snapshot good{purifier.state(), critic.state()};
    Rng rng = root.fork(static_cast<std::uint64_t>(step));

    io::ImageBatch batch = stream.next();
    if (batch.size() < 2) batch = stream.next();
    const Tensor x = random_crop(batch.images, config.crop, rng);
    const double eps = config.epsilons[rng.uniform_int(config.epsilons.size())];

    attacks::AttackSpec spec;
    spec.method = attacks::Method::Ssp;
    spec.epsilon = eps;
    spec.iterations = config.adversary_iterations;
    spec.step = config.adversary_step_for(eps);
    spec.tap = config.tap;
    spec.metric = config.metric;
    spec.seed = rng.next_u64();
    const Tensor x_adv = make_training_adversary(mode, extractor, x, batch.labels, spec, config.gaussian_sigma_scale);

    LogRecord rec;
    rec.step = step;
    Tensor purified;
    try {
      // Generator step: critic parameters are constants here.
      {
        Tape tape;
        auto pres = purifier.forward(tape, tape.constant(x_adv), {nets::Mode::Train, {}, true, true});
        Var xp = pres.output;
        purified = xp.value();
        Var xc = tape.constant(x);
        auto real = critic.forward(tape, xc, {nets::Mode::Train, {}, true, false}).output;
        auto fake = critic.forward(tape, xp, {nets::Mode::Train, {}, true, false}).output;
        Var l_adv = loss_adv(real, fake, relativistic);
        Var l_img = loss_img(xp, xc);
        Var l_feat = loss_feat(extractor, x, xp, config.tap, attacks::Metric::Mae);
        Var total = loss_total(w, l_adv, l_img, l_feat);
        rec.l_adv = l_adv.value().item();
        rec.l_img = l_img.value().item();
        rec.l_feat = l_feat.value().item();
        rec.total = total.value().item();
        if (!std::isfinite(rec.total) || !std::isfinite(rec.l_adv) || !std::isfinite(rec.l_img) ||
            !std::isfinite(rec.l_feat))
          throw NonFiniteError("non-finite generator loss");
        auto grads = grads_of(tape.backward(total), pres.params);
        for (const auto& g : grads)
          if (!g.all_finite()) throw NonFiniteError("non-finite purifier gradient");
        auto params = purifier.parameter_values();
        gen_opt.step(params, grads);
        purifier.set_parameter_values(std::move(params));
      }
      // Critic step on the detached purified batch.
      {
        Tape tape;
        auto rres = critic.forward(tape, tape.constant(x), {nets::Mode::Train, {}, true, true});
        auto fres = critic.forward(tape, tape.constant(purified), {nets::Mode::Train, {}, true, true});
        Var loss = critic_loss(rres.output, fres.output, relativistic);
        rec.critic_loss = loss.value().item();
        if (!std::isfinite(rec.critic_loss)) throw NonFiniteError("non-finite critic loss");
        const auto g = tape.backward(loss);
        std::vector<Tensor> grads;
        for (std::size_t i = 0; i < rres.params.size(); ++i) grads.push_back(add_tensors(g.of(rres.params[i]), g.of(fres.params[i])));
        for (const auto& t : grads)
          if (!t.all_finite()) throw NonFiniteError("non-finite critic gradient");
        auto params = critic.parameter_values();
        critic_opt.step(params, grads);
        critic.set_parameter_values(std::move(params));
        critic.apply_stat_updates(rres);
      }
    } catch (const NonFiniteError& e) {
      purifier.load_state(good.purifier);
      critic.load_state(good.critic);
      throw TrainingError("step " + std::to_string(step) + ": " + e.what() + "; restored state of step " +
                          std::to_string(step - 1));
    }

    result.log.push_back(rec);
    if (callbacks.on_step) callbacks.on_step(rec);
    if (callbacks.on_checkpoint && callbacks.checkpoint_every > 0 && step % callbacks.checkpoint_every == 0 &&
        step != config.steps)
      callbacks.on_checkpoint(step, purifier, critic);
  }
  if (callbacks.on_checkpoint) callbacks.on_checkpoint(config.steps, purifier, critic);
  return result;
}

std::vector<double> train_classifier(nets::Network& net, const io::Dataset& data, const ClassifierTrainConfig& config,
                                     const std::function<void(int, double)>& on_step) {
  if (config.batch < 1 || config.steps < 0 || !(config.lr > 0)) throw std::invalid_argument("bad classifier config");
  Adam opt({config.lr});
  io::BatchStream stream(data, config.batch, config.seed, data.count >= config.batch);
  std::vector<double> losses;
  for (int step = 1; step <= config.steps; ++step) {
    auto batch = stream.next();
    Tape tape;
    auto res = net.forward(tape, tape.constant(batch.images), {nets::Mode::Train, {}, true, true});
    Var loss = ops::cross_entropy(res.output, batch.labels);
    const double l = loss.value().item();
    if (!std::isfinite(l)) throw TrainingError("classifier training diverged at step " + std::to_string(step));
    auto grads = grads_of(tape.backward(loss), res.params);
    auto params = net.parameter_values();
    opt.step(params, grads);
    net.set_parameter_values(std::move(params));
    net.apply_stat_updates(res);
    losses.push_back(l);
    if (on_step) on_step(step, l);
  }
  return losses;
}

}  // namespace nrp::training
