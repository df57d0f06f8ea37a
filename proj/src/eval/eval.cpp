#include "nrp/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>
#include <tuple>

namespace nrp::eval {
namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::uint64_t chunk_seed(std::uint64_t seed, std::int64_t chunk) {
  return splitmix64(seed + static_cast<std::uint64_t>(chunk));
}

std::vector<int> slice_labels(std::span<const int> labels, std::int64_t begin, std::int64_t n) {
  return {labels.begin() + begin, labels.begin() + begin + n};
}

}  // namespace

Tensor slice_rows(const Tensor& t, std::int64_t begin, std::int64_t count) {
  if (t.rank() < 1 || begin < 0 || count < 0 || begin + count > t.dim(0)) throw ShapeError("slice_rows out of range");
  const std::int64_t per = t.dim(0) ? t.numel() / t.dim(0) : 0;
  Shape shape = t.shape();
  shape[0] = count;
  return visit_dtype(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto d = t.data<T>();
    std::vector<T> out(d.begin() + begin * per, d.begin() + (begin + count) * per);
    return make_tensor(shape, std::move(out));
  });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_rows of nothing");
  Shape shape = parts[0].shape();
  std::int64_t rows = 0;
  for (const auto& p : parts) {
    Shape a = p.shape(), b = shape;
    a[0] = b[0] = 0;
    if (a != b || p.dtype() != parts[0].dtype()) throw ShapeError("concat_rows: incompatible parts");
    rows += p.dim(0);
  }
  shape[0] = rows;
  return visit_dtype(parts[0].dtype(), [&](auto tag) {
    using T = decltype(tag);
    std::vector<T> out;
    out.reserve(static_cast<std::size_t>(numel_of(shape)));
    for (const auto& p : parts) {
      auto d = p.data<T>();
      out.insert(out.end(), d.begin(), d.end());
    }
    return make_tensor(shape, std::move(out));
  });
}

Tensor infer_chunked(const nets::Network& net, const Tensor& x, std::int64_t chunk) {
  if (chunk < 1) throw std::invalid_argument("chunk must be >= 1");
  const auto n = x.dim(0);
  if (n <= chunk) return net.infer(x);
  std::vector<Tensor> parts;
  for (std::int64_t b = 0; b < n; b += chunk) parts.push_back(net.infer(slice_rows(x, b, std::min(chunk, n - b))));
  return concat_rows(parts);
}

std::vector<int> argmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw ShapeError("argmax_rows expects [N,K]");
  const auto N = logits.dim(0), K = logits.dim(1);
  const auto v = logits.to_vector();
  std::vector<int> out(static_cast<std::size_t>(N));
  for (std::int64_t i = 0; i < N; ++i) {
    std::int64_t best = 0;
    for (std::int64_t k = 1; k < K; ++k)
      if (v[i * K + k] > v[i * K + best]) best = k;
    out[i] = static_cast<int>(best);
  }
  return out;
}

std::vector<bool> top_k_hits(const Tensor& logits, std::span<const int> labels, int k) {
  if (logits.rank() != 2) throw ShapeError("top_k_hits expects [N,K]");
  if (k < 1) throw std::invalid_argument("k must be >= 1");
  const auto N = logits.dim(0), K = logits.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != N) throw ShapeError("top_k_hits: label count mismatch");
  const auto v = logits.to_vector();
  std::vector<bool> hits(static_cast<std::size_t>(N));
  for (std::int64_t i = 0; i < N; ++i) {
    const int y = labels[i];
    if (y < 0 || y >= K) throw std::out_of_range("label out of range");
    // Rank of the label: classes strictly ahead of it (higher score, or equal score at a lower index).
    std::int64_t ahead = 0;
    const double s = v[i * K + y];
    for (std::int64_t c = 0; c < K; ++c) {
      const double t = v[i * K + c];
      if (t > s || (t == s && c < y)) ++ahead;
    }
    hits[i] = ahead < k;
  }
  return hits;
}

double top_k_accuracy(const Tensor& logits, std::span<const int> labels, int k) {
  const auto hits = top_k_hits(logits, labels, k);
  if (hits.empty()) throw std::invalid_argument("accuracy of an empty set");
  return static_cast<double>(std::count(hits.begin(), hits.end(), true)) / static_cast<double>(hits.size());
}

double top_k_accuracy(const nets::Network& classifier, const io::ImageBatch& data, int k, std::int64_t chunk) {
  return top_k_accuracy(infer_chunked(classifier, data.images, chunk), data.labels, k);
}

double fooling_rate(const nets::Network& classifier, const Tensor& clean, const Tensor& adv, std::int64_t chunk) {
  if (clean.shape() != adv.shape()) throw ShapeError("fooling_rate: shapes differ");
  const auto a = argmax_rows(infer_chunked(classifier, clean, chunk));
  const auto b = argmax_rows(infer_chunked(classifier, adv, chunk));
  if (a.empty()) throw std::invalid_argument("fooling rate of an empty set");
  std::int64_t flipped = 0;
  for (std::size_t i = 0; i < a.size(); ++i) flipped += a[i] != b[i];
  return static_cast<double>(flipped) / static_cast<double>(a.size());
}

std::vector<double> per_sample_distortion(const nets::Network& extractor, const Tensor& x, const Tensor& x_adv,
                                          const std::string& tap, attacks::Metric metric) {
  if (x.shape() != x_adv.shape()) throw ShapeError("per_sample_distortion: shapes differ");
  const Tensor fx = extractor.tap(x, tap);
  const Tensor fa = extractor.tap(x_adv, tap);
  std::vector<double> out;
  for (std::int64_t i = 0; i < x.dim(0); ++i) {
    Tape tape;
    out.push_back(
        attacks::distance(tape.constant(slice_rows(fx, i, 1)), tape.constant(slice_rows(fa, i, 1)), metric).value().item());
  }
  return out;
}

Tensor attack_set(const attacks::AttackContext& ctx, const io::ImageBatch& data, const attacks::AttackSpec& spec,
                  std::int64_t chunk) {
  if (chunk < 1) throw std::invalid_argument("chunk must be >= 1");
  const auto n = data.size();
  std::vector<Tensor> parts;
  for (std::int64_t b = 0, i = 0; b < n; b += chunk, ++i) {
    const auto m = std::min(chunk, n - b);
    auto s = spec;
    s.seed = chunk_seed(spec.seed, i);
    const auto labels = slice_labels(data.labels, b, m);
    parts.push_back(attacks::run_attack(ctx, slice_rows(data.images, b, m), labels, s));
  }
  return concat_rows(parts);
}

Tensor dynamic_defense_purify(const nets::Network& purifier, const Tensor& x, double magnitude, std::uint64_t seed,
                              std::int64_t chunk) {
  if (!(magnitude >= 0.0)) throw std::invalid_argument("dynamic noise magnitude must be >= 0");
  Rng rng(seed);
  const Tensor noise = rng.uniform_tensor(x.shape(), -magnitude, magnitude, x.dtype());
  const Tensor moved = visit_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto a = x.data<T>();
    auto r = noise.data<T>();
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = std::clamp<T>(a[i] + r[i], T(0), T(1));
    return make_tensor(x.shape(), std::move(out));
  });
  return infer_chunked(purifier, moved, chunk);
}

Tensor apply_defense(const Defense& d, const Tensor& x, std::int64_t chunk) {
  if (!d.purifier) return x;
  if (d.dynamic_noise > 0.0) return dynamic_defense_purify(*d.purifier, x, d.dynamic_noise, d.seed, chunk);
  return infer_chunked(*d.purifier, x, chunk);
}

bool is_rate_metric(const std::string& m) {
  return m == "accuracy" || m.starts_with("top") || m == "fooling_rate";
}

void EvalReport::add(ReportRow row) {
  if (row.n <= 0) throw std::invalid_argument("report row needs a positive sample count");
  if (is_rate_metric(row.metric) && !(row.value >= 0.0 && row.value <= 1.0))
    throw std::invalid_argument("rate metric '" + row.metric + "' outside [0,1]");
  for (const auto* field : {&row.model, &row.attack, &row.defense, &row.metric})
    if (field->find_first_of(",\n") != std::string::npos)
      throw std::invalid_argument("report field contains a comma or newline: " + *field);
  if (std::any_of(rows_.begin(), rows_.end(), [&](const auto& r) {
        return r.model == row.model && r.attack == row.attack && r.defense == row.defense && r.metric == row.metric;
      }))
    throw std::invalid_argument("duplicate report row " + row.attack + "/" + row.defense + "/" + row.metric);
  rows_.push_back(std::move(row));
}

const ReportRow* EvalReport::find(const std::string& attack, const std::string& defense, const std::string& metric) const {
  for (const auto& r : rows_)
    if (r.attack == attack && r.defense == defense && r.metric == metric) return &r;
  return nullptr;
}

std::string EvalReport::csv_header() { return "model,attack,defense,metric,value,n,seed"; }

std::string EvalReport::to_csv() const {
  std::ostringstream os;
  os << csv_header() << '\n';
  for (const auto& r : rows_)
    os << r.model << ',' << r.attack << ',' << r.defense << ',' << r.metric << ',' << num(r.value) << ',' << r.n << ','
       << r.seed << '\n';
  return os.str();
}

EvalReport defense_table(const nets::Network& classifier, const attacks::AttackContext& ctx,
                         std::span<const Defense> defenses, std::span<const attacks::AttackSpec> specs,
                         const io::ImageBatch& data, const std::string& model_id, std::int64_t chunk) {
  if (defenses.empty()) throw std::invalid_argument("defense_table needs at least one defense");
  EvalReport report;
  const auto n = data.size();
  auto score = [&](const std::string& attack, const Defense& d, const Tensor& x, std::uint64_t seed) {
    const double acc = top_k_accuracy(infer_chunked(classifier, apply_defense(d, x, chunk), chunk), data.labels, 1);
    report.add({model_id, attack, d.id, "accuracy", acc, n, seed});
  };
  for (const auto& d : defenses) score("none", d, data.images, 0);
  for (const auto& spec : specs) {
    const bool bpda = spec.method == attacks::Method::BpdaSsp || spec.method == attacks::Method::BpdaIfgsm;
    Tensor shared;
    if (!bpda) shared = attack_set(ctx, data, spec, chunk);
    for (const auto& d : defenses) {
      if (!bpda) {
        score(spec.digest(), d, shared, spec.seed);
        continue;
      }
      attacks::AttackContext through = ctx;
      attacks::AttackSpec s = spec;
      if (d.purifier) {
        through.purifier = d.purifier;
      } else {
        // No purifier to bypass: the plain attack.
        s.method = spec.method == attacks::Method::BpdaSsp ? attacks::Method::Ssp : attacks::Method::Ifgsm;
      }
      score(spec.digest(), d, attack_set(through, data, s, chunk), spec.seed);
    }
  }
  return report;
}

std::vector<CurvePoint> distortion_curve(const nets::Network& extractor, const nets::Network& classifier,
                                         const attacks::AttackSpec& family, const io::ImageBatch& data,
                                         std::span<const int> grid, std::int64_t chunk) {
  if (grid.empty()) throw std::invalid_argument("distortion_curve needs a non-empty grid");
  for (int g : grid)
    if (g < 0) throw std::invalid_argument("iteration grid entries must be >= 0");
  const int t_max = *std::max_element(grid.begin(), grid.end());
  std::map<int, std::vector<Tensor>> at;  // iteration -> iterate per chunk
  attacks::AttackContext ctx{&extractor, &extractor, nullptr};
  const auto n = data.size();
  for (std::int64_t b = 0, i = 0; b < n; b += chunk, ++i) {
    const auto m = std::min(chunk, n - b);
    auto s = family;
    s.iterations = t_max;
    s.seed = chunk_seed(family.seed, i);
    const auto labels = slice_labels(data.labels, b, m);
    attacks::run_attack(ctx, slice_rows(data.images, b, m), labels, s, nullptr, [&](int it, const Tensor& xa) {
      if (std::find(grid.begin(), grid.end(), it) != grid.end()) at[it].push_back(xa);
    });
  }
  std::vector<CurvePoint> out;
  for (int g : grid) {
    if (at[g].empty()) throw std::invalid_argument("attack family does not expose iteration " + std::to_string(g));
    const Tensor xa = concat_rows(at[g]);
    CurvePoint p;
    p.iterations = g;
    p.per_sample = per_sample_distortion(extractor, data.images, xa, family.tap, family.metric);
    double sum = 0;
    for (double v : p.per_sample) sum += v;
    p.mean_distortion = sum / static_cast<double>(p.per_sample.size());
    p.fooling_rate = fooling_rate(classifier, data.images, xa, chunk);
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<SweepRow> layer_sweep(const nets::Network& extractor, const nets::Network& classifier,
                                  const io::ImageBatch& data, std::span<const std::string> taps,
                                  const attacks::AttackSpec& spec, std::int64_t chunk) {
  std::vector<SweepRow> out;
  for (const auto& tap : taps) {
    auto s = spec;
    s.method = attacks::Method::Ssp;
    s.tap = tap;
    const Tensor xa = attack_set({&extractor, nullptr, nullptr}, data, s, chunk);
    const auto d = per_sample_distortion(extractor, data.images, xa, tap, s.metric);
    double sum = 0;
    for (double v : d) sum += v;
    out.push_back({tap, fooling_rate(classifier, data.images, xa, chunk), sum / static_cast<double>(d.size())});
  }
  return out;
}

}  // namespace nrp::eval
