#include <cmath>

#include "doctest.h"
#include "nrp/builders.hpp"
#include "nrp/eval.hpp"
#include "support/models.hpp"

using namespace nrp;
using namespace nrp::eval;

namespace {

Tensor logits(std::int64_t n, std::int64_t k, std::vector<double> v) { return Tensor(Shape{n, k}, std::move(v)); }

struct Models {
  nets::Network F = nets::build_feature_extractor(nrp::testing::small_extractor_config(), 1);
  nets::Network T = nets::build_toy_classifier(nrp::testing::small_classifier_config(), 2);
};

io::ImageBatch small_batch(std::int64_t n = 6) {
  io::SyntheticSpec s;
  s.count = n;
  s.size = 16;
  return io::make_synthetic(s).slice(0, n);
}

attacks::AttackSpec spec_for(attacks::Method m, int iterations = 2) {
  auto s = attacks::AttackSpec::defaults(m);
  s.tap = "b3c2";
  if (s.iterations > 1) s.iterations = iterations;
  return s;
}

}  // namespace

TEST_SUITE("metrics") {
  TEST_CASE("argmax breaks ties toward the lowest index") {
    CHECK(argmax_rows(logits(3, 3, {1, 2, 2, 5, 5, 5, 0, -1, 3})) == std::vector<int>{1, 0, 2});
  }

  TEST_CASE("top-k recount by hand") {
    // label ranks 1, 4, 2 (the last by tie order)
    const auto z = logits(3, 4, {0.9, 0.1, 0.0, 0.0,  //
                                 0.5, 0.4, 0.3, 0.6,  //
                                 0.2, 0.7, 0.7, 0.1});
    const std::vector<int> y{0, 2, 2};
    CHECK(top_k_hits(z, y, 1) == std::vector<bool>{true, false, false});
    CHECK(top_k_hits(z, y, 2) == std::vector<bool>{true, false, true});
    CHECK(top_k_accuracy(z, y, 3) == doctest::Approx(2.0 / 3));
    CHECK(top_k_accuracy(z, y, 4) == 1.0);
    CHECK(top_k_accuracy(z, y, 1) == doctest::Approx(1.0 / 3));
    CHECK_THROWS(top_k_hits(z, std::vector<int>{0, 1}, 1));
    CHECK_THROWS(top_k_hits(z, std::vector<int>{0, 1, 4}, 1));
    CHECK_THROWS(top_k_hits(z, y, 0));
  }

  TEST_CASE("accuracy through a network matches a manual recount") {
    Models m;
    const auto b = small_batch(9);
    const auto pred = argmax_rows(m.T.infer(b.images));
    int correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == b.labels[i];
    CHECK(top_k_accuracy(m.T, b, 1, 4) == doctest::Approx(correct / 9.0).epsilon(1e-15));
  }

  TEST_CASE("fooling rate of an unchanged set is zero") {
    Models m;
    const auto b = small_batch();
    CHECK(fooling_rate(m.T, b.images, b.images) == 0.0);
  }

  TEST_CASE("chunked inference equals one pass") {
    Models m;
    const auto b = small_batch(7);
    // BLAS may round differently for different batch shapes; chunks themselves are exact.
    const auto whole = m.T.infer(b.images).to_vector(), chunked = infer_chunked(m.T, b.images, 3).to_vector();
    for (std::size_t i = 0; i < whole.size(); ++i) CHECK(chunked[i] == doctest::Approx(whole[i]).epsilon(1e-5));
    CHECK(slice_rows(infer_chunked(m.T, b.images, 3), 3, 3).bit_equal(m.T.infer(slice_rows(b.images, 3, 3))));
    const Tensor parts[] = {slice_rows(b.images, 0, 3), slice_rows(b.images, 3, 4)};
    CHECK(concat_rows(parts).bit_equal(b.images));
    CHECK_THROWS(slice_rows(b.images, 5, 3));
  }

  TEST_CASE("per-sample distortion averages to the batch distortion") {
    Models m;
    const auto b = small_batch(4);
    const auto adv = attacks::ssp_attack(m.F, b.images, spec_for(attacks::Method::Ssp));
    const auto d = per_sample_distortion(m.F, b.images, adv, "b3c2", attacks::Metric::Mae);
    REQUIRE(d.size() == 4);
    double mean = 0;
    for (double v : d) mean += v / 4;
    CHECK(mean == doctest::Approx(attacks::feature_distortion(m.F, b.images, adv, "b3c2", attacks::Metric::Mae))
                      .epsilon(1e-5));
  }
}

TEST_SUITE("reports") {
  TEST_CASE("csv layout") {
    EvalReport r;
    r.add({"T", "none", "none", "accuracy", 0.5, 10, 3});
    r.add({"T", "ssp;eps=1", "nrp", "accuracy", 0.25, 10, 3});
    CHECK(EvalReport::csv_header() == "model,attack,defense,metric,value,n,seed");
    CHECK(r.to_csv() == "model,attack,defense,metric,value,n,seed\nT,none,none,accuracy,0.5,10,3\n"
                        "T,ssp;eps=1,nrp,accuracy,0.25,10,3\n");
    REQUIRE(r.find("ssp;eps=1", "nrp", "accuracy") != nullptr);
    CHECK(r.find("ssp;eps=1", "nrp", "accuracy")->value == 0.25);
    CHECK(r.find("x", "y", "z") == nullptr);
  }

  TEST_CASE("invalid rows are rejected") {
    EvalReport r;
    r.add({"T", "none", "none", "accuracy", 0.5, 10, 0});
    CHECK_THROWS(r.add({"T", "none", "none", "accuracy", 0.6, 10, 0}));
    CHECK_THROWS(r.add({"T", "none", "p", "accuracy", 1.5, 10, 0}));
    CHECK_THROWS(r.add({"T", "none", "p", "accuracy", 0.5, 0, 0}));
    CHECK_THROWS(r.add({"T", "a,b", "p", "accuracy", 0.5, 1, 0}));
    r.add({"T", "none", "p", "mean_distortion", 3.5, 10, 0});
    CHECK(r.rows().size() == 2);
  }
}

TEST_SUITE("defense table") {
  TEST_CASE("identity purifier reproduces the undefended rows") {
    Models m;
    const auto id = nets::identity_network(3);
    const auto b = small_batch(5);
    const Defense defenses[] = {{"none", nullptr, 0, 0}, {"identity", &id, 0, 0}};
    const attacks::AttackSpec specs[] = {spec_for(attacks::Method::Ssp), spec_for(attacks::Method::Fgsm),
                                         spec_for(attacks::Method::BpdaIfgsm)};
    const auto report = defense_table(m.T, {&m.F, &m.T, nullptr}, defenses, specs, b, "T", 2);
    CHECK(report.rows().size() == 8);
    for (const auto& row : report.rows()) {
      if (row.defense != "none") continue;
      const auto* twin = report.find(row.attack, "identity", row.metric);
      REQUIRE(twin != nullptr);
      CHECK(twin->value == row.value);
      CHECK(twin->n == 5);
    }
  }

  TEST_CASE("clean row equals plain accuracy; purified inputs pass through the purifier") {
    Models m;
    nets::PurifierConfig pc;
    pc.width = 4;
    pc.growth = 2;
    pc.basic_blocks = 1;
    const auto P = nets::build_purifier(pc, 9);
    const auto b = small_batch(6);
    const Defense defenses[] = {{"p", &P, 0, 0}};
    const attacks::AttackSpec none[] = {spec_for(attacks::Method::Ssp)};
    const auto report = defense_table(m.T, {&m.F, &m.T, nullptr}, defenses, none, b, "T");
    const auto purified = apply_defense(defenses[0], b.images);
    io::ImageBatch pb{purified, b.labels};
    CHECK(report.find("none", "p", "accuracy")->value == top_k_accuracy(m.T, pb, 1));
  }

  TEST_CASE("dynamic defense with zero noise is the purifier") {
    nets::PurifierConfig pc;
    pc.width = 4;
    pc.growth = 2;
    pc.basic_blocks = 1;
    const auto P = nets::build_purifier(pc, 9);
    const auto x = small_batch(3).images;
    CHECK(dynamic_defense_purify(P, x, 0.0, 1).bit_equal(P.infer(x)));
    CHECK_FALSE(dynamic_defense_purify(P, x, 0.05, 1).bit_equal(P.infer(x)));
    CHECK(dynamic_defense_purify(P, x, 0.05, 1).bit_equal(dynamic_defense_purify(P, x, 0.05, 1)));
  }

  TEST_CASE("attack sets depend only on inputs, spec and chunk size") {
    Models m;
    const auto b = small_batch(5);
    const auto s = spec_for(attacks::Method::Ssp);
    const attacks::AttackContext ctx{&m.F, &m.T, nullptr};
    CHECK(attack_set(ctx, b, s, 2).bit_equal(attack_set(ctx, b, s, 2)));
    // chunk i uses splitmix64(seed + i)
    auto first = s;
    first.seed = splitmix64(s.seed);
    CHECK(slice_rows(attack_set(ctx, b, s, 2), 0, 2).bit_equal(attacks::ssp_attack(m.F, slice_rows(b.images, 0, 2), first)));
  }
}

TEST_SUITE("drivers") {
  TEST_CASE("curve points equal separate runs of that length") {
    Models m;
    const auto b = small_batch(4);
    const auto family = spec_for(attacks::Method::Ssp, 3);
    const int grid[] = {1, 3};
    const auto curve = distortion_curve(m.F, m.T, family, b, grid, 2);
    REQUIRE(curve.size() == 2);
    for (const auto& p : curve) {
      auto s = family;
      s.iterations = p.iterations;
      const auto adv = attack_set({&m.F, &m.F, nullptr}, b, s, 2);
      const auto d = per_sample_distortion(m.F, b.images, adv, s.tap, s.metric);
      CHECK(p.per_sample == d);
      CHECK(p.fooling_rate == fooling_rate(m.T, b.images, adv));
    }
    CHECK(curve[1].mean_distortion > curve[0].mean_distortion);
  }

  TEST_CASE("layer sweep visits every tap") {
    Models m;
    const auto b = small_batch(3);
    const std::string taps[] = {"b1c1", "b3c2"};
    const auto rows = layer_sweep(m.F, m.T, b, taps, spec_for(attacks::Method::Ssp, 1));
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].tap == "b1c1");
    for (const auto& r : rows) {
      CHECK(r.fooling_rate >= 0.0);
      CHECK(r.fooling_rate <= 1.0);
      CHECK(r.mean_distortion > 0.0);
    }
  }
}
