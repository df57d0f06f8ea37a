#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "nrp/attacks.hpp"
#include "nrp/builders.hpp"
#include "support/models.hpp"

using namespace nrp;
using namespace nrp::attacks;

namespace {

const double kSlack = std::ldexp(1.0, -20);

Tensor images(std::int64_t n, int h, std::uint64_t seed, DType dt = DType::F32) {
  return Rng(seed).uniform_tensor({n, 3, h, h}, 0.0, 1.0, dt);
}

std::vector<int> labels_for(std::int64_t n, std::uint64_t seed, int classes = 10) {
  Rng r(seed);
  std::vector<int> y(static_cast<std::size_t>(n));
  for (auto& v : y) v = static_cast<int>(r.uniform_int(classes));
  return y;
}

bool within_budget(const Tensor& adv, const Tensor& x, double eps) {
  const auto a = adv.to_vector(), b = x.to_vector();
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!(a[i] >= 0.0 && a[i] <= 1.0)) return false;
    if (std::abs(a[i] - b[i]) > eps + kSlack) return false;
  }
  return true;
}

struct Models {
  nets::Network F = nets::build_feature_extractor(nrp::testing::small_extractor_config(), 1);
  nets::Network T = nets::build_toy_classifier(nrp::testing::small_classifier_config(), 2);
  AttackContext ctx() const { return {&F, &T, nullptr}; }
};

AttackSpec small_spec(Method m) {
  auto s = AttackSpec::defaults(m);
  s.tap = "b3c2";
  if (s.iterations > 4) s.iterations = 4;
  return s;
}

}  // namespace

TEST_SUITE("projection") {
  TEST_CASE("zero budget returns x exactly") {
    const auto x = images(2, 4, 1);
    const auto noisy = Rng(2).uniform_tensor(x.shape(), 0, 1);
    CHECK(linf_project(noisy, x, 0.0).bit_equal(x));
  }

  TEST_CASE("overshooting by 2 eps lands on min(x + eps, 1)") {
    const double eps = 0.1;
    const auto x = images(2, 4, 3, DType::F64);
    auto v = x.to_vector();
    for (auto& e : v) e += 2 * eps;
    const auto out = linf_project(make_tensor(x.shape(), v), x, eps).to_vector();
    const auto xv = x.to_vector();
    for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == std::min(xv[i] + eps, 1.0));
  }

  TEST_CASE("negative budget and shape mismatch are errors") {
    const auto x = images(1, 4, 4);
    CHECK_THROWS(linf_project(x, x, -0.1));
    CHECK_THROWS_AS(linf_project(images(2, 4, 4), x, 0.1), ShapeError);
  }

  TEST_CASE("bound holds for 10^4 random trials") {
    Rng r(5);
    int violations = 0;
    for (int t = 0; t < 10000; ++t) {
      const double eps = r.uniform(0.0, 0.2);
      const auto x = r.uniform_tensor({1, 1, 2, 3}, 0, 1);
      const auto y = r.uniform_tensor({1, 1, 2, 3}, -0.5, 1.5);
      violations += !within_budget(linf_project(y, x, eps), x, eps);
    }
    CHECK(violations == 0);
  }
}

TEST_SUITE("feature distortion") {
  TEST_CASE("zero on identical inputs, symmetric for MAE and L2") {
    Models m;
    const auto x = images(2, 16, 6), y = images(2, 16, 7);
    for (auto metric : {Metric::Mae, Metric::L2, Metric::Cosine}) {
      CHECK(feature_distortion(m.F, x, x, "b3c2", metric) == doctest::Approx(0.0).epsilon(1e-6));
    }
    CHECK(feature_distortion(m.F, x, y, "b3c2", Metric::Mae) == feature_distortion(m.F, y, x, "b3c2", Metric::Mae));
    CHECK(feature_distortion(m.F, x, y, "b3c2", Metric::L2) ==
          doctest::Approx(feature_distortion(m.F, y, x, "b3c2", Metric::L2)).epsilon(1e-12));
    CHECK(feature_distortion(m.F, x, y, "b3c2", Metric::Mae) > 0.0);
  }

  TEST_CASE("hand-built one-conv extractor on 2x2 images") {
    // Tap = 2 * pixel + 0.5 (1x1 conv, single channel).
    nets::Network F("one_conv", 1);
    nets::LayerSpec conv;
    conv.name = "conv";
    conv.kind = nets::LayerKind::Conv;
    conv.inputs = {0};
    conv.in_channels = conv.out_channels = 1;
    conv.kernel = 1;
    conv.padding = 0;
    F.declare_tap("t", F.add_layer(conv));
    F = F.cast(DType::F64);
    F.set_parameter("conv.weight", Tensor(Shape{1, 1, 1, 1}, std::vector<double>{2.0}));
    F.set_parameter("conv.bias", Tensor(Shape{1}, std::vector<double>{0.5}));
    const Tensor x(Shape{1, 1, 2, 2}, std::vector<double>{0.0, 0.25, 0.5, 0.75});
    const Tensor y(Shape{1, 1, 2, 2}, std::vector<double>{0.25, 0.25, 0.5, 0.5});
    // feature difference: 2 * (x - y) = (-0.5, 0, 0, 0.5)
    CHECK(feature_distortion(F, x, y, "t", Metric::Mae) == doctest::Approx(0.25).epsilon(1e-15));
    CHECK(feature_distortion(F, x, y, "t", Metric::L2) == doctest::Approx(std::sqrt(0.5)).epsilon(1e-15));
    // features: x -> (0.5, 1, 1.5, 2), y -> (1, 1, 1.5, 1.5)
    const double dot = 0.5 * 1 + 1 * 1 + 1.5 * 1.5 + 2 * 1.5;
    const double nx = std::sqrt(0.25 + 1 + 2.25 + 4), ny = std::sqrt(1 + 1 + 2.25 + 2.25);
    CHECK(feature_distortion(F, x, y, "t", Metric::Cosine) == doctest::Approx(1 - dot / (nx * ny)).epsilon(1e-10));
  }

  TEST_CASE("metric names round trip") {
    for (auto m : {Metric::Mae, Metric::L2, Metric::Cosine}) CHECK(parse_metric(metric_name(m)) == m);
    CHECK_THROWS(parse_metric("wasserstein"));
  }
}

TEST_SUITE("spec") {
  TEST_CASE("reference settings") {
    const auto s = AttackSpec::defaults(Method::Ssp);
    CHECK(s.epsilon == 16.0 / 255);
    CHECK(s.step == 1.6 / 255);
    CHECK(s.iterations == 100);
    CHECK(s.tap == "b3c3");
    CHECK(AttackSpec::defaults(Method::Ifgsm).iterations == 10);
    CHECK(AttackSpec::defaults(Method::Mifgsm).momentum == 1.0);
    CHECK(AttackSpec::defaults(Method::Dim).diversity_prob == 0.7);
    CHECK(AttackSpec::defaults(Method::Rfgsm).random_step_or_default() == doctest::Approx(16.0 / 3 / 255));
    CHECK(s.init_noise_or_default() == doctest::Approx(8.0 / 255));
  }

  TEST_CASE("digest round trip") {
    auto s = AttackSpec::defaults(Method::Dim);
    s.seed = 1234567;
    s.epsilon = 12.0 / 255;
    s.init_noise = 0.01;
    const auto d = s.digest();
    CHECK(d.find(',') == std::string::npos);
    const auto back = AttackSpec::from_digest(d);
    CHECK(back.digest() == d);
    CHECK(back.epsilon == s.epsilon);
    CHECK(back.seed == s.seed);
    CHECK_THROWS(AttackSpec::from_digest("nope;eps=1"));
    CHECK_THROWS(AttackSpec::from_digest("ssp;bogus=1"));
  }

  TEST_CASE("validation") {
    auto s = AttackSpec::defaults(Method::Ssp);
    s.epsilon = -0.1;
    CHECK_THROWS(s.validate());
    s = AttackSpec::defaults(Method::Dim);
    s.diversity_prob = 1.5;
    CHECK_THROWS(s.validate());
    s = AttackSpec::defaults(Method::Ssp);
    s.tap.clear();
    CHECK_THROWS(s.validate());
    s = AttackSpec::defaults(Method::Fgsm);
    s.iterations = 3;
    CHECK_THROWS(s.validate());
    for (const auto& [name, m] : std::vector<std::pair<std::string, Method>>{{"fgsm", Method::Fgsm},
                                                                            {"bpda-ssp", Method::BpdaSsp}})
      CHECK(parse_method(name) == m);
    CHECK_THROWS(parse_method("pgd"));
  }
}

TEST_SUITE("ssp") {
  TEST_CASE("zero iterations is the clipped random start") {
    Models m;
    const auto x = images(2, 16, 8);
    auto s = small_spec(Method::Ssp);
    s.iterations = 0;
    const auto out = ssp_attack(m.F, x, s);
    CHECK(within_budget(out, x, s.epsilon));
    CHECK_FALSE(out.bit_equal(x));
    const auto xv = x.to_vector(), ov = out.to_vector();
    for (std::size_t i = 0; i < xv.size(); ++i) CHECK(std::abs(ov[i] - xv[i]) <= s.epsilon / 2 + kSlack);
  }

  TEST_CASE("deterministic per seed, different across seeds") {
    Models m;
    const auto x = images(2, 16, 9);
    auto s = small_spec(Method::Ssp);
    const auto a = ssp_attack(m.F, x, s), b = ssp_attack(m.F, x, s);
    CHECK(a.bit_equal(b));
    s.seed = 1;
    CHECK_FALSE(ssp_attack(m.F, x, s).bit_equal(a));
  }

  TEST_CASE("labels do not influence the output") {
    Models m;
    const auto x = images(3, 16, 10);
    const auto s = small_spec(Method::Ssp);
    std::vector<int> y{0, 1, 2}, perm{2, 0, 1};
    CHECK(run_attack(m.ctx(), x, y, s).bit_equal(run_attack(m.ctx(), x, perm, s)));
  }

  TEST_CASE("distortion grows from the first iterate") {
    Models m;
    const auto x = images(4, 16, 11);
    auto s = small_spec(Method::Ssp);
    s.iterations = 8;
    AttackTrace trace;
    ssp_attack(m.F, x, s, &trace);
    REQUIRE(trace.iterates.size() == 8);
    CHECK(feature_distortion(m.F, x, trace.iterates.back(), s.tap, s.metric) >
          feature_distortion(m.F, x, trace.iterates.front(), s.tap, s.metric));
  }

  TEST_CASE("observer sees every iterate, starting from the random init") {
    Models m;
    const auto x = images(1, 16, 12);
    auto s = small_spec(Method::Ssp);
    std::vector<int> seen;
    const auto out = ssp_attack(m.F, x, s, nullptr, [&](int it, const Tensor&) { seen.push_back(it); });
    CHECK(seen == std::vector<int>{0, 1, 2, 3, 4});
    (void)out;
  }

  TEST_CASE("non-finite gradients abort with a diagnostic") {
    Models m;
    auto broken = m.F;
    auto w = broken.parameters()[0].value.to_vector();
    w[0] = std::nan("");
    std::vector<float> wf(w.begin(), w.end());
    broken.set_parameter(broken.parameters()[0].name, make_tensor(broken.parameters()[0].value.shape(), wf));
    CHECK_THROWS_AS(ssp_attack(broken, images(1, 16, 13), small_spec(Method::Ssp)), AttackError);
  }

  TEST_CASE("unknown tap is rejected") {
    Models m;
    auto s = small_spec(Method::Ssp);
    s.tap = "b9c9";
    CHECK_THROWS(ssp_attack(m.F, images(1, 16, 1), s));
  }
}

TEST_SUITE("supervised baselines") {
  TEST_CASE("FGSM steps the sign of the gradient on a linear model") {
    // z = W x, label 0: grad = W^T (softmax(z) - e0).
    const std::vector<double> W{1.0, -2.0, 0.5, 1.0};
    auto net = nrp::testing::linear_two_pixel(W);
    const Tensor x(Shape{1, 1, 2, 2}, std::vector<double>{0.5, 0.5, 0.3, 0.3});
    std::vector<int> y{0};
    const double z0 = 1.0 * 0.5 - 2.0 * 0.5, z1 = 0.5 * 0.5 + 1.0 * 0.5;
    const double p0 = 1.0 / (1.0 + std::exp(z1 - z0));
    const double g0 = W[0] * (p0 - 1) + W[2] * (1 - p0);
    const double g1 = W[1] * (p0 - 1) + W[3] * (1 - p0);
    REQUIRE(g0 < 0);
    REQUIRE(g1 > 0);
    auto s = AttackSpec::defaults(Method::Fgsm);
    AttackTrace trace;
    const auto out = fgsm(net, x, y, s, &trace).to_vector();
    const double eps = 16.0 / 255;
    CHECK(out[0] == 0.5 - eps);
    CHECK(out[1] == 0.5 + eps);
    CHECK(out[2] == 0.3);  // zero-gradient pixels stay put
    CHECK(out[3] == 0.3);
    const auto g = trace.gradients.at(0).to_vector();
    CHECK(g[0] == doctest::Approx(g0).epsilon(1e-14));
    CHECK(g[1] == doctest::Approx(g1).epsilon(1e-14));
  }

  TEST_CASE("I-FGSM with ten 1.6/255 steps reaches the 16/255 budget on a linear model") {
    auto net = nrp::testing::linear_two_pixel({1.0, -2.0, 0.5, 1.0});
    const Tensor x(Shape{1, 1, 2, 2}, std::vector<double>{0.5, 0.5, 0.3, 0.3});
    std::vector<int> y{0};
    const auto out = ifgsm(net, x, y, AttackSpec::defaults(Method::Ifgsm)).to_vector();
    CHECK(out[0] == doctest::Approx(0.5 - 16.0 / 255).epsilon(1e-12));
    CHECK(out[1] == doctest::Approx(0.5 + 16.0 / 255).epsilon(1e-12));
  }

  TEST_CASE("MI-FGSM momentum is the running sum of l1-normalised gradients (mu = 1)") {
    auto net = nrp::testing::linear_two_pixel({0.7, -1.3, -0.4, 0.9});
    const Tensor x(Shape{2, 1, 2, 2}, std::vector<double>{0.2, 0.9, 0, 0, 0.6, 0.1, 0, 0});
    std::vector<int> y{0, 1};
    auto s = AttackSpec::defaults(Method::Mifgsm);
    AttackTrace trace;
    mifgsm(net, x, y, s, &trace);
    REQUIRE(trace.momentum.size() == 10);
    std::vector<double> acc(8, 0.0);
    for (std::size_t t = 0; t < 10; ++t) {
      const auto g = trace.gradients[t].to_vector();
      for (int n = 0; n < 2; ++n) {
        double l1 = 0;
        for (int j = 0; j < 4; ++j) l1 += std::abs(g[n * 4 + j]);
        for (int j = 0; j < 4; ++j) acc[n * 4 + j] = acc[n * 4 + j] + g[n * 4 + j] / l1;
      }
      CHECK(trace.momentum[t].to_vector() == acc);
    }
  }

  TEST_CASE("DIM with p = 0 equals MI-FGSM") {
    Models m;
    const auto x = images(2, 16, 14);
    const auto y = labels_for(2, 15);
    auto s = small_spec(Method::Dim);
    s.diversity_prob = 0.0;
    auto mi = small_spec(Method::Mifgsm);
    CHECK(dim(m.T, x, y, s).bit_equal(mifgsm(m.T, x, y, mi)));
    s.diversity_prob = 1.0;
    CHECK_FALSE(dim(m.T, x, y, s).bit_equal(mifgsm(m.T, x, y, mi)));
  }

  TEST_CASE("R-FGSM stays in budget and depends on its seed") {
    Models m;
    const auto x = images(2, 16, 16);
    const auto y = labels_for(2, 17);
    auto s = AttackSpec::defaults(Method::Rfgsm);
    const auto a = rfgsm(m.T, x, y, s);
    CHECK(within_budget(a, x, s.epsilon));
    s.seed = 3;
    CHECK_FALSE(rfgsm(m.T, x, y, s).bit_equal(a));
  }

  TEST_CASE("label count must match the batch") {
    Models m;
    std::vector<int> y{0};
    CHECK_THROWS(fgsm(m.T, images(2, 16, 1), y, AttackSpec::defaults(Method::Fgsm)));
  }
}

TEST_SUITE("input diversity") {
  TEST_CASE("p = 0 is the identity") {
    const auto x = images(2, 16, 18);
    for (std::uint64_t seed = 0; seed < 20; ++seed) CHECK(input_diversity_transform(x, 0.0, seed).bit_equal(x));
  }

  TEST_CASE("p = 1 keeps the shape and moves content") {
    const auto x = images(2, 20, 19);
    int changed = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto y = input_diversity_transform(x, 1.0, seed);
      CHECK(y.shape() == x.shape());
      changed += !y.bit_equal(x);
    }
    CHECK(changed >= 8);
  }

  TEST_CASE("fixed seed, fixed transform") {
    const auto x = images(1, 20, 20);
    CHECK(input_diversity_transform(x, 0.7, 5).bit_equal(input_diversity_transform(x, 0.7, 5)));
  }
}

TEST_SUITE("bpda") {
  TEST_CASE("an identity purifier reduces BPDA to the plain attack") {
    Models m;
    const auto id = nets::identity_network(3);
    const auto x = images(2, 16, 21);
    const auto y = labels_for(2, 22);
    AttackContext ctx{&m.F, &m.T, &id};
    auto s = small_spec(Method::BpdaSsp);
    auto plain = small_spec(Method::Ssp);
    CHECK(bpda_attack(id, ctx, x, y, s).bit_equal(ssp_attack(m.F, x, plain)));
    auto si = small_spec(Method::BpdaIfgsm);
    si.iterations = 4;
    auto pi = small_spec(Method::Ifgsm);
    pi.iterations = 4;
    CHECK(bpda_attack(id, ctx, x, y, si).bit_equal(ifgsm(m.T, x, y, pi)));
  }

  TEST_CASE("needs the models its objective uses") {
    Models m;
    const auto id = nets::identity_network(3);
    std::vector<int> y{0};
    CHECK_THROWS(bpda_attack(id, {nullptr, &m.T, nullptr}, images(1, 16, 1), y, small_spec(Method::BpdaSsp)));
    CHECK_THROWS(run_attack({&m.F, &m.T, nullptr}, images(1, 16, 1), y, small_spec(Method::BpdaIfgsm)));
  }

  TEST_CASE("budget holds across 10^3 runs through a random purifier") {
    Models m;
    nets::PurifierConfig pc;
    pc.width = 4;
    pc.growth = 2;
    pc.basic_blocks = 1;
    const auto P = nets::build_purifier(pc, 3);
    AttackContext ctx{&m.F, &m.T, &P};
    Rng r(23);
    int violations = 0;
    for (int t = 0; t < 1000; ++t) {
      auto s = AttackSpec::defaults(t % 2 ? Method::BpdaSsp : Method::BpdaIfgsm);
      s.tap = "b3c2";
      s.iterations = 1 + static_cast<int>(r.uniform_int(2));
      s.epsilon = r.uniform(0.0, 32.0 / 255);
      s.step = r.uniform(0.0, 4.0 / 255);
      s.seed = r.next_u64();
      const auto x = r.uniform_tensor({1, 3, 8, 8}, 0, 1);
      std::vector<int> y{static_cast<int>(r.uniform_int(10))};
      violations += !within_budget(bpda_attack(P, ctx, x, y, s), x, s.epsilon);
    }
    CHECK(violations == 0);
  }
}

TEST_SUITE("budget invariant") {
  TEST_CASE("every method, random specs") {
    Models m;
    Rng r(24);
    const Method methods[] = {Method::Fgsm, Method::Rfgsm, Method::Ifgsm, Method::Mifgsm, Method::Dim, Method::Ssp};
    int violations = 0;
    for (int t = 0; t < 600; ++t) {
      auto s = AttackSpec::defaults(methods[t % 6]);
      s.tap = "b3c2";
      s.epsilon = r.uniform(0.0, 32.0 / 255);
      s.step = r.uniform(0.0, 8.0 / 255);
      if (s.iterations > 1) s.iterations = 1 + static_cast<int>(r.uniform_int(3));
      s.seed = r.next_u64();
      const auto x = r.uniform_tensor({2, 3, 8, 8}, 0, 1);
      const auto y = labels_for(2, r.next_u64());
      violations += !within_budget(run_attack(m.ctx(), x, y, s), x, s.epsilon);
    }
    CHECK(violations == 0);
  }
}
