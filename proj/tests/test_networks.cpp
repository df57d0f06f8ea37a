#include <cmath>

#include "doctest.h"
#include "nrp/builders.hpp"
#include "nrp/data.hpp"
#include "nrp/training.hpp"
#include "support/netcheck.hpp"

using namespace nrp;
using namespace nrp::nets;
using nrp::testing::network_gradcheck;
using nrp::testing::random64;

namespace {

Tensor images(std::int64_t n, int h, std::uint64_t seed) {
  Rng r(seed);
  return r.uniform_tensor({n, 3, h, h}, 0.0, 1.0);
}

FeatureExtractorConfig tiny_extractor() {
  FeatureExtractorConfig c;
  c.widths = {2, 3, 3, 4};
  c.num_classes = 3;
  return c;
}

}  // namespace

TEST_SUITE("feature extractor") {
  TEST_CASE("default shapes and tap layout") {
    auto F = build_feature_extractor({}, 1);
    const auto x = images(2, 32, 2);
    CHECK(F.infer(x).shape() == Shape{2, 10});
    CHECK(F.tap(x, "b3c3").shape() == Shape{2, 32, 8, 8});
    CHECK(F.tap(x, "b1c1").shape() == Shape{2, 8, 32, 32});
    const auto taps = F.tap_names();
    REQUIRE(taps.size() == 10);
    CHECK(taps.front() == "b1c1");
    CHECK(taps.back() == "b4c3");
    CHECK_FALSE(F.has_tap("b5c1"));
    CHECK_THROWS(F.tap(x, "b9c9"));
  }

  TEST_CASE("truncated network reproduces the tap bit-exactly") {
    auto F = build_feature_extractor({}, 3);
    const auto x = images(3, 32, 4);
    auto T = F.truncated("b3c3");
    CHECK(T.infer(x).bit_equal(F.tap(x, "b3c3")));
    CHECK(T.parameter_count() < F.parameter_count());
  }

  TEST_CASE("same seed, same weights") {
    auto a = build_feature_extractor({}, 5), b = build_feature_extractor({}, 5), c = build_feature_extractor({}, 6);
    const auto x = images(1, 32, 7);
    CHECK(a.infer(x).bit_equal(b.infer(x)));
    CHECK_FALSE(a.infer(x).bit_equal(c.infer(x)));
  }

  TEST_CASE("finite differences over input and every parameter") {
    CHECK(network_gradcheck(build_feature_extractor(tiny_extractor(), 8), images(2, 8, 9), Mode::Eval) < 1e-5);
  }

  TEST_CASE("tap gradient of the default extractor along random directions") {
    auto F = build_feature_extractor({}, 10).cast(DType::F64);
    const auto x = images(1, 16, 11).cast(DType::F64);
    const auto w = random64(F.tap(x, "b3c3").shape(), 12);
    auto loss = [&](const Tensor& in) {
      Tape t;
      auto r = F.forward(t, t.constant(in), {Mode::Eval, {"b3c3"}, false, false});
      return ops::sum(ops::mul(r.taps.at("b3c3"), t.constant(w))).value().item();
    };
    Tape tape;
    Var xv = tape.leaf(x);
    auto r = F.forward(tape, xv, {Mode::Eval, {"b3c3"}, false, false});
    const auto g = tape.backward(ops::sum(ops::mul(r.taps.at("b3c3"), tape.constant(w)))).of(xv).to_vector();
    for (std::uint64_t s = 0; s < 3; ++s) {
      const auto dir = random64(x.shape(), 100 + s).to_vector();
      auto xv0 = x.to_vector();
      auto p = xv0, m = xv0;
      double analytic = 0;
      for (std::size_t k = 0; k < dir.size(); ++k) {
        p[k] += 1e-5 * dir[k];
        m[k] -= 1e-5 * dir[k];
        analytic += g[k] * dir[k];
      }
      const double numeric = (loss(make_tensor(x.shape(), p)) - loss(make_tensor(x.shape(), m))) / 2e-5;
      CHECK(std::abs(analytic - numeric) / std::max(std::abs(analytic), 1e-3) < 1e-5);
    }
  }
}

TEST_SUITE("purifier") {
  TEST_CASE("output shape equals input shape at any resolution") {
    auto P = build_purifier({}, 1);
    for (int h : {32, 24, 17}) CHECK(P.infer(images(2, h, 2)).shape() == Shape{2, 3, h, h});
  }

  TEST_CASE("no path from input to output avoids a convolution") {
    auto P = build_purifier({}, 1);
    CHECK_FALSE(P.input_bypasses_convolutions());
    P.check_acyclic();

    // A network with an input skip must be detected.
    Network skip("skip", 3);
    LayerSpec conv;
    conv.name = "conv";
    conv.kind = LayerKind::Conv;
    conv.inputs = {0};
    conv.in_channels = conv.out_channels = 3;
    const int c = skip.add_layer(conv);
    LayerSpec add;
    add.name = "add";
    add.kind = LayerKind::ScaledAdd;
    add.inputs = {0, c};
    skip.add_layer(add);
    CHECK(skip.input_bypasses_convolutions());
    CHECK(identity_network(3).input_bypasses_convolutions());
  }

  TEST_CASE("parameter count matches the closed form") {
    for (auto [w, g, b] : {std::tuple{32, 16, 2}, std::tuple{16, 8, 1}, std::tuple{5, 3, 3}}) {
      PurifierConfig c;
      c.width = w;
      c.growth = g;
      c.basic_blocks = b;
      CHECK(build_purifier(c, 0).parameter_count() == purifier_parameter_count(c));
    }
  }

  TEST_CASE("identity start keeps images nearly unchanged") {
    auto P = build_purifier({}, 3);
    const auto x = images(2, 32, 4);
    const auto y = P.infer(x);
    double mean_abs = 0;
    for (std::int64_t i = 0; i < x.numel(); ++i) mean_abs += std::abs(y.at(i) - x.at(i));
    mean_abs /= static_cast<double>(x.numel());
    CHECK(mean_abs < 0.02);
    PurifierConfig plain;
    plain.identity_init = false;
    CHECK_FALSE(build_purifier(plain, 3).infer(x).bit_equal(y));
  }

  TEST_CASE("finite differences over input and every parameter") {
    PurifierConfig c;
    c.width = 3;
    c.growth = 2;
    c.basic_blocks = 1;
    c.identity_init = false;
    CHECK(network_gradcheck(build_purifier(c, 5), images(1, 5, 6), Mode::Eval) < 1e-5);
  }

  TEST_CASE("metadata rebuilds the same architecture") {
    PurifierConfig c;
    c.width = 8;
    c.growth = 4;
    c.basic_blocks = 1;
    auto P = build_purifier(c, 9);
    auto Q = build_from_metadata(P.metadata(), 9);
    CHECK(Q.parameter_count() == P.parameter_count());
    const auto x = images(1, 8, 1);
    CHECK(Q.infer(x).bit_equal(P.infer(x)));
  }
}

TEST_SUITE("critic") {
  TEST_CASE("one score per image") {
    auto C = build_critic({}, 1);
    CHECK(C.infer(images(8, 32, 2)).shape() == Shape{8, 1});
    CHECK(C.infer(images(3, 24, 2)).shape() == Shape{3, 1});
  }

  TEST_CASE("train-mode forward leaves running statistics alone until applied") {
    auto C = build_critic({}, 1);
    const auto before = C.buffers();
    Tape tape;
    auto res = C.forward(tape, tape.constant(images(4, 16, 3)), {Mode::Train, {}, true, false});
    for (std::size_t i = 0; i < before.size(); ++i) CHECK(C.buffers()[i].value.bit_equal(before[i].value));
    CHECK_FALSE(res.stat_updates.empty());
    C.apply_stat_updates(res);
    bool changed = false;
    for (std::size_t i = 0; i < before.size(); ++i) changed |= !C.buffers()[i].value.bit_equal(before[i].value);
    CHECK(changed);
  }

  TEST_CASE("finite differences in train mode (batch statistics)") {
    CriticConfig c;
    c.widths = {2, 3, 3, 2, 2};
    CHECK(network_gradcheck(build_critic(c, 4), images(3, 8, 5), Mode::Train) < 1e-5);
  }
}

TEST_SUITE("toy classifier") {
  TEST_CASE("softmax of the logits sums to one") {
    auto T = build_toy_classifier({}, 1);
    const auto z = T.infer(images(4, 32, 2)).to_vector();
    for (int i = 0; i < 4; ++i) {
      double mx = -1e300, s = 0;
      for (int k = 0; k < 10; ++k) mx = std::max(mx, z[i * 10 + k]);
      for (int k = 0; k < 10; ++k) s += std::exp(z[i * 10 + k] - mx);
      double total = 0;
      for (int k = 0; k < 10; ++k) total += std::exp(z[i * 10 + k] - mx) / s;
      CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
    }
  }

  TEST_CASE("learns a linearly separable two-class task within 200 steps") {
    // Class 0: dark images, class 1: bright images, plus pixel noise.
    io::Dataset d;
    d.count = 400;
    d.num_classes = 2;
    d.height = d.width = 16;
    Rng r(3);
    for (std::int64_t i = 0; i < d.count; ++i) {
      const int y = static_cast<int>(i % 2);
      d.labels.push_back(y);
      for (std::int64_t j = 0; j < d.image_bytes(); ++j) {
        const double v = (y ? 0.6 : 0.4) + 0.15 * r.normal();
        d.pixels.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255)));
      }
    }
    ClassifierConfig c;
    c.num_classes = 2;
    auto T = build_toy_classifier(c, 4);
    training::train_classifier(T, d, {32, 200, 1e-3, 5});
    const auto batch = d.slice(0, d.count);
    const auto z = T.infer(batch.images).to_vector();
    int correct = 0;
    for (std::int64_t i = 0; i < d.count; ++i) correct += (z[2 * i + 1] > z[2 * i]) == (batch.labels[i] == 1);
    CHECK(correct >= 0.95 * d.count);
  }

  TEST_CASE("finite differences over input and every parameter") {
    ClassifierConfig c;
    c.widths = {2, 3, 4};
    c.num_classes = 3;
    CHECK(network_gradcheck(build_toy_classifier(c, 6), images(2, 8, 7), Mode::Eval) < 1e-5);
  }
}

TEST_SUITE("network state") {
  TEST_CASE("load_state names the first mismatching tensor") {
    auto P = build_purifier({}, 1);
    auto state = P.state();
    state[3].value = Tensor::zeros({1});
    try {
      P.load_state(state);
      FAIL("expected a mismatch");
    } catch (const std::exception& e) {
      CHECK(std::string(e.what()).find(state[3].name) != std::string::npos);
    }
  }

  TEST_CASE("cast round trip preserves f32 weights") {
    auto F = build_feature_extractor({}, 2);
    auto back = F.cast(DType::F64).cast(DType::F32);
    for (std::size_t i = 0; i < F.parameters().size(); ++i)
      CHECK(back.parameters()[i].value.bit_equal(F.parameters()[i].value));
  }
}
