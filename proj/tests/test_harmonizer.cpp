#include <cmath>

#include "advalign/harmonizer.hpp"
#include "doctest.h"
#include "harmonizer_oracle.hpp"

using namespace advalign;
using namespace advalign::testing;

TEST_CASE("presets") {
  CHECK(lambda_presets().size() == 14);
  CHECK(preset_lambda("convnext-tiny-v1") == 1);
  CHECK(preset_lambda("efficientnet-b0") == 20);
  CHECK(preset_lambda("maxvit-tiny-v4") == 10);
  CHECK_THROWS(preset_lambda("nope"));
}

TEST_CASE("pyramid shapes halve with ceiling") {
  auto s = pyramid_shapes(16, 16, 5);
  REQUIRE(s.size() == 5);
  CHECK(s[4] == std::pair<std::size_t, std::size_t>{1, 1});
  CHECK(pyramid_shapes(4, 4, 5).size() == 3);
}

TEST_CASE("loss matches a straight-line reimplementation") {
  Rng rng(1);
  const auto a = tiny_mlp();
  for (int t = 0; t < 20; ++t) {
    auto m = randomized(a, rng);
    auto batch = random_batch(rng, a, 2);
    const double l1 = rng.uniform(0.1, 5), l2 = rng.uniform(0, 0.01);
    const std::size_t levels = 1 + rng.below(3);
    auto got = harmonization_loss(m, batch, harmonizer_config(l1, l2, levels));
    auto want = oracle_loss(m, batch, l1, l2, levels);
    CHECK(std::abs(got.cce - want.cce) < 1e-8);
    CHECK(std::abs(got.alignment - want.align) < 1e-8);
    CHECK(std::abs(got.decay - want.decay) < 1e-8);
    CHECK(std::abs(got.total - (want.cce + want.align + want.decay)) < 1e-8);
    CHECK_FALSE(got.no_maps_warning);
  }
}

TEST_CASE("alignment term ignores positive affine changes of the importance map") {
  Rng rng(2);
  const auto a = tiny_mlp();
  for (int t = 0; t < 20; ++t) {
    auto m = randomized(a, rng);
    auto batch = random_batch(rng, a, 2);
    auto cfg = harmonizer_config(1.0, 0.0, 3);
    const double base = harmonization_loss(m, batch, cfg).alignment;

    // power-of-two scaling is exact in floating point, so the result is bitwise equal
    auto pow2 = batch;
    for (auto& it : pow2)
      for (auto& v : it.map->data()) v *= 8.0;
    CHECK(harmonization_loss(m, pow2, cfg).alignment == base);

    auto affine = batch;
    const double s = rng.uniform(0.01, 100), o = rng.uniform(-10, 10);
    for (auto& it : affine)
      for (auto& v : it.map->data()) v = s * v + o;
    CHECK(harmonization_loss(m, affine, cfg).alignment == doctest::Approx(base).epsilon(1e-12));
  }
}

TEST_CASE("zero lambda1 reduces to cross-entropy exactly") {
  Rng rng(3);
  const auto a = tiny_mlp();
  auto m = randomized(a, rng);
  auto batch = random_batch(rng, a, 3);
  auto h = harmonization_loss(m, batch, harmonizer_config(0.0, 0.0, 5));
  CHECK(h.alignment == 0.0);
  CHECK(h.total == h.cce);
  CHECK(h.cce == doctest::Approx(oracle_loss(m, batch, 0, 0, 1).cce).epsilon(1e-12));
}

TEST_CASE("items without maps contribute nothing") {
  Rng rng(4);
  const auto a = tiny_mlp();
  auto m = randomized(a, rng);
  auto batch = random_batch(rng, a, 2);
  for (auto& it : batch) it.map.reset();
  auto h = harmonization_loss(m, batch, harmonizer_config(2.0, 0.0, 2));
  CHECK(h.alignment == 0.0);
  CHECK(h.no_maps_warning);
}

TEST_CASE("saliency of a linear model is |w| of the label row") {
  Rng rng(5);
  ArchSpec a = tiny_mlp();
  a.hidden = {};
  a.in_channels = 2;
  auto m = randomized(a, rng);
  auto img = random_tensor(rng, {4, 4, 2}, 0, 1);
  const auto& W = m.params.at("fc0.weight");
  for (int y = 0; y < 3; ++y) {
    auto s = saliency_map(m, img, y);
    REQUIRE(s.shape() == Shape{4, 4});
    for (std::size_t p = 0; p < 16; ++p) {
      const double w0 = std::abs(W[(2 * p) * 3 + y]), w1 = std::abs(W[(2 * p + 1) * 3 + y]);
      CHECK(s[p] == std::max(w0, w1));
    }
  }
}

TEST_CASE("saliency matches finite differences of the logit") {
  Rng rng(6);
  ArchSpec a;
  a.kind = ArchKind::SmallCnn;
  a.channels = {3};
  a.height = 6;
  a.width = 6;
  a.num_classes = 3;
  auto m = build_classifier(a, 6);
  for (int t = 0; t < 5; ++t) {
    auto img = random_tensor(rng, {6, 6, 1}, 0, 1);
    const int y = int(rng.below(3));
    auto s = saliency_map(m, img, y);
    auto logit = [&](const Tensor& x) {
      return predict(m, x).logits[std::size_t(y)];
    };
    for (std::size_t p = 0; p < 36; ++p) {
      const double h = 1e-6;
      Tensor up = img, dn = img;
      up[p] += h;
      dn[p] -= h;
      const double fd = std::abs((logit(up) - logit(dn)) / (2 * h));
      CHECK(s[p] == doctest::Approx(fd).epsilon(1e-4).scale(1e-6));
    }
  }
}

TEST_CASE("parameter gradients of the full loss match finite differences") {
  Rng rng(7);
  for (auto kind : {ArchKind::Mlp, ArchKind::SmallCnn}) {
    ArchSpec a = tiny_mlp();
    a.kind = kind;
    if (kind == ArchKind::SmallCnn) a.channels = {2};
    auto m = randomized(a, rng);
    auto batch = random_batch(rng, a, 2);
    auto cfg = harmonizer_config(1.5, 1e-3, 2);
    auto og = harmonization_objective(a, 2, cfg);
    Bindings bind = m.params;
    training::bind_images_and_targets(a, batch, 0.0, bind);
    std::vector<double> oh(2 * a.num_classes, 0.0);
    for (std::size_t i = 0; i < 2; ++i) oh[i * a.num_classes + batch[i].label] = 1;
    bind.insert_or_assign("onehot", Tensor({2, a.num_classes}, oh));
    bind_alignment_targets(batch, cfg, bind);
    auto rep = finite_difference_check(og.graph, bind, og.total, m.param_order);
    CHECK(rep.checked > 0);
    CHECK(rep.max_rel_error < 1e-3);
  }
}

TEST_CASE("zero lambda1 training is bitwise the control run") {
  SyntheticSpec s;
  s.train_per_class = 12;
  s.test_per_class = 1;
  s.height = s.width = 8;
  s.patch = 4;
  auto d = generate_synthetic_dataset(s);
  ArchSpec a = tiny_mlp();
  a.height = a.width = 8;
  a.num_classes = 4;
  auto init = build_classifier(a, 3);
  TrainConfig tc;
  tc.epochs = 2;
  tc.seed = 9;
  auto control = train_crossentropy(init, d.train, tc);
  HarmonizerConfig hc;
  hc.lambda1 = 0.0;
  hc.train = tc;
  auto harm = harmonize_train(init, d.train, hc);
  CHECK(harm.model.params == control.model.params);

  AdversarialTrainConfig ac;
  ac.epsilon = 0.0;
  ac.train = tc;
  auto adv = adversarial_train(init, d.train, ac);
  CHECK(adv.model.params == control.model.params);

  hc.lambda1 = 0.5;
  auto moved = harmonize_train(init, d.train, hc);
  CHECK_FALSE(moved.model.params == control.model.params);
  CHECK(moved.model.has_tag("harmonized"));
  CHECK(moved.trace.back().alignment > 0.0);
}

TEST_CASE("harmonized training needs maps") {
  SyntheticSpec s;
  s.train_per_class = 4;
  s.test_per_class = 1;
  auto d = generate_synthetic_dataset(s);
  for (auto& it : d.train.items) it.map.reset();
  ArchSpec a = tiny_mlp();
  a.height = a.width = 16;
  a.num_classes = 4;
  HarmonizerConfig hc;
  CHECK_THROWS_AS(harmonize_train(build_classifier(a, 1), d.train, hc), ValidationError);
}

TEST_CASE("config validation and round trip") {
  auto c = harmonizer_config(2.0, 0.01, 4);
  c.squared_distance = true;
  c.variance_floor = 1e-4;
  auto back = harmonizer_config_from_json(to_json(c));
  CHECK(back.lambda1 == 2.0);
  CHECK(back.train.weight_decay == 0.01);
  CHECK(back.levels == 4);
  CHECK(back.squared_distance);
  CHECK(back.variance_floor == 1e-4);
  c.lambda1 = -1;
  CHECK_THROWS_AS(validate(c), ValidationError);
}
