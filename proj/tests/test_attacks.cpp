#include <cmath>

#include "advalign/attacks.hpp"
#include "doctest.h"
#include "linear_models.hpp"
#include "test_util.hpp"

using namespace advalign;
using advalign::testing::make_linear_case;
using advalign::testing::random_tensor;

namespace {

Tensor vec(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor({n}, std::move(v));
}

ArchSpec tiny_cnn() {
  ArchSpec a;
  a.kind = ArchKind::SmallCnn;
  a.channels = {4};
  a.height = 8;
  a.width = 8;
  a.in_channels = 2;
  a.num_classes = 3;
  return a;
}

}  // namespace

TEST_CASE("l2 projection examples") {
  CHECK(project_l2(vec({3, 4}), 5) == vec({3, 4}));
  auto p = project_l2(vec({6, 8}), 5);
  CHECK(p[0] == doctest::Approx(3.0).epsilon(1e-15));
  CHECK(p[1] == doctest::Approx(4.0).epsilon(1e-15));
  Rng rng(1);
  CHECK(project_l2(random_tensor(rng, {7}), 0.0) == Tensor::zeros({7}));
}

TEST_CASE("linf projection examples") {
  CHECK(project_linf(vec({0.5, -2}), 1) == vec({0.5, -1}));
  CHECK(project_linf(vec({0.5, -0.25}), 1) == vec({0.5, -0.25}));
  CHECK(project_linf(vec({0.5, -0.25}), 0) == Tensor::zeros({2}));
}

TEST_CASE("pixel clamping") {
  auto c = clamp_pixels(vec({300, -5, 17}), {0, 255});
  CHECK(c == vec({255, 0, 17}));
  CHECK(clamp_pixels(Tensor::zeros({4}), {0, 255}) == Tensor::zeros({4}));
  CHECK_THROWS_AS(clamp_pixels(Tensor::zeros({4}), {1, 1}), ValidationError);
}

TEST_CASE("projections are idempotent, bounded and nearest") {
  Rng rng(2);
  for (int t = 0; t < 300; ++t) {
    const std::size_t n = 1 + rng.below(12);
    auto d = random_tensor(rng, {n}, -3, 3);
    const double eps = rng.uniform(0.0, 4.0);
    auto p2 = project_l2(d, eps);
    auto pi = project_linf(d, eps);
    CHECK(project_l2(p2, eps) == p2);
    CHECK(project_linf(pi, eps) == pi);
    CHECK(l2_norm(p2) <= eps + 1e-9);
    CHECK(linf_norm(pi) <= eps + 1e-9);
    // the l2 projection beats every scaling of d that lies in the ball
    double dist = 0.0;
    for (std::size_t i = 0; i < n; ++i) dist += (p2[i] - d[i]) * (p2[i] - d[i]);
    for (int k = 0; k <= 200; ++k) {
      const double s = k / 200.0;
      Tensor q = d;
      for (std::size_t i = 0; i < n; ++i) q[i] *= s;
      if (l2_norm(q) > eps) continue;
      double dq = 0.0;
      for (std::size_t i = 0; i < n; ++i) dq += (q[i] - d[i]) * (q[i] - d[i]);
      CHECK(std::sqrt(dist) <= std::sqrt(dq) + 1e-9);
    }
  }
}

TEST_CASE("attack config validation and defaults") {
  AttackConfig c;
  CHECK(c.steps == 3);
  CHECK(c.range == PixelRange{0, 255});
  c.epsilon = 3.0;
  CHECK(resolved_step_size(c) == doctest::Approx(2.5));
  c.epsilon = -1;
  CHECK_THROWS_AS(validate(c), ValidationError);
  c.epsilon = 1;
  c.steps = 0;
  CHECK_THROWS_AS(validate(c), ValidationError);
  c.steps = 3;
  auto back = attack_config_from_json(to_json(c));
  CHECK(back.epsilon == c.epsilon);
  CHECK(back.norm == c.norm);
}

TEST_CASE("zero radius leaves the image untouched") {
  Rng rng(3);
  auto lc = make_linear_case(rng, 3.0);
  AttackConfig c;
  c.epsilon = 0.0;
  auto r = pgd_attack(lc.model, lc.image, lc.label, c);
  CHECK(r.delta == Tensor::zeros(lc.image.shape()));
  CHECK_FALSE(r.success);
  CHECK(r.l2_distortion == 0.0);
}

TEST_CASE("linear model flips exactly beyond the analytic distance") {
  Rng rng(4);
  for (int t = 0; t < 20; ++t) {
    auto lc = make_linear_case(rng, rng.uniform(1.0, 9.0));
    AttackConfig c;
    c.epsilon = lc.distance * 1.02;
    auto above = pgd_attack(lc.model, lc.image, lc.label, c);
    CHECK(above.success);
    CHECK(above.predicted != lc.label);
    c.epsilon = lc.distance * 0.98;
    CHECK_FALSE(pgd_attack(lc.model, lc.image, lc.label, c).success);
  }
}

TEST_CASE("attack results respect the ball and the pixel range") {
  Rng rng(5);
  auto m = build_classifier(tiny_cnn(), 5);
  for (int t = 0; t < 30; ++t) {
    auto img = random_tensor(rng, {8, 8, 2}, 0, 255);
    // push some pixels onto the range edges
    img[0] = 0;
    img[1] = 255;
    AttackConfig c;
    c.norm = t % 2 ? Norm::Linf : Norm::L2;
    c.epsilon = rng.uniform(0.0, 60.0);
    c.steps = 1 + int(rng.below(5));
    auto r = pgd_attack(m, img, int(rng.below(3)), c);
    const double n = c.norm == Norm::L2 ? l2_norm(r.delta) : linf_norm(r.delta);
    CHECK(n <= c.epsilon + 1e-9);
    for (double v : r.adversarial.data()) CHECK((v >= 0.0 && v <= 255.0));
    double d2 = 0.0;
    for (std::size_t i = 0; i < img.size(); ++i) {
      const double d = r.adversarial[i] - img[i];
      CHECK(d == r.delta[i]);
      d2 += d * d;
    }
    CHECK(r.l2_distortion == doctest::Approx(std::sqrt(d2)).epsilon(1e-14));
    CHECK(r.step_norms.size() == std::size_t(c.steps));
  }
}

TEST_CASE("success means the adversarial image is misclassified") {
  Rng rng(6);
  auto m = build_classifier(tiny_cnn(), 6);
  int successes = 0;
  for (int t = 0; t < 30; ++t) {
    auto img = random_tensor(rng, {8, 8, 2}, 0, 255);
    const int label = predict(m, img).label;
    AttackConfig c;
    c.epsilon = 40;
    auto r = pgd_attack(m, img, label, c);
    CHECK(predict(m, r.adversarial).label == r.predicted);
    CHECK(r.success == (r.predicted != label));
    successes += r.success;
  }
  CHECK(successes > 0);
}

TEST_CASE("a flat model gives no gradient and no success") {
  auto m = build_classifier(tiny_cnn(), 7);
  for (auto& [_, t] : m.params) t = Tensor::zeros(t.shape());
  Rng rng(7);
  auto img = random_tensor(rng, {8, 8, 2}, 0, 255);
  AttackConfig c;
  c.epsilon = 10;
  auto r = pgd_attack(m, img, 0, c);
  CHECK_FALSE(r.success);
  CHECK(r.delta == Tensor::zeros(img.shape()));
}

TEST_CASE("warm starting keeps success monotone in epsilon") {
  Rng rng(8);
  auto m = build_classifier(tiny_cnn(), 8);
  int checked = 0;
  for (int t = 0; t < 40; ++t) {
    auto img = random_tensor(rng, {8, 8, 2}, 0, 255);
    const int label = predict(m, img).label;
    AttackConfig c;
    c.norm = t % 2 ? Norm::Linf : Norm::L2;
    c.epsilon = c.norm == Norm::L2 ? rng.uniform(5, 40) : rng.uniform(0.5, 4);
    auto first = pgd_attack(m, img, label, c);
    if (!first.success) continue;
    ++checked;
    for (double grow : {1.01, 1.5, 3.0}) {
      AttackConfig c2 = c;
      c2.epsilon = c.epsilon * grow;
      CHECK(pgd_attack(m, img, label, c2, &first.delta).success);
    }
  }
  CHECK(checked > 5);
}

TEST_CASE("cw finds near-minimal perturbations on linear models") {
  Rng rng(9);
  for (int t = 0; t < 10; ++t) {
    auto lc = make_linear_case(rng, rng.uniform(1.0, 9.0));
    CwConfig cw;
    cw.c = 50.0;
    cw.steps = 1000;
    cw.learning_rate = 0.001;
    auto r = cw_l2_attack(lc.model, lc.image, lc.label, cw);
    REQUIRE(r.success);
    CHECK(predict(lc.model, r.adversarial).label != lc.label);
    CHECK(std::abs(r.l2_distortion - lc.distance) <= 0.1 * lc.distance);
    CHECK(r.l2_distortion >= lc.distance * (1 - 1e-9));

    AttackConfig pc;
    pc.epsilon = lc.distance * 1.05;
    auto p = pgd_attack(lc.model, lc.image, lc.label, pc);
    REQUIRE(p.success);
    CHECK(p.l2_distortion >= 0.9 * r.l2_distortion);
  }
}

TEST_CASE("cw validation") {
  CwConfig c;
  c.c = 0;
  CHECK_THROWS_AS(validate(c), ValidationError);
  c.c = 1;
  c.steps = 0;
  CHECK_THROWS_AS(validate(c), ValidationError);
}
