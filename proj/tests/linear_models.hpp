#pragma once

#include <cmath>

#include "advalign/models.hpp"
#include "advalign/rng.hpp"

namespace advalign::testing {

// Two-class linear classifier on a small single-channel image: the logit
// difference z1 - z0 is w.x + b, so the minimal l2 distance to the decision
// boundary is |w.x + b| / |w|.
struct LinearCase {
  Model model;
  Image image;
  int label = 0;
  double distance = 0.0;
};

inline LinearCase make_linear_case(Rng& rng, double distance, std::size_t side = 4) {
  ArchSpec a;
  a.kind = ArchKind::Mlp;
  a.height = side;
  a.width = side;
  a.num_classes = 2;
  LinearCase c;
  c.model = build_classifier(a, rng.next());
  const std::size_t n = side * side;
  std::vector<double> w(n), x(n), W(2 * n);
  double wx = 0.0, ww = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    w[i] = rng.uniform(-1.0, 1.0);
    x[i] = rng.uniform(100.0, 155.0);
    wx += w[i] * x[i];
    ww += w[i] * w[i];
    W[2 * i] = -0.5 * w[i];
    W[2 * i + 1] = 0.5 * w[i];
  }
  c.label = rng.uniform() < 0.5 ? 0 : 1;
  const double sign = c.label == 1 ? 1.0 : -1.0;
  const double b = sign * distance * std::sqrt(ww) - wx;
  c.model.params.at("fc0.weight") = Tensor({n, 2}, W);
  c.model.params.at("fc0.bias") = Tensor({2}, {-0.5 * b, 0.5 * b});
  c.image = Tensor({side, side, 1}, x);
  c.distance = distance;
  return c;
}

}  // namespace advalign::testing
