#include <cmath>

#include "advalign/errors.hpp"
#include "advalign/pyramid.hpp"
#include "advalign/rng.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace advalign;
using advalign::testing::max_abs_diff;
using advalign::testing::random_tensor;

namespace {

// Mirror index without repeating the edge sample.
long mirror(long i, long n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
  return i;
}

// Full 2-D 5x5 binomial convolution, then every second sample.
Tensor down_oracle(const Tensor& m) {
  const double k[5] = {1, 4, 6, 4, 1};
  const long H = long(m.shape()[0]), W = long(m.shape()[1]);
  const long h = (H + 1) / 2, w = (W + 1) / 2;
  std::vector<double> out(h * w);
  for (long r = 0; r < h; ++r)
    for (long c = 0; c < w; ++c) {
      double s = 0.0;
      for (long i = -2; i <= 2; ++i)
        for (long j = -2; j <= 2; ++j)
          s += k[i + 2] * k[j + 2] / 256.0 * m[mirror(2 * r + i, H) * W + mirror(2 * c + j, W)];
      out[r * w + c] = s;
    }
  return Tensor({std::size_t(h), std::size_t(w)}, out);
}

}  // namespace

TEST_CASE("constant map stays constant at every level") {
  auto p = gaussian_pyramid(Tensor::filled({13, 10}, 0.375), 5);
  REQUIRE(p.levels.size() == 5);
  for (const auto& lv : p.levels)
    for (double v : lv.data()) CHECK(v == 0.375);
}

TEST_CASE("level 0 is the input and sizes halve with ceiling") {
  Rng rng(1);
  auto m = random_tensor(rng, {9, 7});
  auto one = gaussian_pyramid(m, 1);
  REQUIRE(one.levels.size() == 1);
  CHECK(one.levels[0] == m);
  auto p = gaussian_pyramid(m, 4);
  CHECK(p.levels[1].shape() == Shape{5, 4});
  CHECK(p.levels[2].shape() == Shape{3, 2});
  CHECK(p.levels[3].shape() == Shape{2, 1});
  CHECK_FALSE(p.truncated);
}

TEST_CASE("deep pyramids truncate at 1x1 with a warning") {
  auto p = gaussian_pyramid(Tensor::filled({4, 4}, 1.0), 10);
  CHECK(p.levels.size() == 3);
  CHECK(p.truncated);
  CHECK_FALSE(p.warning.empty());
  CHECK_THROWS_AS(gaussian_pyramid(Tensor::filled({4, 4}, 1.0), 0), ValidationError);
}

TEST_CASE("centered impulse matches the direct 2-D convolution") {
  std::vector<double> v(81, 0.0);
  v[40] = 1.0;
  Tensor m({9, 9}, v);
  auto p = gaussian_pyramid(m, 2);
  CHECK(max_abs_diff(p.levels[1], down_oracle(m)) < 1e-15);
  // the centre of the 5x5 level carries 36/256
  CHECK(p.levels[1][12] == doctest::Approx(36.0 / 256.0).epsilon(1e-15));
}

TEST_CASE("random maps match the oracle, including odd edges") {
  Rng rng(2);
  for (auto shape : {Shape{1, 1}, Shape{2, 3}, Shape{7, 5}, Shape{16, 16}}) {
    auto m = random_tensor(rng, shape, 0, 1);
    CHECK(max_abs_diff(pyramid_down(m), down_oracle(m)) < 1e-14);
  }
}

TEST_CASE("downsampling matrix reproduces pyramid_down") {
  Rng rng(3);
  auto m = random_tensor(rng, {6, 5});
  auto D = pyramid_down_matrix(6, 5);
  REQUIRE(D.shape() == Shape{9, 30});
  auto expect = pyramid_down(m);
  for (std::size_t i = 0; i < 9; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 30; ++j) s += D[i * 30 + j] * m[j];
    CHECK(s == doctest::Approx(expect[i]).epsilon(1e-14));
  }
  // rows are kernel weights and sum to one
  for (std::size_t i = 0; i < 9; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 30; ++j) s += D[i * 30 + j];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-15));
  }
}

TEST_CASE("z-normalization") {
  auto z = z_normalize(Tensor({2}, {1, 3}));
  CHECK(z == Tensor({2}, {-1, 1}));
  CHECK(z_normalize(Tensor::filled({3, 3}, 0.1)) == Tensor::zeros({3, 3}));

  Rng rng(4);
  for (int t = 0; t < 20; ++t) {
    auto m = random_tensor(rng, {1 + rng.below(9), 1 + rng.below(9)}, -5, 5);
    if (m.size() < 2) continue;
    auto zn = z_normalize(m);
    double mean = 0.0, var = 0.0;
    for (double v : zn.data()) mean += v;
    mean /= zn.size();
    for (double v : zn.data()) var += (v - mean) * (v - mean);
    var /= zn.size();
    CHECK(std::abs(mean) < 1e-9);
    CHECK(std::sqrt(var) == doctest::Approx(1.0).epsilon(1e-12));
  }
}
