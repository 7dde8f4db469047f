#include "advalign/pyramid.hpp"

#include <cmath>

#include "advalign/errors.hpp"

namespace advalign {

namespace {

constexpr double kTaps[5] = {1.0 / 16, 4.0 / 16, 6.0 / 16, 4.0 / 16, 1.0 / 16};

std::size_t reflect101(long i, std::size_t n) {
  if (n == 1) return 0;
  const long period = 2 * (static_cast<long>(n) - 1);
  i %= period;
  if (i < 0) i += period;
  if (i >= static_cast<long>(n)) i = period - i;
  return static_cast<std::size_t>(i);
}

void require_map(const Tensor& map) {
  if (map.rank() != 2) throw ShapeError("expected an [H, W] map, got " + shape_str(map.shape()));
}

}  // namespace

Tensor binomial_blur(const Tensor& map) {
  require_map(map);
  const std::size_t H = map.shape()[0], W = map.shape()[1];
  std::vector<double> rows(H * W), out(H * W);
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c) {
      double s = 0.0;
      for (int k = 0; k < 5; ++k) s += kTaps[k] * map[r * W + reflect101(long(c) + k - 2, W)];
      rows[r * W + c] = s;
    }
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c) {
      double s = 0.0;
      for (int k = 0; k < 5; ++k) s += kTaps[k] * rows[reflect101(long(r) + k - 2, H) * W + c];
      out[r * W + c] = s;
    }
  return Tensor({H, W}, std::move(out));
}

Tensor pyramid_down(const Tensor& map) {
  auto blurred = binomial_blur(map);
  const std::size_t H = map.shape()[0], W = map.shape()[1];
  const std::size_t h = (H + 1) / 2, w = (W + 1) / 2;
  std::vector<double> out(h * w);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) out[r * w + c] = blurred[(2 * r) * W + 2 * c];
  return Tensor({h, w}, std::move(out));
}

Tensor pyramid_down_matrix(std::size_t height, std::size_t width) {
  const std::size_t n = height * width;
  const std::size_t m = ((height + 1) / 2) * ((width + 1) / 2);
  std::vector<double> mat(m * n, 0.0);
  std::vector<double> basis(n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    basis[j] = 1.0;
    auto col = pyramid_down(Tensor({height, width}, basis));
    for (std::size_t i = 0; i < m; ++i) mat[i * n + j] = col[i];
    basis[j] = 0.0;
  }
  return Tensor({m, n}, std::move(mat));
}

Pyramid gaussian_pyramid(const Tensor& map, std::size_t levels) {
  require_map(map);
  if (levels == 0) throw ValidationError("pyramid needs at least one level");
  Pyramid p;
  p.levels.push_back(map);
  while (p.levels.size() < levels) {
    const auto& last = p.levels.back();
    if (last.shape()[0] == 1 && last.shape()[1] == 1) {
      p.truncated = true;
      p.warning = "pyramid truncated at " + std::to_string(p.levels.size()) + " of " +
                  std::to_string(levels) + " levels (reached 1x1)";
      break;
    }
    p.levels.push_back(pyramid_down(last));
  }
  return p;
}

Tensor z_normalize(const Tensor& map) {
  const auto v = map.data();
  bool constant = true;
  for (double x : v) constant = constant && x == v[0];
  if (constant) return Tensor::zeros(map.shape());
  const double n = static_cast<double>(v.size());
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= n;
  std::vector<double> out(v.size());
  double var = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = v[i] - mean;
    var += out[i] * out[i];
  }
  var /= n;
  const double inv = var == 0.0 ? 0.0 : 1.0 / std::sqrt(var);
  for (double& x : out) x *= inv;
  return Tensor(map.shape(), std::move(out));
}

}  // namespace advalign
