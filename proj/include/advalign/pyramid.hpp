#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "advalign/tensor.hpp"

namespace advalign {

// Separable 5-tap binomial blur [1,4,6,4,1]/16 over a [H, W] map with
// reflect-101 boundary handling.
Tensor binomial_blur(const Tensor& map);

// Blur then keep even rows/columns: [H, W] -> [ceil(H/2), ceil(W/2)].
Tensor pyramid_down(const Tensor& map);

// Dense matrix D with vec(pyramid_down(m)) = D * vec(m), shape
// [ceil(H/2)*ceil(W/2), H*W].
Tensor pyramid_down_matrix(std::size_t height, std::size_t width);

struct Pyramid {
  std::vector<Tensor> levels;  // levels[0] is the input map
  bool truncated = false;      // fewer levels than requested (1x1 reached)
  std::string warning;
};

Pyramid gaussian_pyramid(const Tensor& map, std::size_t levels);

// Zero mean, unit population std; a constant map maps to all zeros.
Tensor z_normalize(const Tensor& map);

}  // namespace advalign
