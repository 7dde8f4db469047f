#pragma once

#include <span>
#include <string>
#include <vector>

#include "advalign/attacks.hpp"

namespace advalign {

// [H, W, C] perturbation -> [H, W] map of max_c |delta|.
ImportanceMap perturbation_map(const Tensor& delta);

// 1-based ranks; tied values share the mean of their positions.
std::vector<double> average_ranks(std::span<const double> v);

// Pearson correlation of average ranks. Throws DegenerateInputError when
// either operand is constant.
double spearman_rho(std::span<const double> a, std::span<const double> b);

struct AlignmentScore {
  std::vector<std::string> ids;  // scored images, input order
  std::vector<double> rho;
  double mean = 0.0;
  std::size_t degenerate = 0;     // constant perturbation or importance map
  std::size_t unsuccessful = 0;   // attack did not succeed
  std::size_t missing_map = 0;
};

// Scores attacks[i] against data.items[i].map.
AlignmentScore adversarial_alignment(const Dataset& data, std::span<const AttackResult> attacks);

}  // namespace advalign
