#include "advalign/alignment.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace advalign {

ImportanceMap perturbation_map(const Tensor& delta) {
  if (delta.rank() != 3) throw ShapeError("perturbation must be [H, W, C], got " + shape_str(delta.shape()));
  const std::size_t h = delta.shape()[0], w = delta.shape()[1], c = delta.shape()[2];
  std::vector<double> out(h * w, 0.0);
  for (std::size_t p = 0; p < h * w; ++p)
    for (std::size_t k = 0; k < c; ++k) out[p] = std::max(out[p], std::abs(delta[p * c + k]));
  return Tensor({h, w}, std::move(out));
}

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double spearman_rho(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("spearman_rho operands differ in length");
  if (a.size() < 2) throw ValidationError("spearman_rho needs at least 2 values");
  auto ra = average_ranks(a), rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  auto tie_free = [](const std::vector<double>& r) {
    std::vector<double> s = r;
    std::sort(s.begin(), s.end());
    return std::adjacent_find(s.begin(), s.end()) == s.end();
  };
  if (tie_free(ra) && tie_free(rb)) {
    double d2 = 0.0;
    for (std::size_t i = 0; i < ra.size(); ++i) d2 += (ra[i] - rb[i]) * (ra[i] - rb[i]);
    return 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
  }
  const double mean = (n + 1.0) / 2.0;  // exact for average ranks
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    const double da = ra[i] - mean, db = rb[i] - mean;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0.0 || sbb == 0.0) throw DegenerateInputError("spearman_rho operand is constant");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

AlignmentScore adversarial_alignment(const Dataset& data, std::span<const AttackResult> attacks) {
  if (attacks.size() != data.size())
    throw ValidationError("one attack result per dataset item is required");
  AlignmentScore s;
  for (std::size_t i = 0; i < attacks.size(); ++i) {
    const auto& item = data.items[i];
    if (!attacks[i].success) {
      ++s.unsuccessful;
      continue;
    }
    if (!item.map) {
      ++s.missing_map;
      continue;
    }
    auto pm = perturbation_map(attacks[i].delta);
    if (pm.shape() != item.map->shape())
      throw ShapeError("perturbation map and importance map differ for item " + item.id);
    try {
      s.rho.push_back(spearman_rho(pm.data(), item.map->data()));
      s.ids.push_back(item.id);
    } catch (const DegenerateInputError&) {
      ++s.degenerate;
    }
  }
  if (s.rho.empty()) {
    if (s.unsuccessful == attacks.size()) throw Error("no successful attacks to score");
    throw Error("no scorable images (" + std::to_string(s.degenerate) + " degenerate, " +
                std::to_string(s.missing_map) + " without maps)");
  }
  double sum = 0.0;
  for (double r : s.rho) sum += r;
  s.mean = sum / static_cast<double>(s.rho.size());
  return s;
}

}  // namespace advalign
