#pragma once

#include <vector>

#include "advalign/graph.hpp"

namespace advalign::detail {

// Flat index into x of the (first) maximum for each element of `out`.
std::vector<std::size_t> max_indices(const Tensor& x, const OpAttrs& at, const Shape& out);

}  // namespace advalign::detail
