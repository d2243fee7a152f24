#pragma once

#include <cstdint>

#include "dyngrain/grained_coding.hpp"
#include "dyngrain/tensor.hpp"

namespace dyngrain::oracle {

/// Direct double loop over tiles, pixels and bins: no sorting, no cutoff.
EntropyMap naive_entropy_map(const Tensor& gray, std::int64_t region_size, double sigma = 0.01);

}  // namespace dyngrain::oracle
