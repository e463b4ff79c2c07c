#pragma once

// Synthetic embedding sets for classifier and service tests.

#include <cstdint>

#include "cellflow/classifier.hpp"

namespace cellflow::testing {

double normal(Rng& rng);

/// `classes` isotropic Gaussian clusters in `dim` dimensions. Cluster centres sit `separation`
/// apart along distinct axes, with unit noise. Every fifth sample goes to validation.
LabeledCellSet gaussian_blobs(std::size_t n, int dim, int classes, double separation, std::uint64_t seed);

}  // namespace cellflow::testing
