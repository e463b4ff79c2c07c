#include "support/fixtures.hpp"

#include <cmath>
#include <string>

namespace cellflow::testing {

double normal(Rng& rng) {
  // Box-Muller on the portable uniform.
  const double u1 = 1.0 - unit_uniform(rng);
  const double u2 = unit_uniform(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

LabeledCellSet gaussian_blobs(std::size_t n, int dim, int classes, double separation, std::uint64_t seed) {
  Rng rng(seed);
  LabeledCellSet set;
  for (int c = 0; c < classes; ++c) set.class_names.push_back("class" + std::to_string(c));
  set.encoder = "synthetic";
  std::vector<float> v(static_cast<std::size_t>(dim));
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % static_cast<std::size_t>(classes));
    for (int k = 0; k < dim; ++k) {
      const double centre = (k % classes == label) ? separation : 0.0;
      v[static_cast<std::size_t>(k)] = static_cast<float>(centre + normal(rng));
    }
    const std::string id = "cell" + std::to_string(i);
    (i % 5 == 4 ? set.val : set.train).push(v, label, id);
  }
  return set;
}

}  // namespace cellflow::testing
