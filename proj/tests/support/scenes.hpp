#pragma once

// Synthetic nucleus scenes shared by unit and acceptance tests.

#include <cstdint>
#include <random>
#include <vector>

#include "cellflow/postproc.hpp"

namespace cellflow::testing {

struct Disc {
  double row = 0;
  double col = 0;
  double radius = 0;
};

/// Uniform double in [lo, hi) built directly from generator bits (portable across standard libraries).
inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

struct Scene {
  LabelRaster labels;
  std::vector<Disc> discs;  // disc k carries id k + 1
};

/// Paints `disc` with `id` wherever the pixel center lies within the radius and the pixel is free.
void paint_disc(LabelRaster& labels, const Disc& disc, std::uint32_t id);

/// Random non-overlapping discs; centres are at least r1 + r2 + gap apart and at least `margin`
/// pixels inside the border.
Scene random_disc_scene(int rows, int cols, int count, double rmin, double rmax, std::uint64_t seed, double gap = 1.0,
                        double margin = 2.0);

/// Two discs whose overlap is split along the perpendicular bisector of their centres, so the pair
/// touches along a straight line.
Scene touching_pair(int rows, int cols, const Disc& a, const Disc& b);

}  // namespace cellflow::testing
