#include <random>

#include "doctest.h"

#include "cellflow/geometry.hpp"
#include "support/scenes.hpp"

using namespace cellflow;

TEST_CASE("mask basics") {
  LabelRaster labels(6, 6, 1, 0u);
  labels(1, 1) = labels(1, 2) = labels(2, 1) = 4;
  labels(4, 4) = 5;
  const auto m = PixelMask::from_label(labels, 4);
  CHECK(m.area() == 3);
  CHECK(m.bbox() == Rect{1, 1, 3, 3});
  CHECK(m.contains(1, 2));
  CHECK_FALSE(m.contains(2, 2));
  CHECK(m.centroid().row == doctest::Approx(4.0 / 3));
  const auto t = m.translated(10, 20);
  CHECK(t.contains(11, 22));
  CHECK(t.area() == 3);
  CHECK(intersection_area(m, PixelMask::from_label(labels, 5)) == 0);
  CHECK(mask_iou(m, m) == 1.0);
  CHECK(PixelMask::from_label(labels, 9).empty());
}

TEST_CASE("single pixel contour") {
  LabelRaster labels(3, 3, 1, 0u);
  labels(1, 1) = 1;
  const auto ring = trace_contour(PixelMask::from_label(labels, 1));
  REQUIRE(ring.size() == 4);
  CHECK(ring[0] == Point{0.5, 0.5});
  CHECK(polygon_area(ring) == 1.0);
  CHECK(is_simple_polygon(ring));
}

TEST_CASE("contours of random discs rasterise back to the mask") {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    LabelRaster labels(48, 48, 1, 0u);
    cellflow::testing::paint_disc(labels,
                                  {cellflow::testing::uniform(rng, 12, 36), cellflow::testing::uniform(rng, 12, 36),
                                   cellflow::testing::uniform(rng, 0.8, 11)},
                                  1);
    const auto mask = PixelMask::from_label(labels, 1);
    if (mask.empty()) continue;
    const auto ring = trace_contour(mask);
    CHECK(is_simple_polygon(ring));
    CHECK(polygon_area(ring) == doctest::Approx(static_cast<double>(mask.area())));
    CHECK(rasterize_polygon(ring) == mask);
  }
}

TEST_CASE("contour follows the outer boundary of an L shape") {
  LabelRaster labels(5, 5, 1, 0u);
  for (int r = 1; r < 4; ++r) labels(r, 1) = 1;
  labels(3, 2) = labels(3, 3) = 1;
  const auto mask = PixelMask::from_label(labels, 1);
  const auto ring = trace_contour(mask);
  CHECK(ring.size() == 6);
  CHECK(polygon_area(ring) == 5.0);
  CHECK(rasterize_polygon(ring) == mask);
}

TEST_CASE("diagonal pinch is traced as one ring") {
  LabelRaster labels(4, 4, 1, 0u);
  labels(1, 1) = labels(2, 2) = 1;
  const auto ring = trace_contour(PixelMask::from_label(labels, 1));
  CHECK(polygon_area(ring) == 2.0);
  CHECK(is_simple_polygon(ring));
}

TEST_CASE("self-intersecting rings are detected") {
  const std::vector<Point> bowtie{{0, 0}, {2, 2}, {0, 2}, {2, 0}};
  CHECK_FALSE(is_simple_polygon(bowtie));
  const std::vector<Point> square{{0, 0}, {0, 2}, {2, 2}, {2, 0}};
  CHECK(is_simple_polygon(square));
  CHECK(polygon_area(square) == 4.0);
  const std::vector<Point> spike{{0, 0}, {0, 4}, {0, 2}, {2, 2}};
  CHECK_FALSE(is_simple_polygon(spike));
}
