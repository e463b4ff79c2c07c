#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "doctest.h"

#include "cellflow/metrics.hpp"
#include "cellflow/postproc.hpp"
#include "support/scenes.hpp"

using namespace cellflow;
using cellflow::testing::Disc;

namespace {

double best_iou_for(const LabelRaster& pred, const LabelRaster& gt, std::uint32_t gt_id) {
  double best = 0.0;
  for (const auto& p : overlap_pairs(pred, gt)) {
    if (p.gt == gt_id) best = std::max(best, p.iou);
  }
  return best;
}

}  // namespace

TEST_CASE("all-zero NP map yields no instances") {
  ProbMaps maps{FloatRaster(32, 32, 1, 0.0f), FloatRaster(32, 32, 1, 0.0f), FloatRaster(32, 32, 1, 0.0f), std::nullopt};
  CHECK(postprocess(maps).count() == 0);
}

TEST_CASE("postprocess rejects empty and mismatched maps") {
  ProbMaps empty{FloatRaster(0, 4), FloatRaster(0, 4), FloatRaster(0, 4), std::nullopt};
  CHECK_THROWS_AS(postprocess(empty), Error);
  try {
    postprocess(empty);
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::EmptyInput);
  }
  ProbMaps bad{FloatRaster(8, 8), FloatRaster(8, 7), FloatRaster(8, 8), std::nullopt};
  try {
    postprocess(bad);
    FAIL("expected ShapeMismatch");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ShapeMismatch);
  }
}

TEST_CASE("encode_targets on degenerate inputs") {
  SUBCASE("empty map gives all-zero targets") {
    const auto maps = encode_targets(InstanceMap(LabelRaster(10, 12, 1, 0u)));
    for (float v : maps.np.data()) CHECK(v == 0.0f);
    for (float v : maps.horizontal.data()) CHECK(v == 0.0f);
    for (float v : maps.vertical.data()) CHECK(v == 0.0f);
  }
  SUBCASE("single pixel instance") {
    LabelRaster labels(5, 5, 1, 0u);
    labels(2, 3) = 7;
    const auto maps = encode_targets(InstanceMap(labels));
    CHECK(maps.np(2, 3) == 1.0f);
    CHECK(maps.horizontal(2, 3) == 0.0f);
    CHECK(maps.vertical(2, 3) == 0.0f);
  }
}

TEST_CASE("horizontal channel of a symmetric disc is antisymmetric about the centroid column") {
  LabelRaster labels(41, 41, 1, 0u);
  cellflow::testing::paint_disc(labels, Disc{20, 20, 12}, 1);
  const auto maps = encode_targets(InstanceMap(labels));
  float max_abs = 0.0f;
  for (int r = 0; r < 41; ++r) {
    for (int d = 0; d <= 12; ++d) {
      if (labels(r, 20 + d) == 0) continue;
      // Direct evaluation of (col - centroid) / max |col - centroid|.
      CHECK(maps.horizontal(r, 20 + d) == doctest::Approx(d / 12.0).epsilon(1e-6));
      CHECK(maps.horizontal(r, 20 - d) == doctest::Approx(-maps.horizontal(r, 20 + d)).epsilon(1e-6));
      max_abs = std::max(max_abs, std::abs(maps.horizontal(r, 20 + d)));
    }
  }
  CHECK(max_abs == doctest::Approx(1.0f));
}

TEST_CASE("single encoded disc is recovered") {
  LabelRaster labels(64, 64, 1, 0u);
  cellflow::testing::paint_disc(labels, Disc{31.5, 30.2, 12}, 1);
  const auto inst = postprocess(encode_targets(InstanceMap(labels)));
  REQUIRE(inst.count() == 1);
  CHECK(best_iou_for(inst.labels(), labels, 1) >= 0.95);
}

TEST_CASE("two discs touching along a line are split") {
  const auto scene = cellflow::testing::touching_pair(80, 96, Disc{40, 32, 14}, Disc{41, 54, 13});
  const auto inst = postprocess(encode_targets(InstanceMap(scene.labels)));
  REQUIRE(inst.count() == 2);
  CHECK(best_iou_for(inst.labels(), scene.labels, 1) >= 0.90);
  CHECK(best_iou_for(inst.labels(), scene.labels, 2) >= 0.90);
}

TEST_CASE("round trip over random scenes keeps bPQ >= 0.95") {
  for (std::uint64_t seed = 1; seed <= 8; ++seed) {
    const auto scene = cellflow::testing::random_disc_scene(256, 256, 40, 5, 20, seed);
    const InstanceMap gt(scene.labels);
    const auto inst = postprocess(encode_targets(gt));
    const auto r = pq(inst.labels(), scene.labels);
    INFO("seed " << seed << " gt " << gt.count() << " pred " << inst.count());
    CHECK(r.pq >= 0.95);
  }
}

TEST_CASE("instances respect marker and threshold invariants") {
  const auto scene = cellflow::testing::random_disc_scene(200, 200, 25, 5, 20, 77);
  auto maps = encode_targets(InstanceMap(scene.labels));
  PostprocTrace trace;
  const auto inst = postprocess(maps, {}, &trace);
  CHECK(inst.count() <= trace.marker_count);
  std::set<std::uint32_t> with_marker;
  for (std::size_t i = 0; i < inst.labels().data().size(); ++i) {
    const std::uint32_t id = inst.labels().data()[i];
    if (id == 0) continue;
    CHECK(maps.np.data()[i] >= 0.5f);
    if (trace.markers.data()[i] != 0) with_marker.insert(id);
  }
  CHECK(with_marker.size() == inst.count());
  // Contiguous ids and minimum size.
  for (std::size_t k = 0; k < inst.instances().size(); ++k) {
    CHECK(inst.instances()[k].id == k + 1);
    CHECK(inst.instances()[k].area >= 10);
  }
}

TEST_CASE("each instance is a single 8-connected component") {
  const auto scene = cellflow::testing::random_disc_scene(160, 160, 20, 5, 18, 5, 0.0);
  const auto inst = postprocess(encode_targets(InstanceMap(scene.labels)));
  for (const auto& s : inst.instances()) {
    ByteRaster mask(inst.rows(), inst.cols(), 1, std::uint8_t{0});
    for (std::size_t i = 0; i < mask.data().size(); ++i) mask.data()[i] = inst.labels().data()[i] == s.id;
    std::uint32_t n = 0;
    label_components(mask, Connectivity::Eight, &n);
    CHECK(n == 1);
  }
}

TEST_CASE("postprocess is deterministic and invariant to input id permutation") {
  const auto scene = cellflow::testing::random_disc_scene(128, 128, 15, 5, 16, 11);
  const auto a = postprocess(encode_targets(InstanceMap(scene.labels)));
  const auto b = postprocess(encode_targets(InstanceMap(scene.labels)));
  CHECK(a.labels() == b.labels());

  std::vector<std::uint32_t> perm(scene.discs.size());
  std::iota(perm.begin(), perm.end(), 1u);
  std::mt19937_64 rng(3);
  std::shuffle(perm.begin(), perm.end(), rng);
  LabelRaster permuted = scene.labels;
  for (std::uint32_t& v : permuted.data()) {
    if (v) v = perm[v - 1];
  }
  const auto pa = encode_targets(InstanceMap(scene.labels));
  const auto pb = encode_targets(InstanceMap(permuted));
  CHECK(pa.np == pb.np);
  const auto c = postprocess(pb);
  // Same partition: identical ids after sequential relabelling since both are raster-ordered.
  CHECK(c.labels() == a.labels());
}

TEST_CASE("assign_types averages the type map over instance pixels") {
  LabelRaster labels(4, 4, 1, 0u);
  for (int c = 0; c < 4; ++c) {
    labels(0, c) = 1;
    labels(1, c) = 1;
    labels(3, c) = 2;
  }
  FloatRaster types(4, 4, 3, 0.0f);
  for (int c = 0; c < 4; ++c) {
    types(0, c, 0) = 1.0f;  // half of instance 1 is class 0
    types(1, c, 1) = 1.0f;  // other half class 1
    types(3, c, 2) = 1.0f;  // instance 2 entirely class 2
  }
  const auto dist = assign_types(InstanceMap(labels), types);
  REQUIRE(dist.size() == 2);
  CHECK(dist[0][0] == doctest::Approx(0.5));
  CHECK(dist[0][1] == doctest::Approx(0.5));
  CHECK(dist[0][2] == doctest::Approx(0.0));
  CHECK(dist[1] == std::vector<double>{0.0, 0.0, 1.0});
  CHECK(argmax(dist[1]) == 2);

  CHECK_THROWS_AS(assign_types(InstanceMap(labels), FloatRaster(3, 4, 3)), Error);
}

TEST_CASE("assign_types rows are distributions for random type maps") {
  const auto scene = cellflow::testing::random_disc_scene(64, 64, 6, 4, 10, 9);
  std::mt19937_64 rng(21);
  FloatRaster types(64, 64, 4, 0.0f);
  for (int r = 0; r < 64; ++r) {
    for (int c = 0; c < 64; ++c) {
      double sum = 0.0;
      for (int k = 0; k < 4; ++k) sum += (types(r, c, k) = static_cast<float>(cellflow::testing::uniform(rng, 0.01, 1.0)));
      for (int k = 0; k < 4; ++k) types(r, c, k) = static_cast<float>(types(r, c, k) / sum);
    }
  }
  for (const auto& row : assign_types(InstanceMap(scene.labels), types)) {
    CHECK(std::accumulate(row.begin(), row.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-5));
  }
}
