#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include "doctest.h"

#include "cellflow/metrics.hpp"
#include "cellflow/wsi.hpp"
#include "support/scenes.hpp"

using namespace cellflow;
using cellflow::testing::Disc;

namespace {

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return ErrorCode::InvalidArgument;
}

CellInstance disc_cell(const std::string& id, int tile_row, int tile_col, double r, double c, double radius,
                       bool clipped = false) {
  LabelRaster labels(static_cast<int>(r + radius + 3), static_cast<int>(c + radius + 3), 1, 0u);
  cellflow::testing::paint_disc(labels, Disc{r, c, radius}, 1);
  CellInstance cell;
  cell.cell_id = id;
  cell.mask = PixelMask::from_label(labels, 1);
  cell.centroid = cell.mask.centroid();
  cell.area = cell.mask.area();
  cell.tile_row = tile_row;
  cell.tile_col = tile_col;
  cell.instance_id = 1;
  cell.clipped = clipped;
  return cell;
}

}  // namespace

TEST_CASE("4096 slide gets the expected column origins") {
  const auto plan = plan_tiles({4096, 4096});
  CHECK(plan.col_origins == std::vector<int>{0, 960, 1920, 2880, 3072});
  CHECK(plan.row_origins == plan.col_origins);
  CHECK(plan.tiles.size() == 25);
}

TEST_CASE("slides at or below one tile get a single origin") {
  auto plan = plan_tiles({1024, 1024});
  REQUIRE(plan.tiles.size() == 1);
  CHECK(plan.tiles[0].row == 0);
  CHECK(plan.tiles[0].col == 0);
  CHECK(plan.tiles[0].core == Rect{0, 0, 1024, 1024});
  plan = plan_tiles({300, 500});
  REQUIRE(plan.tiles.size() == 1);
  CHECK(plan.extent(plan.tiles[0]) == Rect{0, 0, 500, 300});
}

TEST_CASE("geometry validation") {
  SlideGeometry g{2000, 2000};
  g.tile_edge = 1022;
  g.patch = 14;
  CHECK(1022 % 14 == 0);
  CHECK_NOTHROW(plan_tiles(g));
  g.patch = 16;
  CHECK(code_of([&] { plan_tiles(g); }) == ErrorCode::DegenerateGeometry);
  CHECK(code_of([] { plan_tiles({100, 100, 0.25, 128, 64, 16}); }) == ErrorCode::DegenerateGeometry);
  CHECK(code_of([] { plan_tiles({0, 100}); }) == ErrorCode::DegenerateGeometry);
  CHECK(code_of([] { plan_tiles({100, 100, 0.0}); }) == ErrorCode::DegenerateGeometry);
}

TEST_CASE("cores partition the slide and tiles cover it") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 40; ++trial) {
    SlideGeometry g;
    g.patch = 16;
    g.tile_edge = 16 * static_cast<int>(2 + rng() % 8);
    g.overlap = static_cast<int>(rng() % static_cast<unsigned>(g.tile_edge / 2));
    g.width = static_cast<int>(1 + rng() % 700);
    g.height = static_cast<int>(1 + rng() % 700);
    const auto plan = plan_tiles(g);
    LabelRaster owners(g.height, g.width, 1, 0u);
    LabelRaster covers(g.height, g.width, 1, 0u);
    for (const Tile& t : plan.tiles) {
      for (int r = t.core.row0; r < t.core.row1; ++r) {
        for (int c = t.core.col0; c < t.core.col1; ++c) ++owners(r, c);
      }
      const Rect e = plan.extent(t);
      for (int r = e.row0; r < e.row1; ++r) {
        for (int c = e.col0; c < e.col1; ++c) ++covers(r, c);
      }
      CHECK(e.contains(t.core.row0, t.core.col0));
    }
    INFO("trial " << trial);
    CHECK(std::all_of(owners.data().begin(), owners.data().end(), [](auto v) { return v == 1; }));
    CHECK(std::all_of(covers.data().begin(), covers.data().end(), [](auto v) { return v >= 1; }));
    for (std::size_t i = 1; i < plan.col_origins.size(); ++i) {
      CHECK(plan.col_origins[i] > plan.col_origins[i - 1]);
      if (i + 1 < plan.col_origins.size()) CHECK(plan.col_origins[i] - plan.col_origins[i - 1] == g.tile_edge - g.overlap);
    }
  }
}

TEST_CASE("tile plan JSON round trip") {
  const auto plan = plan_tiles({3000, 2100, 0.5, 512, 32, 16});
  const auto back = tile_plan_from_json(nlohmann::json::parse(to_json(plan).dump()));
  CHECK(back.tiles == plan.tiles);
  CHECK(back.geometry.mpp == 0.5);
}

TEST_CASE("merge examples") {
  const auto plan = plan_tiles({2000, 2000});
  SUBCASE("interior cell passes through") {
    std::vector<TileCells> tiles{{0, 0, {disc_cell("a", 0, 0, 100, 100, 8)}}};
    const auto out = merge_instances(plan, tiles);
    REQUIRE(out.size() == 1);
    CHECK(out[0].cell_id == "a");
    CHECK(out[0].mask == tiles[0].cells[0].mask);
  }
  SUBCASE("identical copies from two tiles collapse") {
    std::vector<TileCells> tiles{{0, 0, {disc_cell("a", 0, 0, 300, 990, 8)}}, {0, 960, {disc_cell("b", 0, 960, 300, 990, 8)}}};
    const auto out = merge_instances(plan, tiles);
    REQUIRE(out.size() == 1);
    // cores meet at column 992, so the copy from the left tile owns the centroid
    CHECK(out[0].cell_id == "a");
  }
  SUBCASE("clipped fragment is dropped in favour of the complete copy") {
    auto frag = disc_cell("frag", 0, 0, 300, 1020, 10, true);
    auto full = disc_cell("full", 0, 960, 300, 1020, 10);
    std::vector<TileCells> tiles{{0, 0, {frag}}, {0, 960, {full}}};
    const auto out = merge_instances(plan, tiles);
    REQUIRE(out.size() == 1);
    CHECK(out[0].cell_id == "full");
  }
  SUBCASE("disjoint cells both survive, ordered by centroid") {
    std::vector<TileCells> tiles{{0, 960, {disc_cell("z", 0, 960, 50, 1500, 6)}}, {0, 0, {disc_cell("y", 0, 0, 400, 20, 6)}}};
    const auto out = merge_instances(plan, tiles);
    REQUIRE(out.size() == 2);
    CHECK(out[0].cell_id == "z");
    CHECK(out[1].cell_id == "y");
  }
  SUBCASE("empty input") { CHECK(merge_instances(plan, {}).empty()); }
}

TEST_CASE("tiled segmentation matches a single pass") {
  const auto scene = cellflow::testing::random_disc_scene(700, 900, 350, 5, 20, 13);
  const InstanceMap gt(scene.labels);
  const ProbMaps maps = encode_targets(gt);
  const InstanceMap whole = postprocess(maps);
  const auto plan = plan_tiles({900, 700, 0.25, 256, 64, 16});
  const auto tiled = segment_tiled(maps, plan, {}, "s");
  CHECK(tiled.size() == whole.count());

  std::vector<char> seen(whole.count() + 1, 0);
  std::size_t matched = 0;
  for (const auto& cell : tiled) {
    double best = 0.0;
    std::uint32_t best_id = 0;
    const Point c = cell.centroid;
    const std::uint32_t id = whole.labels()(static_cast<int>(std::lround(c.row)), static_cast<int>(std::lround(c.col)));
    if (id != 0) {
      best = mask_iou(cell.mask, PixelMask::from_label(whole.labels(), id, whole.find(id)->bbox));
      best_id = id;
    }
    if (best >= 0.95 && !seen[best_id]) {
      seen[best_id] = 1;
      ++matched;
    }
  }
  CHECK(matched == whole.count());

  SUBCASE("merge is idempotent and order independent") {
    std::vector<TileCells> again{{0, 0, tiled}};
    const auto twice = merge_instances(plan, again);
    REQUIRE(twice.size() == tiled.size());
    for (std::size_t i = 0; i < tiled.size(); ++i) CHECK(twice[i].cell_id == tiled[i].cell_id);

    std::vector<TileCells> per_tile;
    for (const Tile& t : plan.tiles) {
      const auto inst = postprocess(crop_maps(maps, t.row, t.col, 256));
      per_tile.push_back({t.row, t.col, cells_from_tile(inst, t, plan, "s")});
    }
    std::reverse(per_tile.begin(), per_tile.end());
    std::mt19937_64 rng(2);
    std::shuffle(per_tile.begin(), per_tile.end(), rng);
    const auto shuffled = merge_instances(plan, per_tile);
    REQUIRE(shuffled.size() == tiled.size());
    for (std::size_t i = 0; i < tiled.size(); ++i) CHECK(shuffled[i].cell_id == tiled[i].cell_id);
  }
}

TEST_CASE("cell records carry closed-form geometry") {
  const auto cell = disc_cell("c", 0, 0, 20, 30, 6);
  const auto rec = to_record(cell, "slide");
  CHECK(rec.slide_id == "slide");
  CHECK(rec.area == doctest::Approx(static_cast<double>(cell.area)));
  CHECK(polygon_area(rec.contour) == doctest::Approx(static_cast<double>(cell.area)));
  CHECK(make_cell_id("s", 960, 0, 3) == "s:r000960_c000000_00003");
}

TEST_CASE("lanczos resampling") {
  std::mt19937_64 rng(8);
  FloatRaster img(23, 31, 2);
  for (float& v : img.data()) v = static_cast<float>(cellflow::testing::uniform(rng, -1, 1));

  SUBCASE("identity at scale 1") {
    const auto out = lanczos_resample(img, 1.0);
    REQUIRE(out.same_shape(23, 31));
    for (std::size_t i = 0; i < img.data().size(); ++i) CHECK(std::abs(out.data()[i] - img.data()[i]) <= 1e-6);
  }
  SUBCASE("constant images stay constant") {
    for (double s : {0.3, 0.5, 1.7, 2.0, 3.1}) {
      const auto out = lanczos_resample(FloatRaster(20, 17, 1, 0.7f), s);
      CHECK(out.rows() == std::lround(20 * s));
      CHECK(out.cols() == std::lround(17 * s));
      for (float v : out.data()) CHECK(v == doctest::Approx(0.7f).epsilon(1e-6));
    }
  }
  SUBCASE("ramp survives 2x up and down") {
    FloatRaster ramp(40, 48);
    for (int r = 0; r < 40; ++r) {
      for (int c = 0; c < 48; ++c) ramp(r, c) = static_cast<float>(0.02 * c + 0.01 * r);
    }
    const auto back = lanczos_resample(lanczos_resample(ramp, 2.0), 0.5);
    REQUIRE(back.same_shape(40, 48));
    double worst = 0.0;
    for (int r = 6; r < 34; ++r) {
      for (int c = 6; c < 42; ++c) worst = std::max(worst, static_cast<double>(std::abs(back(r, c) - ramp(r, c))));
    }
    CHECK(worst <= 1e-2);
  }
  SUBCASE("degenerate scales") {
    CHECK(code_of([&] { lanczos_resample(img, 0.0); }) == ErrorCode::DegenerateScale);
    CHECK(code_of([&] { lanczos_resample(img, 0.001); }) == ErrorCode::DegenerateScale);
  }
}

TEST_CASE("label resampling") {
  SUBCASE("scale 1 is the identity") {
    const auto scene = cellflow::testing::random_disc_scene(64, 64, 8, 3, 8, 1);
    const InstanceMap m(scene.labels);
    const auto r = resample_labels(m, 1.0);
    CHECK(r.map == m);
    CHECK(r.dropped == 0);
  }
  SUBCASE("2x2 down to 1x1") {
    const auto r = resample_labels(InstanceMap(LabelRaster(2, 2, 1, 5u)), 0.5);
    REQUIRE(r.map.rows() == 1);
    CHECK(r.map.labels()(0, 0) == 5u);
  }
  SUBCASE("tiny instances vanish and are counted") {
    LabelRaster labels(8, 8, 1, 0u);
    labels(1, 1) = 3;
    for (int r = 4; r < 8; ++r) {
      for (int c = 4; c < 8; ++c) labels(r, c) = 9;
    }
    const auto r = resample_labels(InstanceMap(labels), 0.25);
    CHECK(r.dropped == 1);
    CHECK(r.map.find(9) != nullptr);
  }
  SUBCASE("down then up keeps centroids within 2 px") {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
      const auto scene = cellflow::testing::random_disc_scene(120, 120, 20, 3, 12, seed);
      const InstanceMap m(scene.labels);
      const auto back = resample_labels(resample_labels(m, 0.5).map, 2.0).map;
      for (const auto& s : back.instances()) {
        const auto* orig = m.find(s.id);
        REQUIRE(orig != nullptr);
        CHECK(std::hypot(s.centroid.row - orig->centroid.row, s.centroid.col - orig->centroid.col) <= 2.0);
      }
    }
  }
}
