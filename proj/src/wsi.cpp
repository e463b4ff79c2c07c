#include "cellflow/wsi.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <limits>
#include <numeric>
#include <set>
#include <tuple>

namespace cellflow {

void SlideGeometry::validate() const {
  if (width <= 0 || height <= 0) fail(ErrorCode::DegenerateGeometry, "slide must have positive width and height");
  if (!(mpp > 0.0)) fail(ErrorCode::DegenerateGeometry, "mpp must be positive");
  if (overlap < 0) fail(ErrorCode::DegenerateGeometry, "overlap must be non-negative");
  if (tile_edge <= 2 * overlap) fail(ErrorCode::DegenerateGeometry, "tile_edge must exceed twice the overlap");
  if (patch <= 0 || tile_edge % patch != 0) {
    fail(ErrorCode::DegenerateGeometry, "tile_edge " + std::to_string(tile_edge) + " is not divisible by patch size " +
                                            std::to_string(patch));
  }
}

namespace {

std::vector<int> axis_origins(int dim, int tile, int stride) {
  std::vector<int> out{0};
  if (dim <= tile) return out;
  while (out.back() + tile < dim) {
    const int next = out.back() + stride;
    out.push_back(std::min(next, dim - tile));
  }
  return out;
}

// Core boundaries along one axis: midpoint of each consecutive overlap, then the slide edge.
std::vector<int> axis_cuts(const std::vector<int>& origins, int dim, int tile) {
  std::vector<int> cuts{0};
  for (std::size_t i = 0; i + 1 < origins.size(); ++i) {
    cuts.push_back((origins[i + 1] + origins[i] + tile) / 2);
  }
  cuts.push_back(dim);
  return cuts;
}

}  // namespace

TilePlan plan_tiles(const SlideGeometry& geometry) {
  geometry.validate();
  TilePlan plan;
  plan.geometry = geometry;
  const int stride = geometry.tile_edge - geometry.overlap;
  plan.row_origins = axis_origins(geometry.height, geometry.tile_edge, stride);
  plan.col_origins = axis_origins(geometry.width, geometry.tile_edge, stride);
  const auto row_cuts = axis_cuts(plan.row_origins, geometry.height, geometry.tile_edge);
  const auto col_cuts = axis_cuts(plan.col_origins, geometry.width, geometry.tile_edge);
  for (std::size_t i = 0; i < plan.row_origins.size(); ++i) {
    for (std::size_t j = 0; j < plan.col_origins.size(); ++j) {
      plan.tiles.push_back({plan.row_origins[i], plan.col_origins[j], Rect{row_cuts[i], col_cuts[j], row_cuts[i + 1], col_cuts[j + 1]}});
    }
  }
  return plan;
}

const Tile* TilePlan::find(int row, int col) const {
  for (const Tile& t : tiles) {
    if (t.row == row && t.col == col) return &t;
  }
  return nullptr;
}

Rect TilePlan::extent(const Tile& tile) const {
  return Rect{tile.row, tile.col, std::min(tile.row + geometry.tile_edge, geometry.height),
              std::min(tile.col + geometry.tile_edge, geometry.width)};
}

nlohmann::json to_json(const TilePlan& plan) {
  const auto& g = plan.geometry;
  nlohmann::json tiles = nlohmann::json::array();
  for (const Tile& t : plan.tiles) {
    tiles.push_back({{"origin", {t.row, t.col}}, {"core", {t.core.row0, t.core.col0, t.core.row1, t.core.col1}}});
  }
  return {{"geometry",
           {{"width", g.width}, {"height", g.height}, {"mpp", g.mpp}, {"tile_edge", g.tile_edge}, {"overlap", g.overlap},
            {"patch", g.patch}}},
          {"tiles", tiles}};
}

TilePlan tile_plan_from_json(const nlohmann::json& j) {
  SlideGeometry g;
  const auto& jg = j.at("geometry");
  g.width = jg.at("width").get<int>();
  g.height = jg.at("height").get<int>();
  g.mpp = jg.value("mpp", 0.25);
  g.tile_edge = jg.value("tile_edge", 1024);
  g.overlap = jg.value("overlap", 64);
  g.patch = jg.value("patch", 16);
  return plan_tiles(g);
}

std::string make_cell_id(const std::string& slide_id, int tile_row, int tile_col, std::uint32_t instance_id) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "r%06d_c%06d_%05u", tile_row, tile_col, instance_id);
  return slide_id.empty() ? std::string(buf) : slide_id + ":" + buf;
}

std::vector<CellInstance> cells_from_tile(const InstanceMap& instances, const Tile& tile, const TilePlan& plan,
                                          const std::string& slide_id) {
  const Rect ext = plan.extent(tile);
  const int tile_edge = plan.geometry.tile_edge;
  std::vector<CellInstance> out;
  out.reserve(instances.count());
  for (const InstanceSummary& s : instances.instances()) {
    CellInstance cell;
    cell.instance_id = s.id;
    cell.tile_row = tile.row;
    cell.tile_col = tile.col;
    cell.cell_id = make_cell_id(slide_id, tile.row, tile.col, s.id);
    cell.mask = PixelMask::from_label(instances.labels(), s.id, s.bbox).translated(tile.row, tile.col);
    cell.centroid = {s.centroid.row + tile.row, s.centroid.col + tile.col};
    cell.area = s.area;
    const Rect& b = cell.mask.bbox();
    cell.clipped = (b.row0 == tile.row && tile.row > 0) || (b.col0 == tile.col && tile.col > 0) ||
                   (b.row1 == tile.row + tile_edge && ext.row1 < plan.geometry.height) ||
                   (b.col1 == tile.col + tile_edge && ext.col1 < plan.geometry.width);
    out.push_back(std::move(cell));
  }
  return out;
}

namespace {

struct Candidate {
  const CellInstance* cell;
  bool in_core;
};

// Smaller is preferred.
auto priority(const Candidate& c) {
  return std::make_tuple(c.cell->clipped, !c.in_core, -static_cast<long long>(c.cell->area), c.cell->tile_row,
                         c.cell->tile_col, std::cref(c.cell->cell_id));
}

struct UnionFind {
  std::vector<std::size_t> parent;
  explicit UnionFind(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  std::size_t find(std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  }
  void unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  }
};

}  // namespace

std::vector<CellInstance> merge_instances(const TilePlan& plan, std::span<const TileCells> tiles) {
  const auto& g = plan.geometry;
  std::vector<Candidate> cand;
  for (const TileCells& tc : tiles) {
    const Tile* tile = plan.find(tc.tile_row, tc.tile_col);
    for (const CellInstance& cell : tc.cells) {
      // Detections whose centre falls in zero padding are discarded.
      if (cell.centroid.row >= g.height || cell.centroid.col >= g.width) continue;
      const bool in_core = tile != nullptr && tile->core.contains(static_cast<int>(std::lround(cell.centroid.row)),
                                                                  static_cast<int>(std::lround(cell.centroid.col)));
      cand.push_back({&cell, in_core});
    }
  }
  // Canonical order makes the result independent of tile arrival order.
  std::sort(cand.begin(), cand.end(), [](const Candidate& a, const Candidate& b) {
    return std::tie(a.cell->tile_row, a.cell->tile_col, a.cell->cell_id) < std::tie(b.cell->tile_row, b.cell->tile_col, b.cell->cell_id);
  });

  // Uniform grid over bounding boxes.
  constexpr int kCell = 64;
  std::map<std::pair<int, int>, std::vector<std::size_t>> grid;
  for (std::size_t i = 0; i < cand.size(); ++i) {
    const Rect& b = cand[i].cell->mask.bbox();
    for (int gr = b.row0 / kCell; gr <= (b.row1 - 1) / kCell; ++gr) {
      for (int gc = b.col0 / kCell; gc <= (b.col1 - 1) / kCell; ++gc) grid[{gr, gc}].push_back(i);
    }
  }
  std::set<std::pair<std::size_t, std::size_t>> pairs;
  for (const auto& [key, members] : grid) {
    for (std::size_t a = 0; a < members.size(); ++a) {
      for (std::size_t b = a + 1; b < members.size(); ++b) {
        const std::size_t i = std::min(members[a], members[b]), j = std::max(members[a], members[b]);
        const CellInstance& x = *cand[i].cell;
        const CellInstance& y = *cand[j].cell;
        if (x.tile_row == y.tile_row && x.tile_col == y.tile_col) continue;
        if (x.mask.bbox().intersects(y.mask.bbox())) pairs.emplace(i, j);
      }
    }
  }

  std::vector<char> dropped(cand.size(), 0);
  std::vector<std::pair<std::size_t, std::size_t>> dup_edges;
  for (const auto& [i, j] : pairs) {
    const CellInstance& x = *cand[i].cell;
    const CellInstance& y = *cand[j].cell;
    const std::size_t inter = intersection_area(x.mask, y.mask);
    if (inter == 0) continue;
    if (x.clipped != y.clipped) {
      const std::size_t c = x.clipped ? i : j;
      if (2 * inter >= cand[c].cell->area) dropped[c] = 1;
      continue;
    }
    const double iou = static_cast<double>(inter) / static_cast<double>(x.area + y.area - inter);
    if (iou >= 0.5) dup_edges.emplace_back(i, j);
  }

  UnionFind uf(cand.size());
  for (const auto& [i, j] : dup_edges) {
    if (!dropped[i] && !dropped[j]) uf.unite(i, j);
  }
  std::map<std::size_t, std::size_t> best;  // root -> survivor
  for (std::size_t i = 0; i < cand.size(); ++i) {
    if (dropped[i]) continue;
    const std::size_t root = uf.find(i);
    auto it = best.find(root);
    if (it == best.end() || priority(cand[i]) < priority(cand[it->second])) best[root] = i;
  }

  std::vector<CellInstance> out;
  out.reserve(best.size());
  for (const auto& [root, idx] : best) out.push_back(*cand[idx].cell);
  std::sort(out.begin(), out.end(), [](const CellInstance& a, const CellInstance& b) {
    return std::tie(a.centroid.row, a.centroid.col, a.cell_id) < std::tie(b.centroid.row, b.centroid.col, b.cell_id);
  });
  return out;
}

ProbMaps crop_maps(const ProbMaps& maps, int row, int col, int edge) {
  auto crop = [&](const FloatRaster& src) {
    FloatRaster out(edge, edge, src.channels(), 0.0f);
    const int r1 = std::min(row + edge, src.rows()), c1 = std::min(col + edge, src.cols());
    for (int r = row; r < r1; ++r) {
      for (int c = col; c < c1; ++c) {
        for (int k = 0; k < src.channels(); ++k) out(r - row, c - col, k) = src(r, c, k);
      }
    }
    return out;
  };
  ProbMaps out{crop(maps.np), crop(maps.horizontal), crop(maps.vertical), std::nullopt};
  if (maps.types) out.types = crop(*maps.types);
  return out;
}

std::vector<CellInstance> segment_tiled(const ProbMaps& maps, const TilePlan& plan, const PostprocParams& params,
                                        const std::string& slide_id) {
  if (!maps.np.same_shape(plan.geometry.height, plan.geometry.width)) {
    fail(ErrorCode::ShapeMismatch, "maps do not match the slide geometry");
  }
  std::vector<TileCells> tiles;
  for (const Tile& tile : plan.tiles) {
    const ProbMaps local = crop_maps(maps, tile.row, tile.col, plan.geometry.tile_edge);
    const InstanceMap inst = postprocess(local, params);
    TileCells tc{tile.row, tile.col, cells_from_tile(inst, tile, plan, slide_id)};
    if (local.types) {
      const auto probs = assign_types(inst, *local.types);
      for (std::size_t i = 0; i < tc.cells.size(); ++i) tc.cells[i].class_probs = probs[i];
    }
    tiles.push_back(std::move(tc));
  }
  return merge_instances(plan, tiles);
}

CellRecord to_record(const CellInstance& cell, const std::string& slide_id) {
  CellRecord rec;
  rec.cell_id = cell.cell_id;
  rec.slide_id = slide_id;
  rec.centroid = cell.centroid;
  rec.area = static_cast<double>(cell.area);
  rec.contour = trace_contour(cell.mask);
  if (cell.class_probs) {
    rec.class_probs = cell.class_probs;
    rec.class_label = static_cast<int>(argmax(*cell.class_probs));
  }
  rec.extra["tile"] = {cell.tile_row, cell.tile_col};
  rec.extra["instance"] = cell.instance_id;
  return rec;
}

std::vector<CellRecord> merge_cells(const TilePlan& plan, std::span<const TileCells> tiles, const std::string& slide_id) {
  std::vector<CellRecord> out;
  for (const CellInstance& cell : merge_instances(plan, tiles)) out.push_back(to_record(cell, slide_id));
  return out;
}

// ---------------------------------------------------------------------------------------------
// Resampling

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr int kLobes = 3;

double sinc(double x) {
  if (x == 0.0) return 1.0;
  const double px = kPi * x;
  return std::sin(px) / px;
}

double lanczos(double x) {
  if (std::abs(x) >= kLobes) return 0.0;
  return sinc(x) * sinc(x / kLobes);
}

int reflect101(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
  }
  return i;
}

struct Taps {
  std::vector<int> first;
  std::vector<std::vector<double>> weights;
};

int scaled_dim(int dim, double scale) {
  if (!(scale > 0.0) || !std::isfinite(scale)) fail(ErrorCode::DegenerateScale, "scale must be positive");
  const long long out = std::llround(dim * scale);
  if (out <= 0) fail(ErrorCode::DegenerateScale, "scaled dimension rounds to zero");
  if (out > std::numeric_limits<int>::max()) fail(ErrorCode::DegenerateScale, "scaled dimension too large");
  return static_cast<int>(out);
}

Taps make_taps(int in, int out) {
  const double ratio = static_cast<double>(out) / in;
  const double stretch = ratio < 1.0 ? 1.0 / ratio : 1.0;
  const double support = kLobes * stretch;
  Taps taps;
  taps.first.resize(static_cast<std::size_t>(out));
  taps.weights.resize(static_cast<std::size_t>(out));
  for (int o = 0; o < out; ++o) {
    const double center = (o + 0.5) / ratio - 0.5;
    const int lo = static_cast<int>(std::floor(center - support)) + 1;
    const int hi = static_cast<int>(std::ceil(center + support)) - 1;
    std::vector<double> w;
    double sum = 0.0;
    for (int i = lo; i <= hi; ++i) {
      const double v = lanczos((i - center) / stretch);
      w.push_back(v);
      sum += v;
    }
    for (double& v : w) v /= sum;
    taps.first[static_cast<std::size_t>(o)] = lo;
    taps.weights[static_cast<std::size_t>(o)] = std::move(w);
  }
  return taps;
}

}  // namespace

FloatRaster lanczos_resample(const FloatRaster& image, double scale) {
  const int in_h = image.rows(), in_w = image.cols(), ch = image.channels();
  if (image.empty()) fail(ErrorCode::DegenerateScale, "cannot resample an empty image");
  const int out_h = scaled_dim(in_h, scale), out_w = scaled_dim(in_w, scale);
  const Taps col_taps = make_taps(in_w, out_w);
  const Taps row_taps = make_taps(in_h, out_h);

  std::vector<double> tmp(static_cast<std::size_t>(in_h) * out_w * ch, 0.0);
  for (int r = 0; r < in_h; ++r) {
    for (int o = 0; o < out_w; ++o) {
      const auto& w = col_taps.weights[static_cast<std::size_t>(o)];
      const int first = col_taps.first[static_cast<std::size_t>(o)];
      for (int k = 0; k < ch; ++k) {
        double s = 0.0;
        for (std::size_t t = 0; t < w.size(); ++t) s += w[t] * image(r, reflect101(first + static_cast<int>(t), in_w), k);
        tmp[(static_cast<std::size_t>(r) * out_w + o) * ch + k] = s;
      }
    }
  }
  FloatRaster out(out_h, out_w, ch, 0.0f);
  for (int o = 0; o < out_h; ++o) {
    const auto& w = row_taps.weights[static_cast<std::size_t>(o)];
    const int first = row_taps.first[static_cast<std::size_t>(o)];
    for (int c = 0; c < out_w; ++c) {
      for (int k = 0; k < ch; ++k) {
        double s = 0.0;
        for (std::size_t t = 0; t < w.size(); ++t) {
          const int r = reflect101(first + static_cast<int>(t), in_h);
          s += w[t] * tmp[(static_cast<std::size_t>(r) * out_w + c) * ch + k];
        }
        out(o, c, k) = static_cast<float>(s);
      }
    }
  }
  return out;
}

ResampledLabels resample_labels(const InstanceMap& labels, double scale) {
  const int in_h = labels.rows(), in_w = labels.cols();
  if (labels.labels().empty()) fail(ErrorCode::DegenerateScale, "cannot resample an empty map");
  const int out_h = scaled_dim(in_h, scale), out_w = scaled_dim(in_w, scale);
  auto source = [](int o, int in, int out) {
    const long long s = static_cast<long long>(std::floor((o + 0.5) * in / out));
    return static_cast<int>(std::clamp<long long>(s, 0, in - 1));
  };
  LabelRaster out(out_h, out_w, 1, 0u);
  for (int r = 0; r < out_h; ++r) {
    const int sr = source(r, in_h, out_h);
    for (int c = 0; c < out_w; ++c) out(r, c) = labels.labels()(sr, source(c, in_w, out_w));
  }
  ResampledLabels res{InstanceMap(std::move(out)), 0};
  res.dropped = labels.count() - res.map.count();
  return res;
}

}  // namespace cellflow
