#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cellflow/cells.hpp"
#include "cellflow/geometry.hpp"
#include "cellflow/postproc.hpp"

namespace cellflow {

struct SlideGeometry {
  int width = 0;
  int height = 0;
  double mpp = 0.25;
  int tile_edge = 1024;
  int overlap = 64;
  int patch = 16;

  /// Throws DegenerateGeometry unless tile_edge > 2 * overlap, tile_edge % patch == 0, mpp > 0 and
  /// the slide is non-empty.
  void validate() const;
};

struct Tile {
  int row = 0;  // origin
  int col = 0;
  Rect core;    // pixels this tile owns; cores partition the slide
  friend bool operator==(const Tile&, const Tile&) = default;
};

struct TilePlan {
  SlideGeometry geometry;
  std::vector<int> row_origins;
  std::vector<int> col_origins;
  std::vector<Tile> tiles;  // row-major over (row_origins, col_origins)

  /// Tile with the given origin, or nullptr.
  const Tile* find(int row, int col) const;
  /// Extent of a tile clipped to the slide.
  Rect extent(const Tile& tile) const;
};

/// Origins advance by tile_edge - overlap; the last one is clamped to dim - tile_edge. Slides
/// smaller than a tile get a single origin at 0 (the tile is zero-padded). Core boundaries sit at
/// the midpoint of each overlap, so regular neighbours split the overlap evenly.
TilePlan plan_tiles(const SlideGeometry& geometry);

nlohmann::json to_json(const TilePlan& plan);
TilePlan tile_plan_from_json(const nlohmann::json& j);

/// One nucleus in slide coordinates.
struct CellInstance {
  std::string cell_id;
  PixelMask mask;
  Point centroid;
  std::size_t area = 0;
  int tile_row = 0;
  int tile_col = 0;
  std::uint32_t instance_id = 0;  // id inside the source tile's instance map
  bool clipped = false;           // mask touches a tile edge that is not a slide edge
  std::optional<std::vector<double>> class_probs;
};

std::string make_cell_id(const std::string& slide_id, int tile_row, int tile_col, std::uint32_t instance_id);

/// Lifts a tile's instance map into slide coordinates and flags clipped cells.
std::vector<CellInstance> cells_from_tile(const InstanceMap& instances, const Tile& tile, const TilePlan& plan,
                                          const std::string& slide_id);

struct TileCells {
  int tile_row = 0;
  int tile_col = 0;
  std::vector<CellInstance> cells;
};

/// Cross-tile deduplication. Unclipped copies with mask IoU >= 0.5 collapse to one survivor chosen
/// by (centroid inside own core, larger area, smaller tile row, smaller tile col, cell_id). A
/// clipped cell is dropped when an unclipped cell from another tile covers at least half of it.
/// Output is ordered by (centroid row, centroid col, cell_id).
std::vector<CellInstance> merge_instances(const TilePlan& plan, std::span<const TileCells> tiles);

/// Zero-padded edge x edge crop of slide-level maps starting at (row, col).
ProbMaps crop_maps(const ProbMaps& maps, int row, int col, int edge);

/// Runs postprocess on every tile of `plan` over slide-level maps and merges the result.
std::vector<CellInstance> segment_tiled(const ProbMaps& maps, const TilePlan& plan, const PostprocParams& params,
                                        const std::string& slide_id);

CellRecord to_record(const CellInstance& cell, const std::string& slide_id);

std::vector<CellRecord> merge_cells(const TilePlan& plan, std::span<const TileCells> tiles, const std::string& slide_id);

/// Separable Lanczos-3 resampling with reflect-101 borders. Output dims are round(dim * scale);
/// kernel taps are normalised to sum 1 and stretched by 1/scale when shrinking.
FloatRaster lanczos_resample(const FloatRaster& image, double scale);

struct ResampledLabels {
  InstanceMap map;
  std::size_t dropped = 0;  // ids that no longer own a pixel
};

/// Nearest-neighbour resampling; instance ids are kept as-is.
ResampledLabels resample_labels(const InstanceMap& labels, double scale);

}  // namespace cellflow
