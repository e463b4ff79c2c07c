#pragma once

// Stage functions shared by the one-shot and the step-by-step commands, so both produce the
// same bytes.

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cellflow/cells.hpp"
#include "cellflow/classifier.hpp"
#include "cellflow/postproc.hpp"
#include "cellflow/tensor_io.hpp"
#include "cellflow/tokens.hpp"
#include "cellflow/wsi.hpp"

namespace cellflow::cli {

namespace fs = std::filesystem;

/// "r000960_c001920.cvtt" for the tile with origin (960, 1920).
std::string tile_file_name(int row, int col);

/// Network outputs stored as one (H, W, C) float tensor: channel 0 is the nucleus probability,
/// 1 and 2 the horizontal and vertical maps, any further channels the type map.
ProbMaps maps_from_tensor(const Tensor& t);

struct TileSegmentation {
  InstanceMap instances;
  std::optional<std::vector<std::vector<double>>> types;  // per instance, in instance order
};

TileSegmentation segment_tile(const ProbMaps& maps, const PostprocParams& params);

/// Writes the instance map and, when present, a "<stem>.types.json" sidecar.
void write_segmentation(const fs::path& path, const TileSegmentation& seg);
TileSegmentation read_segmentation(const fs::path& path);

std::vector<CellRecord> merge_segmentations(const TilePlan& plan, const std::map<std::pair<int, int>, TileSegmentation>& tiles,
                                            const std::string& slide_id);

using TokenLoader = std::function<TokenGrid(int tile_row, int tile_col)>;

/// Mean token embedding per cell. The cell mask is rebuilt from its contour and placed in the
/// token grid of the tile it came from.
EmbeddingTable embed_cells(const std::vector<CellRecord>& cells, const TokenLoader& tokens);

/// Sets class_probs and class_label on every cell from the classifier.
void classify_cells(std::vector<CellRecord>& cells, const EmbeddingTable& table, const Classifier& model);

ClassNames class_names_of(const Classifier& model);

std::string geojson_text(const std::vector<CellRecord>& cells, const ClassNames& names);

/// Runs `fn(i)` for i in [0, n) on up to `threads` workers. The first exception is rethrown.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

}  // namespace cellflow::cli
