#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cellflow/cells.hpp"
#include "cellflow/classifier.hpp"
#include "cellflow/geometry.hpp"
#include "cellflow/tokens.hpp"
#include "cellflow/wsi.hpp"

namespace cellflow {

/// Binary immunofluorescence mask registered to the H&E frame (nonzero = positive).
struct IFMask {
  ByteRaster mask;
  std::string antibody;
  bool registered = true;
};

inline constexpr double kIfThreshold = 0.15;

struct IfLabel {
  std::string cell_id;
  double fraction = 0.0;  // |cell & positive| / |cell|
  bool positive = false;  // fraction > threshold
};

/// Share of the cell's pixels that are positive. Pixels outside the IF raster throw ShapeMismatch.
double if_overlap_fraction(const PixelMask& cell, const ByteRaster& mask);

std::vector<IfLabel> label_from_if(std::span<const CellInstance> cells, const IFMask& mask, double threshold = kIfThreshold);

/// Labels persisted records using their rasterised contours. Sets class_label to 1 (positive) or 0
/// and stores the fraction under extra["if_fraction"].
std::vector<IfLabel> label_records_from_if(std::vector<CellRecord>& cells, const IFMask& mask,
                                           double threshold = kIfThreshold);

/// Field of view with inclusive bounds, in pixel-center coordinates.
struct FOV {
  double row0 = 0, col0 = 0, row1 = 0, col1 = 0;

  bool contains(const Point& p) const noexcept { return p.row >= row0 && p.row <= row1 && p.col >= col0 && p.col <= col1; }
  /// Throws DegenerateFOV unless row1 > row0 and col1 > col0.
  void validate() const;
};

/// Keeps cells whose centroid lies in the FOV.
template <class Cell>
std::vector<Cell> filter_by_fov(std::span<const Cell> cells, const FOV& fov) {
  fov.validate();
  std::vector<Cell> out;
  for (const Cell& c : cells) {
    if (fov.contains(c.centroid)) out.push_back(c);
  }
  return out;
}

/// Slide-level split assignment.
struct SplitSpec {
  std::vector<std::string> train;
  std::vector<std::string> val;
};

SplitSpec split_spec_from_json(const nlohmann::json& j);  // {"train": [...], "val": [...]}

struct LabeledSetSummary {
  std::map<std::string, std::map<std::string, std::size_t>> counts;  // split -> class name -> n
};

nlohmann::json to_json(const LabeledSetSummary& s);

/// Joins labelled cells to embeddings by cell_id and splits by slide; rows ordered by
/// (slide_id, cell_id). Throws MissingEmbedding, MissingLabel, SlideInBothSplits or UnassignedSlide.
LabeledCellSet build_labeled_set(std::span<const CellRecord> cells, const EmbeddingTable& embeddings, const SplitSpec& split,
                                 std::vector<std::string> class_names, LabeledSetSummary* summary = nullptr);

}  // namespace cellflow
