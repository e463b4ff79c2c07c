#include "cellflow/datagen.hpp"

#include <algorithm>
#include <set>
#include <tuple>

namespace cellflow {

double if_overlap_fraction(const PixelMask& cell, const ByteRaster& mask) {
  if (cell.empty()) fail(ErrorCode::InvalidArgument, "cell mask is empty");
  std::size_t inside = 0;
  cell.for_each_pixel([&](int r, int c) {
    if (!mask.contains(r, c)) fail(ErrorCode::ShapeMismatch, "cell extends beyond the IF mask");
    inside += mask(r, c) != 0;
  });
  return static_cast<double>(inside) / static_cast<double>(cell.area());
}

std::vector<IfLabel> label_from_if(std::span<const CellInstance> cells, const IFMask& mask, double threshold) {
  std::vector<IfLabel> out;
  out.reserve(cells.size());
  for (const auto& c : cells) {
    const double f = if_overlap_fraction(c.mask, mask.mask);
    out.push_back({c.cell_id, f, f > threshold});
  }
  return out;
}

std::vector<IfLabel> label_records_from_if(std::vector<CellRecord>& cells, const IFMask& mask, double threshold) {
  std::vector<IfLabel> out;
  out.reserve(cells.size());
  for (auto& c : cells) {
    const double f = if_overlap_fraction(rasterize_polygon(c.contour), mask.mask);
    const bool positive = f > threshold;
    c.class_label = positive ? 1 : 0;
    c.extra["if_fraction"] = f;
    out.push_back({c.cell_id, f, positive});
  }
  return out;
}

void FOV::validate() const {
  if (!(row1 > row0 && col1 > col0)) fail(ErrorCode::DegenerateFOV, "field of view has no area");
}

SplitSpec split_spec_from_json(const nlohmann::json& j) {
  SplitSpec s;
  try {
    s.train = j.value("train", std::vector<std::string>{});
    s.val = j.value("val", std::vector<std::string>{});
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::InvalidConfig, e.what());
  }
  return s;
}

nlohmann::json to_json(const LabeledSetSummary& s) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [split, counts] : s.counts) j[split] = counts;
  return j;
}

LabeledCellSet build_labeled_set(std::span<const CellRecord> cells, const EmbeddingTable& embeddings, const SplitSpec& split,
                                 std::vector<std::string> class_names, LabeledSetSummary* summary) {
  std::map<std::string, bool> is_train;
  for (const auto& s : split.train) is_train[s] = true;
  for (const auto& s : split.val) {
    if (is_train.count(s) && is_train[s]) fail(ErrorCode::SlideInBothSplits, "slide " + s + " is listed in train and val");
    is_train[s] = false;
  }
  std::vector<const CellRecord*> order;
  order.reserve(cells.size());
  for (const auto& c : cells) order.push_back(&c);
  std::sort(order.begin(), order.end(), [](const CellRecord* a, const CellRecord* b) {
    return std::tie(a->slide_id, a->cell_id) < std::tie(b->slide_id, b->cell_id);
  });

  LabeledCellSet set;
  set.class_names = std::move(class_names);
  set.train.dim = set.val.dim = embeddings.dim;
  LabeledSetSummary local;
  for (const auto& n : set.class_names) {
    local.counts["train"][n] = 0;
    local.counts["val"][n] = 0;
  }
  for (const CellRecord* c : order) {
    auto it = is_train.find(c->slide_id);
    if (it == is_train.end()) fail(ErrorCode::UnassignedSlide, "slide " + c->slide_id + " has no split");
    if (!c->class_label) fail(ErrorCode::MissingLabel, "cell " + c->cell_id + " has no label");
    const int y = *c->class_label;
    if (y < 0 || static_cast<std::size_t>(y) >= set.class_names.size()) {
      fail(ErrorCode::UnknownClass, "cell " + c->cell_id + " has label " + std::to_string(y) + " outside the class list");
    }
    const std::size_t row = embeddings.row_of(c->cell_id);
    (it->second ? set.train : set.val).push(embeddings.row(row), y, c->cell_id);
    ++local.counts[it->second ? "train" : "val"][set.class_names[static_cast<std::size_t>(y)]];
  }
  if (summary) *summary = std::move(local);
  return set;
}

}  // namespace cellflow
