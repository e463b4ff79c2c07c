#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cellflow/raster.hpp"

namespace cellflow {

struct EmbeddingRef {
  std::string file;
  std::size_t row = 0;
  friend bool operator==(const EmbeddingRef&, const EmbeddingRef&) = default;
};

/// One detected cell as persisted in the JSON-lines store.
struct CellRecord {
  std::string cell_id;
  std::string slide_id;
  Point centroid;
  double area = 0.0;
  std::vector<Point> contour;  // open ring, pixel-center frame
  std::optional<int> class_label;
  std::optional<std::vector<double>> class_probs;
  std::optional<EmbeddingRef> embedding_ref;
  nlohmann::json extra = nlohmann::json::object();  // unknown fields, kept verbatim

  friend bool operator==(const CellRecord&, const CellRecord&) = default;
};

/// Throws InvalidRecord when the contour is not a simple ring of >= 3 vertices, the area is not
/// positive, or class_probs does not sum to 1 within 1e-5.
void validate(const CellRecord& record);

nlohmann::json to_json(const CellRecord& record);
CellRecord cell_from_json(const nlohmann::json& j);

void write_cells(std::ostream& out, const std::vector<CellRecord>& cells);
void write_cells(const std::filesystem::path& path, const std::vector<CellRecord>& cells);
std::vector<CellRecord> read_cells(std::istream& in);
std::vector<CellRecord> read_cells(const std::filesystem::path& path);

using ClassNames = std::map<int, std::string>;

/// FeatureCollection of Polygon features in (x = col, y = row) order, sorted by cell_id.
nlohmann::json to_geojson(std::vector<CellRecord> cells, const ClassNames& class_names);

}  // namespace cellflow
