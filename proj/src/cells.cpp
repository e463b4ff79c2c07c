#include "cellflow/cells.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "cellflow/geometry.hpp"

namespace cellflow {
namespace {

const char* const kKnownKeys[] = {"cell_id", "slide_id", "centroid", "area", "contour",
                                  "class_label", "class_probs", "embedding_ref"};

bool is_known(const std::string& key) {
  return std::find(std::begin(kKnownKeys), std::end(kKnownKeys), key) != std::end(kKnownKeys);
}

Point point_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 2) throw std::invalid_argument("point must be [row, col]");
  return {j[0].get<double>(), j[1].get<double>()};
}

}  // namespace

void validate(const CellRecord& record) {
  if (record.contour.size() < 3) fail(ErrorCode::InvalidRecord, record.cell_id + ": contour needs >= 3 vertices");
  if (!is_simple_polygon(record.contour)) fail(ErrorCode::InvalidRecord, record.cell_id + ": contour self-intersects");
  if (!(record.area > 0.0)) fail(ErrorCode::InvalidRecord, record.cell_id + ": area must be positive");
  if (record.class_probs) {
    const double sum = std::accumulate(record.class_probs->begin(), record.class_probs->end(), 0.0);
    if (std::abs(sum - 1.0) > 1e-5) fail(ErrorCode::InvalidRecord, record.cell_id + ": class_probs must sum to 1");
  }
}

nlohmann::json to_json(const CellRecord& record) {
  nlohmann::json j = record.extra.is_object() ? record.extra : nlohmann::json::object();
  j["cell_id"] = record.cell_id;
  j["slide_id"] = record.slide_id;
  j["centroid"] = {record.centroid.row, record.centroid.col};
  j["area"] = record.area;
  auto contour = nlohmann::json::array();
  for (const Point& p : record.contour) contour.push_back({p.row, p.col});
  j["contour"] = std::move(contour);
  if (record.class_label) j["class_label"] = *record.class_label;
  if (record.class_probs) j["class_probs"] = *record.class_probs;
  if (record.embedding_ref) j["embedding_ref"] = {{"file", record.embedding_ref->file}, {"row", record.embedding_ref->row}};
  return j;
}

CellRecord cell_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("record must be a JSON object");
  CellRecord rec;
  rec.cell_id = j.at("cell_id").get<std::string>();
  rec.slide_id = j.value("slide_id", std::string{});
  rec.centroid = point_from_json(j.at("centroid"));
  rec.area = j.at("area").get<double>();
  for (const auto& p : j.at("contour")) rec.contour.push_back(point_from_json(p));
  if (j.contains("class_label") && !j["class_label"].is_null()) rec.class_label = j["class_label"].get<int>();
  if (j.contains("class_probs") && !j["class_probs"].is_null()) {
    rec.class_probs = j["class_probs"].get<std::vector<double>>();
  }
  if (j.contains("embedding_ref") && !j["embedding_ref"].is_null()) {
    const auto& e = j["embedding_ref"];
    rec.embedding_ref = EmbeddingRef{e.at("file").get<std::string>(), e.at("row").get<std::size_t>()};
  }
  for (const auto& [key, value] : j.items()) {
    if (!is_known(key)) rec.extra[key] = value;
  }
  return rec;
}

void write_cells(std::ostream& out, const std::vector<CellRecord>& cells) {
  for (const auto& rec : cells) out << to_json(rec).dump() << '\n';
  if (!out) fail(ErrorCode::Io, "failed writing cell store");
}

void write_cells(const std::filesystem::path& path, const std::vector<CellRecord>& cells) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorCode::Io, "cannot open " + path.string() + " for writing");
  write_cells(out, cells);
}

std::vector<CellRecord> read_cells(std::istream& in) {
  std::vector<CellRecord> cells;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      cells.push_back(cell_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      fail(ErrorCode::MalformedLine, "line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return cells;
}

std::vector<CellRecord> read_cells(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::Io, "cannot open " + path.string());
  try {
    return read_cells(in);
  } catch (const Error& e) {
    throw Error(e.code(), path.string() + ": " + e.detail());
  }
}

nlohmann::json to_geojson(std::vector<CellRecord> cells, const ClassNames& class_names) {
  std::sort(cells.begin(), cells.end(), [](const CellRecord& a, const CellRecord& b) { return a.cell_id < b.cell_id; });
  auto features = nlohmann::json::array();
  for (const auto& rec : cells) {
    auto ring = nlohmann::json::array();
    for (const Point& p : rec.contour) ring.push_back({p.col, p.row});
    if (!rec.contour.empty()) ring.push_back({rec.contour.front().col, rec.contour.front().row});

    nlohmann::json cls = nullptr;
    if (rec.class_label) {
      const auto it = class_names.find(*rec.class_label);
      if (it == class_names.end()) {
        fail(ErrorCode::UnknownClass, rec.cell_id + ": no name for class " + std::to_string(*rec.class_label));
      }
      cls = it->second;
    }
    nlohmann::json prob = nullptr;
    if (rec.class_probs && !rec.class_probs->empty()) {
      if (rec.class_label && *rec.class_label >= 0 && static_cast<std::size_t>(*rec.class_label) < rec.class_probs->size()) {
        prob = (*rec.class_probs)[static_cast<std::size_t>(*rec.class_label)];
      } else {
        prob = *std::max_element(rec.class_probs->begin(), rec.class_probs->end());
      }
    }
    features.push_back({
        {"type", "Feature"},
        {"geometry", {{"type", "Polygon"}, {"coordinates", nlohmann::json::array({ring})}}},
        {"properties",
         {{"id", rec.cell_id},
          {"class", cls},
          {"prob", prob},
          {"centroid", {rec.centroid.col, rec.centroid.row}},
          {"area", rec.area}}},
    });
  }
  return {{"type", "FeatureCollection"}, {"features", std::move(features)}};
}

}  // namespace cellflow
