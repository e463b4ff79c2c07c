#include <sstream>

#include "doctest.h"

#include "cellflow/cells.hpp"

using namespace cellflow;

namespace {

CellRecord triangle(const std::string& id) {
  CellRecord r;
  r.cell_id = id;
  r.slide_id = "s1";
  r.contour = {{0, 0}, {0, 4}, {3, 0}};
  r.area = 6.0;
  r.centroid = {1, 4.0 / 3};
  return r;
}

}  // namespace

TEST_CASE("JSON-lines round trip keeps every field") {
  std::vector<CellRecord> cells{triangle("a"), triangle("b"), triangle("c")};
  cells[0].class_label = 2;
  cells[0].class_probs = std::vector<double>{0.2, 0.3, 0.5};
  cells[1].embedding_ref = EmbeddingRef{"emb.cvtt", 7};
  cells[2].extra = {{"custom", {{"nested", true}}}, {"score", 0.123456789012}};
  std::stringstream ss;
  write_cells(ss, cells);
  const auto back = read_cells(ss);
  CHECK(back == cells);
  CHECK((*back[0].class_probs)[1] == 0.3);
}

TEST_CASE("malformed lines report their number") {
  std::stringstream ss("not json\n");
  try {
    read_cells(ss);
    FAIL("expected MalformedLine");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::MalformedLine);
    CHECK(std::string(e.what()).find("line 1") != std::string::npos);
  }
  std::stringstream ok_then_bad;
  write_cells(ok_then_bad, {triangle("a")});
  ok_then_bad << "\n{\"cell_id\": 3}\n";
  ok_then_bad.seekg(0);
  try {
    read_cells(ok_then_bad);
    FAIL("expected MalformedLine");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }
}

TEST_CASE("record validation") {
  auto r = triangle("a");
  CHECK_NOTHROW(validate(r));
  r.class_probs = std::vector<double>{0.5, 0.4};
  CHECK_THROWS_AS(validate(r), Error);
  r = triangle("a");
  r.contour = {{0, 0}, {1, 1}};
  CHECK_THROWS_AS(validate(r), Error);
  r = triangle("a");
  r.area = 0;
  CHECK_THROWS_AS(validate(r), Error);
  r = triangle("a");
  r.contour = {{0, 0}, {2, 2}, {0, 2}, {2, 0}};
  CHECK_THROWS_AS(validate(r), Error);
}

TEST_CASE("GeoJSON export") {
  const ClassNames names{{0, "other"}, {1, "tumor"}};
  CHECK(to_geojson({}, names)["features"].empty());
  CHECK(to_geojson({}, names)["type"] == "FeatureCollection");

  auto t = triangle("t");
  t.class_label = 1;
  t.class_probs = std::vector<double>{0.25, 0.75};
  const auto doc = to_geojson({t}, names);
  const auto& f = doc["features"][0];
  CHECK(f["geometry"]["type"] == "Polygon");
  const auto& ring = f["geometry"]["coordinates"][0];
  REQUIRE(ring.size() == 4);
  CHECK(ring.front() == ring.back());
  CHECK(ring[1] == nlohmann::json::array({4.0, 0.0}));  // (x = col, y = row)
  CHECK(f["properties"]["class"] == "tumor");
  CHECK(f["properties"]["prob"] == 0.75);
  CHECK(f["properties"]["id"] == "t");

  const auto ordered = to_geojson({triangle("b"), triangle("a")}, names);
  CHECK(ordered["features"][0]["properties"]["id"] == "a");
  CHECK(ordered["features"][1]["properties"]["id"] == "b");
  CHECK(ordered["features"][0]["properties"]["class"].is_null());

  // Re-parsing yields the same vertex sequences.
  const auto reparsed = nlohmann::json::parse(doc.dump());
  CHECK(reparsed == doc);

  t.class_label = 5;
  try {
    to_geojson({t}, names);
    FAIL("expected UnknownClass");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::UnknownClass);
  }
}
