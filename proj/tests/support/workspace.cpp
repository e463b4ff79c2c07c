#include "support/workspace.hpp"

#include <fstream>

#include "cellflow/cells.hpp"
#include "cellflow/tokens.hpp"
#include "cellflow/wsi.hpp"
#include "support/fixtures.hpp"

namespace cellflow::testing {

std::string fixture_cell_id(const std::string& slide, int index) { return slide + ":c" + std::to_string(index); }

WorkspaceFixture::WorkspaceFixture(const std::string& name, int n, int dim)
    : root(std::filesystem::temp_directory_path() / name), manifest(root / "workspace.json"), cells_per_slide(n) {
  std::filesystem::remove_all(root);
  std::filesystem::create_directories(root / "cells");
  std::filesystem::create_directories(root / "emb");
  std::filesystem::create_directories(root / "pyramid" / "A" / "0" / "0");
  {
    std::ofstream tile(root / "pyramid" / "A" / "0" / "0" / "0.jpg", std::ios::binary);
    tile << "\xFF\xD8\xFF\xD9";
  }
  const int per_row = 40;
  const int rows = (n + per_row - 1) / per_row;
  nlohmann::json slides = nlohmann::json::array();
  std::uint64_t seed = 1;
  for (const std::string slide : {"A", "B"}) {
    Rng rng(seed++);
    std::vector<CellRecord> cells;
    EmbeddingTable table;
    for (int i = 0; i < n; ++i) {
      const int r0 = 10 * (i / per_row) + 2, c0 = 10 * (i % per_row) + 2;
      std::vector<std::uint8_t> bits(36, 1);
      CellInstance inst;
      inst.cell_id = fixture_cell_id(slide, i);
      inst.mask = PixelMask(Rect{r0, c0, r0 + 6, c0 + 6}, bits);
      inst.area = inst.mask.area();
      inst.centroid = inst.mask.centroid();
      const int label = i % 2;
      const double p = 0.55 + 0.4 * unit_uniform(rng);
      inst.class_probs = label == 0 ? std::vector<double>{p, 1 - p} : std::vector<double>{1 - p, p};
      CellRecord rec = to_record(inst, slide);
      rec.extra = nlohmann::json::object();
      cells.push_back(std::move(rec));
      std::vector<float> v(static_cast<std::size_t>(dim));
      for (int k = 0; k < dim; ++k) v[static_cast<std::size_t>(k)] = static_cast<float>((k % 2 == label ? 1.5 : 0.0) + normal(rng));
      table.append(inst.cell_id, v);
    }
    write_cells(root / "cells" / (slide + ".jsonl"), cells);
    write_embeddings(root / "emb" / (slide + ".cvtt"), root / "emb" / (slide + ".jsonl"), table);
    slides.push_back({{"id", slide},
                      {"width", 10 * per_row + 4},
                      {"height", 10 * rows + 4},
                      {"pyramid", "pyramid/" + slide},
                      {"cells", "cells/" + slide + ".jsonl"},
                      {"embeddings", "emb/" + slide + ".cvtt"},
                      {"embedding_index", "emb/" + slide + ".jsonl"},
                      {"split", slide == "A" ? "train" : "val"}});
  }
  std::ofstream out(manifest);
  out << nlohmann::json{{"class_names", {"negative", "positive"}}, {"encoder", "synthetic"}, {"slides", slides}}.dump(2);
}

WorkspaceFixture::~WorkspaceFixture() {
  std::error_code ec;
  std::filesystem::remove_all(root, ec);
}

}  // namespace cellflow::testing
