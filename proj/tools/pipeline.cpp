#include "pipeline.hpp"

#include <atomic>
#include <cstdio>
#include <exception>
#include <fstream>
#include <mutex>
#include <thread>

#include "cellflow/geometry.hpp"

namespace cellflow::cli {

std::string tile_file_name(int row, int col) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "r%06d_c%06d.cvtt", row, col);
  return buf;
}

ProbMaps maps_from_tensor(const Tensor& t) {
  if (t.dtype() != DType::Float32 || t.dims().size() != 3 || t.dims()[2] < 3) {
    fail(ErrorCode::ShapeMismatch, "maps must be a float32 (H, W, C>=3) tensor");
  }
  const auto all = to_raster<float>(t);
  const int rows = all.rows(), cols = all.cols(), ch = all.channels();
  ProbMaps maps{FloatRaster(rows, cols), FloatRaster(rows, cols), FloatRaster(rows, cols), std::nullopt};
  if (ch > 3) maps.types = FloatRaster(rows, cols, ch - 3);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      maps.np(r, c) = all(r, c, 0);
      maps.horizontal(r, c) = all(r, c, 1);
      maps.vertical(r, c) = all(r, c, 2);
      for (int k = 3; k < ch; ++k) (*maps.types)(r, c, k - 3) = all(r, c, k);
    }
  }
  return maps;
}

TileSegmentation segment_tile(const ProbMaps& maps, const PostprocParams& params) {
  TileSegmentation seg{postprocess(maps, params), std::nullopt};
  if (maps.types) seg.types = assign_types(seg.instances, *maps.types);
  return seg;
}

namespace {

fs::path types_path(const fs::path& p) {
  auto q = p;
  q.replace_extension(".types.json");
  return q;
}

}  // namespace

void write_segmentation(const fs::path& path, const TileSegmentation& seg) {
  write_tensor(path, to_tensor(seg.instances.labels()));
  const auto sidecar = types_path(path);
  if (!seg.types) {
    fs::remove(sidecar);
    return;
  }
  std::ofstream out(sidecar);
  if (!out) fail(ErrorCode::Io, "cannot write " + sidecar.string());
  out << nlohmann::json(*seg.types).dump() << '\n';
}

TileSegmentation read_segmentation(const fs::path& path) {
  TileSegmentation seg{InstanceMap(to_raster<std::uint32_t>(read_tensor(path))), std::nullopt};
  const auto sidecar = types_path(path);
  if (fs::exists(sidecar)) {
    std::ifstream in(sidecar);
    try {
      seg.types = nlohmann::json::parse(in).get<std::vector<std::vector<double>>>();
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::MalformedLine, sidecar.string() + ": " + e.what());
    }
    if (seg.types->size() != seg.instances.count()) {
      fail(ErrorCode::ShapeMismatch, sidecar.string() + " does not match the instance count");
    }
  }
  return seg;
}

std::vector<CellRecord> merge_segmentations(const TilePlan& plan, const std::map<std::pair<int, int>, TileSegmentation>& tiles,
                                            const std::string& slide_id) {
  std::vector<TileCells> cells;
  for (const Tile& tile : plan.tiles) {
    const auto it = tiles.find({tile.row, tile.col});
    if (it == tiles.end()) {
      fail(ErrorCode::Io, "missing segmentation for tile " + tile_file_name(tile.row, tile.col));
    }
    const auto& seg = it->second;
    if (seg.instances.rows() != plan.geometry.tile_edge || seg.instances.cols() != plan.geometry.tile_edge) {
      fail(ErrorCode::ShapeMismatch, "tile " + tile_file_name(tile.row, tile.col) + " is not tile_edge square");
    }
    TileCells tc{tile.row, tile.col, cells_from_tile(seg.instances, tile, plan, slide_id)};
    if (seg.types) {
      for (std::size_t i = 0; i < tc.cells.size(); ++i) tc.cells[i].class_probs = (*seg.types)[i];
    }
    cells.push_back(std::move(tc));
  }
  return merge_cells(plan, cells, slide_id);
}

EmbeddingTable embed_cells(const std::vector<CellRecord>& cells, const TokenLoader& tokens) {
  std::map<std::pair<int, int>, TokenGrid> grids;
  EmbeddingTable table;
  for (const auto& c : cells) {
    const auto tile = c.extra.find("tile");
    if (tile == c.extra.end() || !tile->is_array() || tile->size() != 2) {
      fail(ErrorCode::InvalidRecord, "cell " + c.cell_id + " has no tile origin");
    }
    const std::pair<int, int> key{(*tile)[0].get<int>(), (*tile)[1].get<int>()};
    auto it = grids.find(key);
    if (it == grids.end()) it = grids.emplace(key, tokens(key.first, key.second)).first;
    const PixelMask mask = rasterize_polygon(c.contour);
    const CellEmbedding e = embed_mask(mask, it->second, key.first, key.second);
    table.append(c.cell_id, e.vector);
  }
  return table;
}

void classify_cells(std::vector<CellRecord>& cells, const EmbeddingTable& table, const Classifier& model) {
  if (cells.empty()) return;
  if (table.dim != static_cast<std::size_t>(model.net.dim)) {
    fail(ErrorCode::DimMismatch, "embeddings have dimension " + std::to_string(table.dim) + " but the classifier expects " +
                                     std::to_string(model.net.dim));
  }
  std::vector<float> x;
  x.reserve(cells.size() * table.dim);
  for (const auto& c : cells) {
    const auto row = table.row(table.row_of(c.cell_id));
    x.insert(x.end(), row.begin(), row.end());
  }
  const auto probs = predict_proba(model, x, cells.size());
  const std::size_t k = model.class_names.size();
  const auto labels = predict_labels(probs, k);
  for (std::size_t i = 0; i < cells.size(); ++i) {
    cells[i].class_probs = std::vector<double>(probs.begin() + i * k, probs.begin() + (i + 1) * k);
    cells[i].class_label = labels[i];
  }
}

ClassNames class_names_of(const Classifier& model) {
  ClassNames names;
  for (std::size_t i = 0; i < model.class_names.size(); ++i) names[static_cast<int>(i)] = model.class_names[i];
  return names;
}

std::string geojson_text(const std::vector<CellRecord>& cells, const ClassNames& names) {
  return to_geojson(cells, names).dump() + "\n";
}

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, threads)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i; (i = next++) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace cellflow::cli
