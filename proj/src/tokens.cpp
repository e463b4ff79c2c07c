#include "cellflow/tokens.hpp"

#include <cmath>
#include <fstream>
#include <set>

namespace cellflow {

nlohmann::json to_json(const TokenLayout& layout) {
  return {{"P", layout.patch}, {"H", layout.height}, {"W", layout.width}, {"k_extra", layout.k_extra}, {"encoder", layout.encoder}};
}

TokenLayout token_layout_from_json(const nlohmann::json& j) {
  TokenLayout l;
  l.patch = j.at("P").get<int>();
  l.height = j.at("H").get<int>();
  l.width = j.at("W").get<int>();
  l.k_extra = j.value("k_extra", 0);
  l.encoder = j.value("encoder", std::string{});
  return l;
}

TokenGrid reshape_tokens(std::span<const float> flat, std::size_t flat_rows, std::size_t dim, const TokenLayout& layout) {
  if (layout.patch <= 0 || layout.height <= 0 || layout.width <= 0 || layout.height % layout.patch != 0 ||
      layout.width % layout.patch != 0) {
    fail(ErrorCode::InvalidArgument, "tile dimensions must be positive multiples of the patch size");
  }
  if (dim == 0) fail(ErrorCode::DimMismatch, "token dimension must be positive");
  if (layout.k_extra < 0) fail(ErrorCode::InvalidArgument, "k_extra must be non-negative");
  if (flat.size() != flat_rows * dim) fail(ErrorCode::ShapeMismatch, "token buffer does not hold rows x dim values");
  const std::size_t n = static_cast<std::size_t>(layout.grid_rows()) * layout.grid_cols();
  if (flat_rows != n + static_cast<std::size_t>(layout.k_extra)) {
    fail(ErrorCode::CountMismatch, "expected " + std::to_string(n) + " spatial + " + std::to_string(layout.k_extra) +
                                       " extra tokens, got " + std::to_string(flat_rows));
  }
  TokenGrid g;
  g.rows = layout.grid_rows();
  g.cols = layout.grid_cols();
  g.dim = static_cast<int>(dim);
  g.patch = layout.patch;
  g.k_extra = layout.k_extra;
  g.encoder = layout.encoder;
  const auto first = flat.begin() + static_cast<std::ptrdiff_t>(layout.k_extra * dim);
  g.data.assign(first, flat.end());
  return g;
}

TokenGrid reshape_tokens(const Tensor& flat, const TokenLayout& layout) {
  if (flat.dims().size() != 2 || flat.dtype() != DType::Float32) {
    fail(ErrorCode::ShapeMismatch, "flat tokens must be a 2-D float32 tensor");
  }
  return reshape_tokens(flat.values<float>(), flat.dims()[0], flat.dims()[1], layout);
}

std::vector<float> flatten_tokens(const TokenGrid& grid) { return grid.data; }

TokenGrid token_grid_from_tensor(const Tensor& t, int patch, std::string encoder) {
  if (t.dims().size() != 3 || t.dtype() != DType::Float32) fail(ErrorCode::ShapeMismatch, "token grid must be a 3-D float32 tensor");
  if (patch <= 0) fail(ErrorCode::InvalidArgument, "patch size must be positive");
  TokenGrid g;
  g.rows = static_cast<int>(t.dims()[0]);
  g.cols = static_cast<int>(t.dims()[1]);
  g.dim = static_cast<int>(t.dims()[2]);
  if (g.dim == 0) fail(ErrorCode::DimMismatch, "token dimension must be positive");
  g.patch = patch;
  g.encoder = std::move(encoder);
  const auto v = t.values<float>();
  g.data.assign(v.begin(), v.end());
  return g;
}

Tensor to_tensor(const TokenGrid& grid) {
  return Tensor({static_cast<std::uint32_t>(grid.rows), static_cast<std::uint32_t>(grid.cols), static_cast<std::uint32_t>(grid.dim)},
                grid.data);
}

CellEmbedding embed_mask(const PixelMask& mask, const TokenGrid& grid, int row_offset, int col_offset) {
  std::set<std::pair<int, int>> cells;
  const int p = grid.patch;
  mask.for_each_pixel([&](int r, int c) {
    const int lr = r - row_offset, lc = c - col_offset;
    if (lr < 0 || lc < 0 || lr >= grid.rows * p || lc >= grid.cols * p) {
      fail(ErrorCode::ShapeMismatch, "mask pixel outside the token grid footprint");
    }
    cells.emplace(lr / p, lc / p);
  });
  if (cells.empty()) fail(ErrorCode::InvalidArgument, "cannot embed an empty mask");
  std::vector<double> acc(static_cast<std::size_t>(grid.dim), 0.0);
  for (const auto& [r, c] : cells) {
    const auto t = grid.token(r, c);
    for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += t[k];
  }
  CellEmbedding e;
  e.n_tokens = cells.size();
  e.vector.resize(acc.size());
  for (std::size_t k = 0; k < acc.size(); ++k) e.vector[k] = static_cast<float>(acc[k] / static_cast<double>(cells.size()));
  return e;
}

std::vector<CellEmbedding> extract_embeddings(const InstanceMap& inst, const TokenGrid& grid) {
  if (inst.rows() != grid.rows * grid.patch || inst.cols() != grid.cols * grid.patch) {
    fail(ErrorCode::ShapeMismatch, "instance map is " + std::to_string(inst.rows()) + "x" + std::to_string(inst.cols()) +
                                       " but the token grid covers " + std::to_string(grid.rows * grid.patch) + "x" +
                                       std::to_string(grid.cols * grid.patch));
  }
  std::vector<CellEmbedding> out;
  out.reserve(inst.count());
  for (const auto& s : inst.instances()) {
    CellEmbedding e = embed_mask(PixelMask::from_label(inst.labels(), s.id, s.bbox), grid);
    e.instance_id = s.id;
    out.push_back(std::move(e));
  }
  return out;
}

std::size_t EmbeddingTable::row_of(const std::string& cell_id) const {
  auto it = rows.find(cell_id);
  if (it == rows.end()) fail(ErrorCode::MissingEmbedding, "no embedding for cell " + cell_id);
  return it->second;
}

void EmbeddingTable::append(const std::string& cell_id, std::span<const float> v) {
  if (cell_ids.empty() && dim == 0) dim = v.size();
  if (v.size() != dim) fail(ErrorCode::DimMismatch, "embedding for " + cell_id + " has the wrong dimension");
  if (!rows.emplace(cell_id, cell_ids.size()).second) fail(ErrorCode::InvalidRecord, "duplicate embedding for " + cell_id);
  cell_ids.push_back(cell_id);
  data.insert(data.end(), v.begin(), v.end());
}

EmbeddingTable make_table(const std::vector<CellEmbedding>& embeddings) {
  EmbeddingTable t;
  for (const auto& e : embeddings) t.append(e.cell_id, e.vector);
  return t;
}

void write_embeddings(const std::filesystem::path& matrix, const std::filesystem::path& index, const EmbeddingTable& table) {
  write_tensor(matrix, Tensor({static_cast<std::uint32_t>(table.size()), static_cast<std::uint32_t>(table.dim)}, table.data));
  std::ofstream out(index);
  if (!out) fail(ErrorCode::Io, "cannot write " + index.string());
  for (std::size_t i = 0; i < table.size(); ++i) {
    out << nlohmann::json{{"row", i}, {"cell_id", table.cell_ids[i]}}.dump() << '\n';
  }
  if (!out) fail(ErrorCode::Io, "write failed for " + index.string());
}

EmbeddingTable read_embeddings(const std::filesystem::path& matrix, const std::filesystem::path& index) {
  const Tensor t = read_tensor(matrix);
  if (t.dims().size() != 2 || t.dtype() != DType::Float32) fail(ErrorCode::ShapeMismatch, "embedding matrix must be 2-D float32");
  const std::size_t n = t.dims()[0], dim = t.dims()[1];
  std::vector<std::string> ids(n);
  std::vector<char> filled(n, 0);
  std::ifstream in(index);
  if (!in) fail(ErrorCode::Io, "cannot open " + index.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::MalformedLine, index.string() + " line " + std::to_string(lineno) + ": " + e.what());
    }
    const auto row = j.at("row").get<std::size_t>();
    if (row >= n || filled[row]) fail(ErrorCode::MalformedLine, index.string() + " line " + std::to_string(lineno) + ": bad row");
    filled[row] = 1;
    ids[row] = j.at("cell_id").get<std::string>();
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!filled[i]) fail(ErrorCode::CountMismatch, "index does not cover matrix row " + std::to_string(i));
  }
  EmbeddingTable table;
  table.dim = dim;
  const auto v = t.values<float>();
  for (std::size_t i = 0; i < n; ++i) table.append(ids[i], v.subspan(i * dim, dim));
  return table;
}

}  // namespace cellflow
