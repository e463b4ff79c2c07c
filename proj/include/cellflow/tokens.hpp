#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cellflow/geometry.hpp"
#include "cellflow/postproc.hpp"
#include "cellflow/tensor_io.hpp"

namespace cellflow {

/// Layout of a flat token matrix: an H x W tile cut into P x P patches, preceded by k_extra
/// non-spatial rows (class/register tokens).
struct TokenLayout {
  int patch = 16;
  int height = 0;
  int width = 0;
  int k_extra = 0;
  std::string encoder;

  int grid_rows() const noexcept { return patch > 0 ? height / patch : 0; }
  int grid_cols() const noexcept { return patch > 0 ? width / patch : 0; }
};

nlohmann::json to_json(const TokenLayout& layout);  // {P, H, W, k_extra, encoder}
TokenLayout token_layout_from_json(const nlohmann::json& j);

/// Spatial tokens on a (H/P) x (W/P) grid, D floats each.
struct TokenGrid {
  int rows = 0;
  int cols = 0;
  int dim = 0;
  int patch = 16;
  int k_extra = 0;
  std::string encoder;
  std::vector<float> data;  // rows x cols x dim

  std::span<const float> token(int r, int c) const {
    return {data.data() + (static_cast<std::size_t>(r) * cols + c) * dim, static_cast<std::size_t>(dim)};
  }
  std::span<float> token(int r, int c) {
    return {data.data() + (static_cast<std::size_t>(r) * cols + c) * dim, static_cast<std::size_t>(dim)};
  }
};

/// `flat` is (N + k_extra) x dim row-major. Row k_extra + r * (W/P) + c lands at grid[r][c].
/// Throws CountMismatch when the row count disagrees with the layout.
TokenGrid reshape_tokens(std::span<const float> flat, std::size_t flat_rows, std::size_t dim, const TokenLayout& layout);
TokenGrid reshape_tokens(const Tensor& flat, const TokenLayout& layout);

/// Inverse of reshape_tokens without the extra rows: N x dim.
std::vector<float> flatten_tokens(const TokenGrid& grid);

/// 3-D (rows x cols x D) tensor <-> grid.
TokenGrid token_grid_from_tensor(const Tensor& t, int patch, std::string encoder = {});
Tensor to_tensor(const TokenGrid& grid);

struct CellEmbedding {
  std::uint32_t instance_id = 0;
  std::string cell_id;
  std::vector<float> vector;
  std::size_t n_tokens = 0;
};

/// Unweighted mean of every token whose P x P footprint holds at least one mask pixel. The mask is
/// in grid pixel coordinates shifted by (row_offset, col_offset).
CellEmbedding embed_mask(const PixelMask& mask, const TokenGrid& grid, int row_offset = 0, int col_offset = 0);

/// One embedding per instance, in id order. The map must measure (rows * P) x (cols * P).
std::vector<CellEmbedding> extract_embeddings(const InstanceMap& inst, const TokenGrid& grid);

/// N x D embedding matrix plus its row index.
struct EmbeddingTable {
  std::size_t dim = 0;
  std::vector<std::string> cell_ids;
  std::vector<float> data;
  std::map<std::string, std::size_t> rows;

  std::size_t size() const noexcept { return cell_ids.size(); }
  std::span<const float> row(std::size_t i) const { return {data.data() + i * dim, dim}; }
  /// Throws MissingEmbedding when absent.
  std::size_t row_of(const std::string& cell_id) const;
  void append(const std::string& cell_id, std::span<const float> v);
};

EmbeddingTable make_table(const std::vector<CellEmbedding>& embeddings);

/// Writes `<matrix>` (CVTT f32, N x D) and `<index>` (JSON lines {row, cell_id}).
void write_embeddings(const std::filesystem::path& matrix, const std::filesystem::path& index, const EmbeddingTable& table);
EmbeddingTable read_embeddings(const std::filesystem::path& matrix, const std::filesystem::path& index);

}  // namespace cellflow
