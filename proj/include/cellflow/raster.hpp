#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "cellflow/error.hpp"

namespace cellflow {

/// Dense row-major raster with interleaved channels (H x W x C).
template <class T>
class Raster {
 public:
  Raster() = default;
  Raster(int rows, int cols, int channels = 1, T fill = T{})
      : rows_(rows), cols_(cols), channels_(channels) {
    if (rows < 0 || cols < 0 || channels < 1) {
      fail(ErrorCode::InvalidArgument, "raster dimensions must be non-negative with >= 1 channel");
    }
    data_.assign(static_cast<std::size_t>(rows) * cols * channels, fill);
  }
  Raster(int rows, int cols, int channels, std::vector<T> data)
      : rows_(rows), cols_(cols), channels_(channels), data_(std::move(data)) {
    if (data_.size() != static_cast<std::size_t>(rows) * cols * channels) {
      fail(ErrorCode::ShapeMismatch, "raster buffer length does not match dimensions");
    }
  }

  int rows() const noexcept { return rows_; }
  int cols() const noexcept { return cols_; }
  int channels() const noexcept { return channels_; }
  bool empty() const noexcept { return rows_ == 0 || cols_ == 0; }
  std::size_t pixel_count() const noexcept { return static_cast<std::size_t>(rows_) * cols_; }

  bool contains(int r, int c) const noexcept { return r >= 0 && c >= 0 && r < rows_ && c < cols_; }

  std::size_t index(int r, int c, int ch = 0) const noexcept {
    return (static_cast<std::size_t>(r) * cols_ + c) * channels_ + ch;
  }
  T& operator()(int r, int c, int ch = 0) noexcept { return data_[index(r, c, ch)]; }
  const T& operator()(int r, int c, int ch = 0) const noexcept { return data_[index(r, c, ch)]; }

  std::span<T> pixel(int r, int c) noexcept { return {data_.data() + index(r, c), static_cast<std::size_t>(channels_)}; }
  std::span<const T> pixel(int r, int c) const noexcept {
    return {data_.data() + index(r, c), static_cast<std::size_t>(channels_)};
  }

  std::vector<T>& data() noexcept { return data_; }
  const std::vector<T>& data() const noexcept { return data_; }

  bool same_shape(int rows, int cols) const noexcept { return rows_ == rows && cols_ == cols; }

  friend bool operator==(const Raster&, const Raster&) = default;

 private:
  int rows_ = 0;
  int cols_ = 0;
  int channels_ = 1;
  std::vector<T> data_;
};

using FloatRaster = Raster<float>;
using LabelRaster = Raster<std::uint32_t>;
using ByteRaster = Raster<std::uint8_t>;

/// Half-open pixel rectangle [row0, row1) x [col0, col1).
struct Rect {
  int row0 = 0;
  int col0 = 0;
  int row1 = 0;
  int col1 = 0;

  int height() const noexcept { return row1 - row0; }
  int width() const noexcept { return col1 - col0; }
  bool empty() const noexcept { return row1 <= row0 || col1 <= col0; }
  bool contains(int r, int c) const noexcept { return r >= row0 && r < row1 && c >= col0 && c < col1; }
  bool intersects(const Rect& o) const noexcept {
    return row0 < o.row1 && o.row0 < row1 && col0 < o.col1 && o.col0 < col1;
  }
  friend bool operator==(const Rect&, const Rect&) = default;
};

/// Sub-pixel location; pixel (r, c) has its center at (r, c).
struct Point {
  double row = 0.0;
  double col = 0.0;
  friend bool operator==(const Point&, const Point&) = default;
};

}  // namespace cellflow
