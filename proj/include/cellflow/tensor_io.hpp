#pragma once

// CVTT binary tensor container.
//
// Layout (all integers little-endian):
//   bytes 0..3   magic "CVTT"
//   byte  4      version (1)
//   byte  5      dtype code: 1 = float32, 2 = uint8, 3 = uint32
//   byte  6      ndim in [1, 4]
//   4 * ndim     dims as uint32
//   payload      row-major values, product(dims) * sizeof(dtype) bytes

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <variant>
#include <vector>

#include "cellflow/raster.hpp"

namespace cellflow {

enum class DType : std::uint8_t { Float32 = 1, UInt8 = 2, UInt32 = 3 };

std::size_t dtype_size(DType dtype) noexcept;

inline constexpr std::uint8_t kTensorVersion = 1;
inline constexpr std::uint64_t kMaxTensorElements = std::uint64_t{1} << 40;

class Tensor {
 public:
  using Storage = std::variant<std::vector<float>, std::vector<std::uint8_t>, std::vector<std::uint32_t>>;

  Tensor() = default;
  Tensor(std::vector<std::uint32_t> dims, std::vector<float> values);
  Tensor(std::vector<std::uint32_t> dims, std::vector<std::uint8_t> values);
  Tensor(std::vector<std::uint32_t> dims, std::vector<std::uint32_t> values);

  DType dtype() const noexcept;
  const std::vector<std::uint32_t>& dims() const noexcept { return dims_; }
  std::size_t ndim() const noexcept { return dims_.size(); }
  std::size_t element_count() const noexcept;

  template <class T>
  std::span<const T> values() const {
    const auto* v = std::get_if<std::vector<T>>(&storage_);
    if (v == nullptr) fail(ErrorCode::BadDType, "tensor element type does not match the requested type");
    return *v;
  }

  template <class T>
  std::vector<T> take() && {
    auto* v = std::get_if<std::vector<T>>(&storage_);
    if (v == nullptr) fail(ErrorCode::BadDType, "tensor element type does not match the requested type");
    return std::move(*v);
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  void check() const;

  std::vector<std::uint32_t> dims_;
  Storage storage_{std::vector<float>{}};
};

/// Exact header size for a tensor of the given rank.
constexpr std::size_t tensor_header_size(std::size_t ndim) noexcept { return 4 + 1 + 1 + 1 + 4 * ndim; }

void write_tensor(std::ostream& out, const Tensor& tensor);
void write_tensor(const std::filesystem::path& path, const Tensor& tensor);
Tensor read_tensor(std::istream& in);
Tensor read_tensor(const std::filesystem::path& path);
std::vector<std::byte> encode_tensor(const Tensor& tensor);
Tensor decode_tensor(std::span<const std::byte> bytes);

// Raster <-> tensor. Single-channel rasters map to 2-D tensors, multi-channel to H x W x C.
template <class T>
Tensor to_tensor(const Raster<T>& raster) {
  std::vector<std::uint32_t> dims{static_cast<std::uint32_t>(raster.rows()), static_cast<std::uint32_t>(raster.cols())};
  if (raster.channels() > 1) dims.push_back(static_cast<std::uint32_t>(raster.channels()));
  return Tensor(std::move(dims), raster.data());
}

template <class T>
Raster<T> to_raster(Tensor tensor) {
  const auto& d = tensor.dims();
  if (d.size() != 2 && d.size() != 3) fail(ErrorCode::ShapeMismatch, "raster tensors must be 2-D or 3-D");
  const int rows = static_cast<int>(d[0]);
  const int cols = static_cast<int>(d[1]);
  const int ch = d.size() == 3 ? static_cast<int>(d[2]) : 1;
  return Raster<T>(rows, cols, ch, std::move(tensor).template take<T>());
}

}  // namespace cellflow
