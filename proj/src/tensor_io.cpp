#include "cellflow/tensor_io.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace cellflow {
namespace {

constexpr std::array<char, 4> kMagic{'C', 'V', 'T', 'T'};

template <class T>
void append_le(std::vector<std::byte>& out, std::span<const T> values) {
  const std::size_t offset = out.size();
  out.resize(offset + values.size_bytes());
  std::byte* dst = out.data() + offset;
  if constexpr (std::endian::native == std::endian::little || sizeof(T) == 1) {
    std::memcpy(dst, values.data(), values.size_bytes());
  } else {
    for (const T& v : values) {
      std::array<std::byte, sizeof(T)> raw;
      std::memcpy(raw.data(), &v, sizeof(T));
      for (std::size_t i = 0; i < sizeof(T); ++i) *dst++ = raw[sizeof(T) - 1 - i];
    }
  }
}

template <class T>
std::vector<T> read_le(const std::byte* src, std::size_t count) {
  std::vector<T> out(count);
  if constexpr (std::endian::native == std::endian::little || sizeof(T) == 1) {
    std::memcpy(out.data(), src, count * sizeof(T));
  } else {
    for (std::size_t k = 0; k < count; ++k) {
      std::array<std::byte, sizeof(T)> raw;
      for (std::size_t i = 0; i < sizeof(T); ++i) raw[i] = src[k * sizeof(T) + sizeof(T) - 1 - i];
      std::memcpy(&out[k], raw.data(), sizeof(T));
    }
  }
  return out;
}

std::uint64_t checked_product(const std::vector<std::uint32_t>& dims) {
  std::uint64_t n = 1;
  for (std::uint32_t d : dims) {
    if (d != 0 && n > kMaxTensorElements / d) {
      fail(ErrorCode::DimOverflow, "element count exceeds 2^40");
    }
    n *= d;
  }
  if (n > kMaxTensorElements) fail(ErrorCode::DimOverflow, "element count exceeds 2^40");
  return n;
}

}  // namespace

std::size_t dtype_size(DType dtype) noexcept {
  switch (dtype) {
    case DType::Float32: return 4;
    case DType::UInt8: return 1;
    case DType::UInt32: return 4;
  }
  return 0;
}

Tensor::Tensor(std::vector<std::uint32_t> dims, std::vector<float> values)
    : dims_(std::move(dims)), storage_(std::move(values)) {
  check();
}
Tensor::Tensor(std::vector<std::uint32_t> dims, std::vector<std::uint8_t> values)
    : dims_(std::move(dims)), storage_(std::move(values)) {
  check();
}
Tensor::Tensor(std::vector<std::uint32_t> dims, std::vector<std::uint32_t> values)
    : dims_(std::move(dims)), storage_(std::move(values)) {
  check();
}

void Tensor::check() const {
  if (dims_.empty() || dims_.size() > 4) fail(ErrorCode::BadRank, "tensor rank must be in [1, 4]");
  const std::uint64_t n = checked_product(dims_);
  const std::size_t have = std::visit([](const auto& v) { return v.size(); }, storage_);
  if (have != n) fail(ErrorCode::ShapeMismatch, "tensor value count does not match dims");
}

DType Tensor::dtype() const noexcept {
  switch (storage_.index()) {
    case 0: return DType::Float32;
    case 1: return DType::UInt8;
    default: return DType::UInt32;
  }
}

std::size_t Tensor::element_count() const noexcept {
  return std::visit([](const auto& v) { return v.size(); }, storage_);
}

std::vector<std::byte> encode_tensor(const Tensor& tensor) {
  std::vector<std::byte> out;
  out.reserve(tensor_header_size(tensor.ndim()) + tensor.element_count() * dtype_size(tensor.dtype()));
  for (char ch : kMagic) out.push_back(static_cast<std::byte>(ch));
  out.push_back(static_cast<std::byte>(kTensorVersion));
  out.push_back(static_cast<std::byte>(tensor.dtype()));
  out.push_back(static_cast<std::byte>(tensor.ndim()));
  append_le<std::uint32_t>(out, tensor.dims());
  switch (tensor.dtype()) {
    case DType::Float32: append_le<float>(out, tensor.values<float>()); break;
    case DType::UInt8: append_le<std::uint8_t>(out, tensor.values<std::uint8_t>()); break;
    case DType::UInt32: append_le<std::uint32_t>(out, tensor.values<std::uint32_t>()); break;
  }
  return out;
}

Tensor decode_tensor(std::span<const std::byte> bytes) {
  if (bytes.size() < 7) fail(ErrorCode::TruncatedPayload, "file shorter than the fixed header");
  if (std::memcmp(bytes.data(), kMagic.data(), kMagic.size()) != 0) fail(ErrorCode::BadMagic, "expected \"CVTT\"");
  const auto version = static_cast<std::uint8_t>(bytes[4]);
  if (version != kTensorVersion) fail(ErrorCode::BadVersion, "unsupported version " + std::to_string(version));
  const auto code = static_cast<std::uint8_t>(bytes[5]);
  if (code < 1 || code > 3) fail(ErrorCode::BadDType, "unknown dtype code " + std::to_string(code));
  const auto dtype = static_cast<DType>(code);
  const std::size_t ndim = static_cast<std::uint8_t>(bytes[6]);
  if (ndim < 1 || ndim > 4) fail(ErrorCode::BadRank, "ndim must be in [1, 4], got " + std::to_string(ndim));
  const std::size_t header = tensor_header_size(ndim);
  if (bytes.size() < header) fail(ErrorCode::TruncatedPayload, "file ends inside the dims block");
  auto dims = read_le<std::uint32_t>(bytes.data() + 7, ndim);
  const std::uint64_t n = checked_product(dims);
  const std::uint64_t payload = n * dtype_size(dtype);
  const std::uint64_t available = bytes.size() - header;
  if (available < payload) {
    fail(ErrorCode::TruncatedPayload,
         "expected " + std::to_string(payload) + " payload bytes, found " + std::to_string(available));
  }
  if (available > payload) fail(ErrorCode::TrailingBytes, std::to_string(available - payload) + " extra bytes after payload");
  const std::byte* src = bytes.data() + header;
  switch (dtype) {
    case DType::Float32: return Tensor(std::move(dims), read_le<float>(src, n));
    case DType::UInt8: return Tensor(std::move(dims), read_le<std::uint8_t>(src, n));
    case DType::UInt32: return Tensor(std::move(dims), read_le<std::uint32_t>(src, n));
  }
  fail(ErrorCode::BadDType, "unreachable");
}

void write_tensor(std::ostream& out, const Tensor& tensor) {
  const auto bytes = encode_tensor(tensor);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::Io, "failed writing tensor");
}

void write_tensor(const std::filesystem::path& path, const Tensor& tensor) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::Io, "cannot open " + path.string() + " for writing");
  write_tensor(out, tensor);
}

Tensor read_tensor(std::istream& in) {
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_tensor(std::as_bytes(std::span<const char>(raw)));
}

Tensor read_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::Io, "cannot open " + path.string());
  try {
    return read_tensor(in);
  } catch (const Error& e) {
    throw Error(e.code(), path.string() + ": " + e.detail());
  }
}

}  // namespace cellflow
