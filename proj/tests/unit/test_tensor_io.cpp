#include <cstring>
#include <filesystem>
#include <random>
#include <sstream>

#include "doctest.h"

#include "cellflow/tensor_io.hpp"

using namespace cellflow;

namespace {

ErrorCode decode_error(std::vector<std::byte> bytes) {
  try {
    decode_tensor(bytes);
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return ErrorCode::InvalidArgument;
}

std::vector<std::byte> header(const char* magic, std::uint8_t version, std::uint8_t dtype, std::vector<std::uint32_t> dims) {
  std::vector<std::byte> out;
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::byte>(magic[i]));
  out.push_back(static_cast<std::byte>(version));
  out.push_back(static_cast<std::byte>(dtype));
  out.push_back(static_cast<std::byte>(dims.size()));
  for (auto d : dims) {
    for (int k = 0; k < 4; ++k) out.push_back(static_cast<std::byte>((d >> (8 * k)) & 0xFF));
  }
  return out;
}

}  // namespace

TEST_CASE("2x3 float zeros round trip through a file") {
  const auto path = std::filesystem::temp_directory_path() / "cellflow_t23.cvtt";
  const Tensor t({2, 3}, std::vector<float>(6, 0.0f));
  write_tensor(path, t);
  const Tensor back = read_tensor(path);
  CHECK(back == t);
  CHECK(back.dims() == std::vector<std::uint32_t>{2, 3});
  std::filesystem::remove(path);
}

TEST_CASE("byte layout") {
  const Tensor t({2}, std::vector<std::uint32_t>{1, 0x01020304});
  const auto bytes = encode_tensor(t);
  REQUIRE(bytes.size() == tensor_header_size(1) + 8);
  CHECK(std::memcmp(bytes.data(), "CVTT", 4) == 0);
  CHECK(bytes[4] == std::byte{1});
  CHECK(bytes[5] == std::byte{3});
  CHECK(bytes[6] == std::byte{1});
  CHECK(bytes[7] == std::byte{2});
  CHECK(bytes[15] == std::byte{0x04});
  CHECK(bytes[18] == std::byte{0x01});
}

TEST_CASE("1024x1024 float map size") {
  const Tensor t({1024, 1024}, std::vector<float>(1024 * 1024, 0.5f));
  const auto bytes = encode_tensor(t);
  // 4 magic + version + dtype + ndim + 2 dims of 4 bytes.
  CHECK(tensor_header_size(2) == 4 + 1 + 1 + 1 + 2 * 4);
  CHECK(bytes.size() == 4 * 1024 * 1024 + tensor_header_size(2));
}

TEST_CASE("rejections") {
  CHECK(decode_error(header("XXXX", 1, 1, {1})) == ErrorCode::BadMagic);
  CHECK(decode_error(header("CVTT", 2, 1, {1})) == ErrorCode::BadVersion);
  CHECK(decode_error(header("CVTT", 1, 9, {1})) == ErrorCode::BadDType);
  CHECK(decode_error(header("CVTT", 1, 1, {})) == ErrorCode::BadRank);
  CHECK(decode_error(header("CVTT", 1, 1, {1, 1, 1, 1, 1})) == ErrorCode::BadRank);
  CHECK(decode_error(header("CVTT", 1, 1, {3})) == ErrorCode::TruncatedPayload);
  CHECK(decode_error(header("CVTT", 1, 2, {1u << 21, 1u << 20})) == ErrorCode::DimOverflow);
  CHECK(decode_error({std::byte{'C'}, std::byte{'V'}}) == ErrorCode::TruncatedPayload);
  auto extra = header("CVTT", 1, 2, {1});
  extra.push_back(std::byte{7});
  extra.push_back(std::byte{8});
  CHECK(decode_error(extra) == ErrorCode::TrailingBytes);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<float>(3)), Error);
  try {
    read_tensor(std::filesystem::path("/nonexistent/x.cvtt"));
    FAIL("expected Io");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::Io);
  }
}

TEST_CASE("random tensors round trip bit-exactly") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t nd = 1 + rng() % 4;
    std::vector<std::uint32_t> dims(nd);
    std::size_t n = 1;
    for (auto& d : dims) n *= (d = static_cast<std::uint32_t>(rng() % 5));
    Tensor t;
    switch (rng() % 3) {
      case 0: {
        std::vector<float> v(n);
        for (auto& x : v) {
          const auto bits = static_cast<std::uint32_t>(rng());
          std::memcpy(&x, &bits, 4);  // any bit pattern, NaN payloads included
        }
        t = Tensor(dims, std::move(v));
        break;
      }
      case 1: {
        std::vector<std::uint8_t> v(n);
        for (auto& x : v) x = static_cast<std::uint8_t>(rng());
        t = Tensor(dims, std::move(v));
        break;
      }
      default: {
        std::vector<std::uint32_t> v(n);
        for (auto& x : v) x = static_cast<std::uint32_t>(rng());
        t = Tensor(dims, std::move(v));
      }
    }
    const auto bytes = encode_tensor(t);
    CHECK(encode_tensor(decode_tensor(bytes)) == bytes);
    std::stringstream ss;
    write_tensor(ss, t);
    CHECK(encode_tensor(read_tensor(ss)) == bytes);
  }
}

TEST_CASE("raster conversion") {
  LabelRaster r(3, 4, 1, 0u);
  r(2, 3) = 9;
  const Tensor t = to_tensor(r);
  CHECK(t.dims() == std::vector<std::uint32_t>{3, 4});
  CHECK(to_raster<std::uint32_t>(t) == r);
  FloatRaster f(2, 2, 3, 0.25f);
  CHECK(to_tensor(f).dims() == std::vector<std::uint32_t>{2, 2, 3});
  CHECK(to_raster<float>(to_tensor(f)) == f);
  CHECK_THROWS_AS(to_raster<float>(t), Error);
}
