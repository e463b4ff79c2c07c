#pragma once

#include <filesystem>

#include "cellflow/raster.hpp"

namespace cellflow::cli {

/// Baseline JPEG of a 1- or 3-channel 8-bit raster.
void write_jpeg(const std::filesystem::path& path, const ByteRaster& image, int quality);

}  // namespace cellflow::cli
