#include "jpeg.hpp"

#include <cstdio>
#include <memory>

#include <jpeglib.h>

#include "cellflow/error.hpp"

namespace cellflow::cli {

void write_jpeg(const std::filesystem::path& path, const ByteRaster& image, int quality) {
  if (image.channels() != 1 && image.channels() != 3) fail(ErrorCode::ShapeMismatch, "JPEG needs 1 or 3 channels");
  std::unique_ptr<FILE, int (*)(FILE*)> file(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!file) fail(ErrorCode::Io, "cannot write " + path.string());

  jpeg_compress_struct cinfo{};
  jpeg_error_mgr jerr{};
  cinfo.err = jpeg_std_error(&jerr);
  jpeg_create_compress(&cinfo);
  jpeg_stdio_dest(&cinfo, file.get());
  cinfo.image_width = static_cast<JDIMENSION>(image.cols());
  cinfo.image_height = static_cast<JDIMENSION>(image.rows());
  cinfo.input_components = image.channels();
  cinfo.in_color_space = image.channels() == 3 ? JCS_RGB : JCS_GRAYSCALE;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, quality, TRUE);
  jpeg_start_compress(&cinfo, TRUE);
  const std::size_t stride = static_cast<std::size_t>(image.cols()) * image.channels();
  while (cinfo.next_scanline < cinfo.image_height) {
    auto* row = const_cast<JSAMPLE*>(image.data().data() + cinfo.next_scanline * stride);
    jpeg_write_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_compress(&cinfo);
  jpeg_destroy_compress(&cinfo);
}

}  // namespace cellflow::cli
