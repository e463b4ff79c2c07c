#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "cellflow/raster.hpp"

namespace cellflow {

/// Binary pixel mask stored as a bitmap over its global bounding box.
class PixelMask {
 public:
  PixelMask() = default;
  PixelMask(Rect bbox, std::vector<std::uint8_t> bits);

  /// Mask of every pixel of `labels` equal to `id`, restricted to `window` (whole raster by default).
  static PixelMask from_label(const LabelRaster& labels, std::uint32_t id, const Rect& window);
  static PixelMask from_label(const LabelRaster& labels, std::uint32_t id);

  const Rect& bbox() const noexcept { return bbox_; }
  std::size_t area() const noexcept { return area_; }
  bool empty() const noexcept { return area_ == 0; }

  /// Membership test in global pixel coordinates.
  bool contains(int r, int c) const noexcept {
    return bbox_.contains(r, c) && bits_[static_cast<std::size_t>(r - bbox_.row0) * bbox_.width() + (c - bbox_.col0)] != 0;
  }

  /// Center of mass (unweighted pixel mean), pixel-center convention.
  Point centroid() const;

  PixelMask translated(int drow, int dcol) const;

  template <class Fn>
  void for_each_pixel(Fn&& fn) const {
    const int w = bbox_.width();
    for (int r = 0; r < bbox_.height(); ++r) {
      for (int c = 0; c < w; ++c) {
        if (bits_[static_cast<std::size_t>(r) * w + c]) fn(r + bbox_.row0, c + bbox_.col0);
      }
    }
  }

  const std::vector<std::uint8_t>& bits() const noexcept { return bits_; }

  friend bool operator==(const PixelMask&, const PixelMask&) = default;

 private:
  Rect bbox_;
  std::vector<std::uint8_t> bits_;
  std::size_t area_ = 0;
};

std::size_t intersection_area(const PixelMask& a, const PixelMask& b);
double mask_iou(const PixelMask& a, const PixelMask& b);

/// Outer boundary of the 8-connected component holding the mask's first pixel (raster order),
/// traced along pixel edges. Vertices sit on pixel corners, i.e. at half-integer coordinates in the
/// pixel-center frame; collinear runs are collapsed. The ring is open (first vertex not repeated)
/// and clockwise on screen. Returns an empty ring for an empty mask.
std::vector<Point> trace_contour(const PixelMask& mask);

/// Pixels whose centers fall inside the polygon (even-odd rule).
PixelMask rasterize_polygon(std::span<const Point> ring);

/// Shoelace area, always non-negative.
double polygon_area(std::span<const Point> ring);

/// True when no two non-adjacent edges cross or overlap. Rings traced around diagonal pinch points
/// revisit a corner vertex; touching at a shared vertex is accepted.
bool is_simple_polygon(std::span<const Point> ring);

}  // namespace cellflow
