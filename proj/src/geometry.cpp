#include "cellflow/geometry.hpp"

#include <algorithm>
#include <array>
#include <cmath>

namespace cellflow {

PixelMask::PixelMask(Rect bbox, std::vector<std::uint8_t> bits) : bbox_(bbox), bits_(std::move(bits)) {
  if (bits_.size() != static_cast<std::size_t>(std::max(0, bbox_.height())) * std::max(0, bbox_.width())) {
    fail(ErrorCode::ShapeMismatch, "mask bitmap does not match its bounding box");
  }
  area_ = static_cast<std::size_t>(std::count_if(bits_.begin(), bits_.end(), [](std::uint8_t b) { return b != 0; }));
}

PixelMask PixelMask::from_label(const LabelRaster& labels, std::uint32_t id, const Rect& window) {
  int r0 = window.row1, r1 = window.row0, c0 = window.col1, c1 = window.col0;
  for (int r = window.row0; r < window.row1; ++r) {
    for (int c = window.col0; c < window.col1; ++c) {
      if (labels(r, c) == id) {
        r0 = std::min(r0, r);
        r1 = std::max(r1, r + 1);
        c0 = std::min(c0, c);
        c1 = std::max(c1, c + 1);
      }
    }
  }
  if (r1 <= r0) return {};
  Rect box{r0, c0, r1, c1};
  std::vector<std::uint8_t> bits(static_cast<std::size_t>(box.height()) * box.width(), 0);
  for (int r = r0; r < r1; ++r) {
    for (int c = c0; c < c1; ++c) {
      if (labels(r, c) == id) bits[static_cast<std::size_t>(r - r0) * box.width() + (c - c0)] = 1;
    }
  }
  return PixelMask(box, std::move(bits));
}

PixelMask PixelMask::from_label(const LabelRaster& labels, std::uint32_t id) {
  return from_label(labels, id, Rect{0, 0, labels.rows(), labels.cols()});
}

Point PixelMask::centroid() const {
  double sr = 0.0, sc = 0.0;
  for_each_pixel([&](int r, int c) {
    sr += r;
    sc += c;
  });
  if (area_ == 0) return {};
  return {sr / static_cast<double>(area_), sc / static_cast<double>(area_)};
}

PixelMask PixelMask::translated(int drow, int dcol) const {
  PixelMask out = *this;
  out.bbox_ = Rect{bbox_.row0 + drow, bbox_.col0 + dcol, bbox_.row1 + drow, bbox_.col1 + dcol};
  return out;
}

std::size_t intersection_area(const PixelMask& a, const PixelMask& b) {
  if (!a.bbox().intersects(b.bbox())) return 0;
  const Rect& ra = a.bbox();
  const Rect& rb = b.bbox();
  const int r0 = std::max(ra.row0, rb.row0), r1 = std::min(ra.row1, rb.row1);
  const int c0 = std::max(ra.col0, rb.col0), c1 = std::min(ra.col1, rb.col1);
  std::size_t n = 0;
  for (int r = r0; r < r1; ++r) {
    for (int c = c0; c < c1; ++c) n += (a.contains(r, c) && b.contains(r, c)) ? 1 : 0;
  }
  return n;
}

double mask_iou(const PixelMask& a, const PixelMask& b) {
  const std::size_t inter = intersection_area(a, b);
  const std::size_t uni = a.area() + b.area() - inter;
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

namespace {

// Headings in clockwise order: east, south, west, north (row axis points down).
constexpr std::array<int, 4> kStepRow{0, 1, 0, -1};
constexpr std::array<int, 4> kStepCol{1, 0, -1, 0};
// Pixels ahead of a corner vertex (y, x) for each heading, as offsets from (y, x).
constexpr std::array<std::array<int, 2>, 4> kAheadLeft{{{-1, 0}, {0, 0}, {0, -1}, {-1, -1}}};
constexpr std::array<std::array<int, 2>, 4> kAheadRight{{{0, 0}, {0, -1}, {-1, -1}, {-1, 0}}};

double cross(const Point& o, const Point& a, const Point& b) {
  return (a.col - o.col) * (b.row - o.row) - (a.row - o.row) * (b.col - o.col);
}

int sign(double v) { return (v > 0) - (v < 0); }

bool on_segment(const Point& p, const Point& a, const Point& b) {
  return std::min(a.col, b.col) <= p.col && p.col <= std::max(a.col, b.col) && std::min(a.row, b.row) <= p.row &&
         p.row <= std::max(a.row, b.row);
}

// Segments (a, b) and (c, d) share a point other than a common endpoint.
bool segments_conflict(const Point& a, const Point& b, const Point& c, const Point& d) {
  const int d1 = sign(cross(c, d, a)), d2 = sign(cross(c, d, b));
  const int d3 = sign(cross(a, b, c)), d4 = sign(cross(a, b, d));
  if (d1 * d2 < 0 && d3 * d4 < 0) return true;
  if (d1 == 0 && d2 == 0) {
    // Collinear: any overlap longer than a point is a conflict.
    const bool by_col = std::abs(b.col - a.col) >= std::abs(b.row - a.row);
    auto key = [by_col](const Point& p) { return by_col ? p.col : p.row; };
    const double lo = std::max(std::min(key(a), key(b)), std::min(key(c), key(d)));
    const double hi = std::min(std::max(key(a), key(b)), std::max(key(c), key(d)));
    if (hi > lo) return true;
    if (hi < lo) return false;
  }
  auto touches = [](const Point& p, const Point& s0, const Point& s1) {
    return sign(cross(s0, s1, p)) == 0 && on_segment(p, s0, s1);
  };
  auto is_end = [](const Point& p, const Point& s0, const Point& s1) { return p == s0 || p == s1; };
  for (const Point* p : {&a, &b}) {
    if (touches(*p, c, d) && !is_end(*p, c, d)) return true;
  }
  for (const Point* p : {&c, &d}) {
    if (touches(*p, a, b) && !is_end(*p, a, b)) return true;
  }
  return false;
}

}  // namespace

std::vector<Point> trace_contour(const PixelMask& mask) {
  if (mask.empty()) return {};
  const Rect& box = mask.bbox();
  auto fg = [&](int r, int c) { return mask.contains(r, c); };

  int start_r = -1, start_c = -1;
  for (int r = box.row0; r < box.row1 && start_r < 0; ++r) {
    for (int c = box.col0; c < box.col1; ++c) {
      if (fg(r, c)) {
        start_r = r;
        start_c = c;
        break;
      }
    }
  }

  // Walk pixel corners keeping foreground on the right-hand side; turning left first joins
  // diagonal neighbours, which gives 8-connectivity for the foreground.
  std::vector<std::array<int, 2>> corners;
  int y = start_r, x = start_c, heading = 0;
  const std::size_t limit = 4 * (static_cast<std::size_t>(box.height()) + 2) * (static_cast<std::size_t>(box.width()) + 2);
  for (std::size_t steps = 0; steps <= limit; ++steps) {
    const int left = (heading + 3) % 4;
    const int right = (heading + 1) % 4;
    int next;
    if (fg(y + kAheadLeft[heading][0], x + kAheadLeft[heading][1])) {
      next = left;
    } else if (fg(y + kAheadRight[heading][0], x + kAheadRight[heading][1])) {
      next = heading;
    } else {
      next = right;
    }
    if (steps > 0 && y == start_r && x == start_c && next == 0) break;
    if (next != heading || steps == 0) corners.push_back({y, x});
    heading = next;
    y += kStepRow[heading];
    x += kStepCol[heading];
  }

  std::vector<Point> ring;
  ring.reserve(corners.size());
  for (const auto& v : corners) ring.push_back({v[0] - 0.5, v[1] - 0.5});
  return ring;
}

PixelMask rasterize_polygon(std::span<const Point> ring) {
  if (ring.size() < 3) return {};
  double rmin = ring[0].row, rmax = ring[0].row, cmin = ring[0].col, cmax = ring[0].col;
  for (const Point& p : ring) {
    rmin = std::min(rmin, p.row);
    rmax = std::max(rmax, p.row);
    cmin = std::min(cmin, p.col);
    cmax = std::max(cmax, p.col);
  }
  const Rect box{static_cast<int>(std::ceil(rmin)), static_cast<int>(std::ceil(cmin)),
                 static_cast<int>(std::floor(rmax)) + 1, static_cast<int>(std::floor(cmax)) + 1};
  if (box.empty()) return {};
  std::vector<std::uint8_t> bits(static_cast<std::size_t>(box.height()) * box.width(), 0);
  std::vector<double> xs;
  const std::size_t n = ring.size();
  for (int r = box.row0; r < box.row1; ++r) {
    xs.clear();
    for (std::size_t i = 0; i < n; ++i) {
      const Point& a = ring[i];
      const Point& b = ring[(i + 1) % n];
      if (a.row == b.row) continue;
      const double lo = std::min(a.row, b.row), hi = std::max(a.row, b.row);
      if (r < lo || r >= hi) continue;
      xs.push_back(a.col + (r - a.row) * (b.col - a.col) / (b.row - a.row));
    }
    std::sort(xs.begin(), xs.end());
    for (std::size_t k = 0; k + 1 < xs.size(); k += 2) {
      const int c0 = std::max(box.col0, static_cast<int>(std::ceil(xs[k])));
      const int c1 = std::min(box.col1 - 1, static_cast<int>(std::floor(xs[k + 1])));
      for (int c = c0; c <= c1; ++c) {
        if (c == xs[k + 1]) continue;
        bits[static_cast<std::size_t>(r - box.row0) * box.width() + (c - box.col0)] = 1;
      }
    }
  }
  return PixelMask(box, std::move(bits));
}

double polygon_area(std::span<const Point> ring) {
  const std::size_t n = ring.size();
  double twice = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Point& a = ring[i];
    const Point& b = ring[(i + 1) % n];
    twice += a.col * b.row - b.col * a.row;
  }
  return std::abs(twice) / 2.0;
}

bool is_simple_polygon(std::span<const Point> ring) {
  const std::size_t n = ring.size();
  if (n < 3) return false;
  for (std::size_t i = 0; i < n; ++i) {
    if (ring[i] == ring[(i + 1) % n]) return false;
  }
  for (std::size_t i = 0; i < n; ++i) {
    const Point& a = ring[i];
    const Point& b = ring[(i + 1) % n];
    for (std::size_t j = i + 1; j < n; ++j) {
      if (j == i + 1 || (i == 0 && j == n - 1)) continue;
      if (segments_conflict(a, b, ring[j], ring[(j + 1) % n])) return false;
    }
  }
  return true;
}

}  // namespace cellflow
