#include "cellflow/postproc.hpp"

#include <algorithm>
#include <array>
#include <limits>
#include <queue>
#include <span>
#include <unordered_map>

namespace cellflow {

InstanceMap::InstanceMap(LabelRaster labels) : labels_(std::move(labels)) {
  if (labels_.channels() != 1) fail(ErrorCode::ShapeMismatch, "instance map must be single-channel");
  struct Acc {
    double sr = 0, sc = 0;
    std::size_t n = 0;
    Rect box{std::numeric_limits<int>::max(), std::numeric_limits<int>::max(), 0, 0};
  };
  std::unordered_map<std::uint32_t, Acc> acc;
  for (int r = 0; r < labels_.rows(); ++r) {
    for (int c = 0; c < labels_.cols(); ++c) {
      const std::uint32_t id = labels_(r, c);
      if (id == 0) continue;
      Acc& a = acc[id];
      a.sr += r;
      a.sc += c;
      ++a.n;
      a.box.row0 = std::min(a.box.row0, r);
      a.box.col0 = std::min(a.box.col0, c);
      a.box.row1 = std::max(a.box.row1, r + 1);
      a.box.col1 = std::max(a.box.col1, c + 1);
    }
  }
  instances_.reserve(acc.size());
  for (const auto& [id, a] : acc) {
    instances_.push_back({id, {a.sr / static_cast<double>(a.n), a.sc / static_cast<double>(a.n)}, a.n, a.box});
  }
  std::sort(instances_.begin(), instances_.end(), [](const auto& x, const auto& y) { return x.id < y.id; });
}

const InstanceSummary* InstanceMap::find(std::uint32_t id) const {
  auto it = std::lower_bound(instances_.begin(), instances_.end(), id,
                             [](const InstanceSummary& s, std::uint32_t v) { return s.id < v; });
  return (it != instances_.end() && it->id == id) ? &*it : nullptr;
}

LabelRaster label_components(const ByteRaster& mask, Connectivity connectivity, std::uint32_t* count) {
  LabelRaster out(mask.rows(), mask.cols(), 1, 0u);
  std::uint32_t next = 0;
  std::vector<std::pair<int, int>> stack;
  const bool eight = connectivity == Connectivity::Eight;
  for (int r = 0; r < mask.rows(); ++r) {
    for (int c = 0; c < mask.cols(); ++c) {
      if (mask(r, c) == 0 || out(r, c) != 0) continue;
      ++next;
      out(r, c) = next;
      stack.assign(1, {r, c});
      while (!stack.empty()) {
        auto [pr, pc] = stack.back();
        stack.pop_back();
        for (int dr = -1; dr <= 1; ++dr) {
          for (int dc = -1; dc <= 1; ++dc) {
            if ((dr == 0 && dc == 0) || (!eight && dr != 0 && dc != 0)) continue;
            const int nr = pr + dr, nc = pc + dc;
            if (!mask.contains(nr, nc) || mask(nr, nc) == 0 || out(nr, nc) != 0) continue;
            out(nr, nc) = next;
            stack.emplace_back(nr, nc);
          }
        }
      }
    }
  }
  if (count) *count = next;
  return out;
}

void remove_small_instances(LabelRaster& labels, std::size_t min_size) {
  if (min_size <= 1) return;
  std::unordered_map<std::uint32_t, std::size_t> sizes;
  for (std::uint32_t v : labels.data()) {
    if (v != 0) ++sizes[v];
  }
  for (std::uint32_t& v : labels.data()) {
    if (v != 0 && sizes[v] < min_size) v = 0;
  }
}

std::uint32_t relabel_sequential(LabelRaster& labels) {
  std::unordered_map<std::uint32_t, std::uint32_t> remap;
  std::uint32_t next = 0;
  for (std::uint32_t& v : labels.data()) {
    if (v == 0) continue;
    auto [it, inserted] = remap.try_emplace(v, next + 1);
    if (inserted) ++next;
    v = it->second;
  }
  return next;
}

namespace {

int reflect101(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
  }
  return i;
}

struct SobelKernels {
  std::vector<double> smooth;
  std::vector<double> deriv;
};

SobelKernels sobel_kernels(int size) {
  switch (size) {
    case 3: return {{1, 2, 1}, {-1, 0, 1}};
    case 5: return {{1, 4, 6, 4, 1}, {-1, -2, 0, 2, 1}};
    case 7: return {{1, 6, 15, 20, 15, 6, 1}, {-1, -4, -5, 0, 5, 4, 1}};
    default: fail(ErrorCode::InvalidArgument, "sobel size must be 3, 5 or 7");
  }
}

// Separable correlation: `along_cols` runs over columns, `along_rows` over rows; reflect-101 borders.
std::vector<double> separable(const FloatRaster& src, std::span<const double> along_cols, std::span<const double> along_rows) {
  const int h = src.rows(), w = src.cols();
  const int hc = static_cast<int>(along_cols.size() / 2), hr = static_cast<int>(along_rows.size() / 2);
  std::vector<double> tmp(static_cast<std::size_t>(h) * w), out(tmp.size());
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      double s = 0;
      for (int k = 0; k < static_cast<int>(along_cols.size()); ++k) s += along_cols[k] * src(r, reflect101(c + k - hc, w));
      tmp[static_cast<std::size_t>(r) * w + c] = s;
    }
  }
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      double s = 0;
      for (int k = 0; k < static_cast<int>(along_rows.size()); ++k) {
        s += along_rows[k] * tmp[static_cast<std::size_t>(reflect101(r + k - hr, h)) * w + c];
      }
      out[static_cast<std::size_t>(r) * w + c] = s;
    }
  }
  return out;
}

// Min-max normalise to [0, 1] and invert so that sharp negative gradients (instance borders) map to 1.
// A flat map normalises to all zeros before inversion.
void normalise_invert(std::vector<double>& v) {
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double mn = *lo, mx = *hi;
  for (double& x : v) x = 1.0 - (mx > mn ? (x - mn) / (mx - mn) : 0.0);
}

void check_maps(const ProbMaps& maps) {
  if (maps.np.empty()) fail(ErrorCode::EmptyInput, "probability maps have zero height or width");
  const int h = maps.np.rows(), w = maps.np.cols();
  if (maps.np.channels() != 1 || !maps.horizontal.same_shape(h, w) || !maps.vertical.same_shape(h, w) ||
      maps.horizontal.channels() != 1 || maps.vertical.channels() != 1) {
    fail(ErrorCode::ShapeMismatch, "NP and HV maps must share H x W");
  }
  if (maps.types && !maps.types->same_shape(h, w)) fail(ErrorCode::ShapeMismatch, "type map must share H x W");
}

}  // namespace

InstanceMap postprocess(const ProbMaps& maps, const PostprocParams& params, PostprocTrace* trace) {
  check_maps(maps);
  const int h = maps.rows(), w = maps.cols();
  const std::size_t n = static_cast<std::size_t>(h) * w;

  // (1) foreground
  ByteRaster fg_mask(h, w, 1, std::uint8_t{0});
  for (std::size_t i = 0; i < n; ++i) fg_mask.data()[i] = std::clamp(maps.np.data()[i], 0.0f, 1.0f) >= params.np_threshold;
  LabelRaster blobs = label_components(fg_mask, Connectivity::Eight);
  remove_small_instances(blobs, params.min_object_size);
  for (std::size_t i = 0; i < n; ++i) fg_mask.data()[i] = blobs.data()[i] != 0;

  // (2) gradient maps of the clamped HV channels
  FloatRaster hor = maps.horizontal, ver = maps.vertical;
  for (float& v : hor.data()) v = std::clamp(v, -1.0f, 1.0f);
  for (float& v : ver.data()) v = std::clamp(v, -1.0f, 1.0f);
  const SobelKernels k = sobel_kernels(params.sobel_size);
  std::vector<double> grad_h = separable(hor, k.deriv, k.smooth);
  std::vector<double> grad_v = separable(ver, k.smooth, k.deriv);
  normalise_invert(grad_h);
  normalise_invert(grad_v);

  // (3) energy and markers
  std::vector<float> energy(n);
  ByteRaster marker_mask(h, w, 1, std::uint8_t{0});
  for (std::size_t i = 0; i < n; ++i) {
    const double overall = std::max(grad_h[i], grad_v[i]);
    const bool fg = fg_mask.data()[i] != 0;
    energy[i] = fg ? static_cast<float>(1.0 - overall) : 0.0f;
    marker_mask.data()[i] = fg && !(overall > params.marker_threshold);
  }
  LabelRaster markers = label_components(marker_mask, Connectivity::Four);
  remove_small_instances(markers, params.min_marker_size);
  const std::uint32_t marker_count = relabel_sequential(markers);

  // (4) priority flood on -energy from the markers, restricted to foreground.
  // Ties at equal level resolve first-in-first-out; seeds enter in raster order.
  struct Item {
    float level;
    std::uint64_t age;
    std::uint32_t index;
  };
  auto later = [](const Item& a, const Item& b) { return a.level != b.level ? a.level > b.level : a.age > b.age; };
  std::priority_queue<Item, std::vector<Item>, decltype(later)> queue(later);
  LabelRaster out = markers;
  std::vector<std::uint8_t> queued(n, 0);
  std::uint64_t age = 0;
  for (std::uint32_t i = 0; i < n; ++i) {
    if (out.data()[i] != 0) {
      queue.push({-energy[i], age++, i});
      queued[i] = 1;
    }
  }
  while (!queue.empty()) {
    const Item item = queue.top();
    queue.pop();
    const int r = static_cast<int>(item.index / w), c = static_cast<int>(item.index % w);
    const std::uint32_t label = out.data()[item.index];
    for (int dr = -1; dr <= 1; ++dr) {
      for (int dc = -1; dc <= 1; ++dc) {
        if (dr == 0 && dc == 0) continue;
        const int nr = r + dr, nc = c + dc;
        if (nr < 0 || nc < 0 || nr >= h || nc >= w) continue;
        const std::uint32_t j = static_cast<std::uint32_t>(nr * w + nc);
        if (queued[j] || fg_mask.data()[j] == 0) continue;
        queued[j] = 1;
        out.data()[j] = label;
        queue.push({-energy[j], age++, j});
      }
    }
  }

  // (5) drop small fragments, renumber 1..K
  remove_small_instances(out, params.min_object_size);
  relabel_sequential(out);

  if (trace) {
    trace->markers = std::move(markers);
    trace->marker_count = marker_count;
  }
  return InstanceMap(std::move(out));
}

ProbMaps encode_targets(const InstanceMap& gt) {
  const int h = gt.rows(), w = gt.cols();
  ProbMaps maps{FloatRaster(h, w, 1, 0.0f), FloatRaster(h, w, 1, 0.0f), FloatRaster(h, w, 1, 0.0f), std::nullopt};
  std::unordered_map<std::uint32_t, std::pair<double, double>> max_offset;
  for (const auto& s : gt.instances()) max_offset[s.id] = {0.0, 0.0};
  const auto& labels = gt.labels();
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const std::uint32_t id = labels(r, c);
      if (id == 0) continue;
      const InstanceSummary* s = gt.find(id);
      auto& m = max_offset[id];
      m.first = std::max(m.first, std::abs(c - s->centroid.col));
      m.second = std::max(m.second, std::abs(r - s->centroid.row));
    }
  }
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const std::uint32_t id = labels(r, c);
      if (id == 0) continue;
      const InstanceSummary* s = gt.find(id);
      const auto [mx, my] = max_offset[id];
      maps.np(r, c) = 1.0f;
      maps.horizontal(r, c) = mx > 0 ? static_cast<float>((c - s->centroid.col) / mx) : 0.0f;
      maps.vertical(r, c) = my > 0 ? static_cast<float>((r - s->centroid.row) / my) : 0.0f;
    }
  }
  return maps;
}

std::vector<std::vector<double>> assign_types(const InstanceMap& inst, const FloatRaster& type_map) {
  if (!type_map.same_shape(inst.rows(), inst.cols())) fail(ErrorCode::ShapeMismatch, "type map must match instance map");
  const int classes = type_map.channels();
  std::unordered_map<std::uint32_t, std::size_t> slot;
  for (std::size_t k = 0; k < inst.instances().size(); ++k) slot[inst.instances()[k].id] = k;
  std::vector<std::vector<double>> dist(inst.count(), std::vector<double>(static_cast<std::size_t>(classes), 0.0));
  const auto& labels = inst.labels();
  for (int r = 0; r < labels.rows(); ++r) {
    for (int c = 0; c < labels.cols(); ++c) {
      const std::uint32_t id = labels(r, c);
      if (id == 0) continue;
      auto& row = dist[slot.at(id)];
      const auto px = type_map.pixel(r, c);
      for (int k = 0; k < classes; ++k) row[static_cast<std::size_t>(k)] += px[static_cast<std::size_t>(k)];
    }
  }
  for (std::size_t k = 0; k < dist.size(); ++k) {
    const double area = static_cast<double>(inst.instances()[k].area);
    for (double& v : dist[k]) v /= area;
  }
  return dist;
}

std::size_t argmax(const std::vector<double>& v) {
  return static_cast<std::size_t>(std::distance(v.begin(), std::max_element(v.begin(), v.end())));
}

}  // namespace cellflow
