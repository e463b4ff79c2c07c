#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "cellflow/raster.hpp"

namespace cellflow {

struct InstanceSummary {
  std::uint32_t id = 0;
  Point centroid;
  std::size_t area = 0;
  Rect bbox;
  friend bool operator==(const InstanceSummary&, const InstanceSummary&) = default;
};

/// Label raster (0 = background) plus per-instance summaries sorted by id.
class InstanceMap {
 public:
  InstanceMap() = default;
  explicit InstanceMap(LabelRaster labels);

  const LabelRaster& labels() const noexcept { return labels_; }
  const std::vector<InstanceSummary>& instances() const noexcept { return instances_; }
  std::size_t count() const noexcept { return instances_.size(); }
  int rows() const noexcept { return labels_.rows(); }
  int cols() const noexcept { return labels_.cols(); }

  /// Summary for `id`, or nullptr when absent.
  const InstanceSummary* find(std::uint32_t id) const;

  friend bool operator==(const InstanceMap&, const InstanceMap&) = default;

 private:
  LabelRaster labels_;
  std::vector<InstanceSummary> instances_;
};

/// Network outputs for one tile: nucleus probability, horizontal/vertical distance maps and an
/// optional per-pixel class distribution (H x W x C).
struct ProbMaps {
  FloatRaster np;
  FloatRaster horizontal;
  FloatRaster vertical;
  std::optional<FloatRaster> types;

  int rows() const noexcept { return np.rows(); }
  int cols() const noexcept { return np.cols(); }
};

struct PostprocParams {
  float np_threshold = 0.5f;
  float marker_threshold = 0.4f;
  std::size_t min_object_size = 10;
  std::size_t min_marker_size = 10;
  int sobel_size = 5;  // 3, 5 or 7
};

enum class Connectivity { Four, Eight };

/// Connected-component labelling of non-zero pixels; ids are assigned 1..K in raster order.
LabelRaster label_components(const ByteRaster& mask, Connectivity connectivity, std::uint32_t* count = nullptr);

/// Zeroes every instance with fewer than `min_size` pixels; ids of the rest are untouched.
void remove_small_instances(LabelRaster& labels, std::size_t min_size);

/// Renumbers ids to 1..K in order of first appearance (raster scan).
std::uint32_t relabel_sequential(LabelRaster& labels);

/// Marker raster kept alongside the result so callers can audit marker/instance consistency.
struct PostprocTrace {
  LabelRaster markers;
  std::uint32_t marker_count = 0;
};

/// Marker-controlled watershed recovery of nucleus instances from NP/HV maps.
InstanceMap postprocess(const ProbMaps& maps, const PostprocParams& params = {}, PostprocTrace* trace = nullptr);

/// Inverse of the decoder targets: NP = instance support, HV = per-instance distances to the
/// centroid normalised by the instance's largest absolute offset.
ProbMaps encode_targets(const InstanceMap& gt);

/// Per-instance class distribution: mean of `type_map` over the instance's pixels. Row k belongs
/// to `inst.instances()[k]`.
std::vector<std::vector<double>> assign_types(const InstanceMap& inst, const FloatRaster& type_map);

std::size_t argmax(const std::vector<double>& v);

}  // namespace cellflow
