#include "support/oracles.hpp"

#include <cmath>
#include <functional>
#include <map>

namespace cellflow::testing {

namespace {

// Recursion over rows; weight[i][j] < 0 means "not allowed". `better` decides between candidates.
BruteMatch search(const std::vector<std::vector<double>>& weight, bool minimise) {
  const std::size_t rows = weight.size();
  const std::size_t cols = rows ? weight[0].size() : 0;
  std::vector<bool> used(cols, false);
  BruteMatch best;
  bool have = false;
  auto better = [&](const BruteMatch& a, const BruteMatch& b) {
    if (a.pairs != b.pairs) return a.pairs > b.pairs;
    return minimise ? a.total < b.total - 1e-12 : a.total > b.total + 1e-12;
  };
  std::function<void(std::size_t, BruteMatch)> go = [&](std::size_t i, BruteMatch cur) {
    if (i == rows) {
      if (!have || better(cur, best)) best = cur, have = true;
      return;
    }
    go(i + 1, cur);
    for (std::size_t j = 0; j < cols; ++j) {
      if (used[j] || weight[i][j] < 0) continue;
      used[j] = true;
      go(i + 1, {cur.pairs + 1, cur.total + weight[i][j]});
      used[j] = false;
    }
  };
  go(0, {});
  return best;
}

}  // namespace

BruteMatch brute_force_detections(const std::vector<Detection>& preds, const std::vector<Detection>& gts,
                                  double radius) {
  std::vector<std::vector<double>> w(gts.size(), std::vector<double>(preds.size(), -1.0));
  for (std::size_t g = 0; g < gts.size(); ++g) {
    for (std::size_t p = 0; p < preds.size(); ++p) {
      if (gts[g].cls != preds[p].cls) continue;
      const double d = std::hypot(gts[g].position.row - preds[p].position.row,
                                  gts[g].position.col - preds[p].position.col);
      if (d <= radius) w[g][p] = d;
    }
  }
  return search(w, true);
}

BruteMatch brute_force_segments(const LabelRaster& pred, const LabelRaster& gt) {
  std::map<std::uint32_t, double> area_p, area_g;
  std::map<std::pair<std::uint32_t, std::uint32_t>, double> inter;
  for (std::size_t i = 0; i < gt.data().size(); ++i) {
    const auto g = gt.data()[i], p = pred.data()[i];
    if (g) area_g[g] += 1;
    if (p) area_p[p] += 1;
    if (g && p) inter[{g, p}] += 1;
  }
  std::vector<std::uint32_t> gid, pid;
  for (const auto& [k, v] : area_g) gid.push_back(k);
  for (const auto& [k, v] : area_p) pid.push_back(k);
  std::vector<std::vector<double>> w(gid.size(), std::vector<double>(pid.size(), -1.0));
  for (std::size_t a = 0; a < gid.size(); ++a) {
    for (std::size_t b = 0; b < pid.size(); ++b) {
      const auto it = inter.find({gid[a], pid[b]});
      if (it == inter.end()) continue;
      const double iou = it->second / (area_g[gid[a]] + area_p[pid[b]] - it->second);
      if (iou > 0.5) w[a][b] = iou;
    }
  }
  return search(w, false);
}

}  // namespace cellflow::testing

#include "support/scenes.hpp"

namespace cellflow::testing {

SmallCase random_small_case(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  SmallCase out;
  const int n = 1 + static_cast<int>(rng() % 8);
  const auto scene = random_disc_scene(64, 64, n, 4, 9, seed * 7919 + 1, -2.0);
  out.gt = scene.labels;
  out.pred = LabelRaster(64, 64, 1, 0u);
  std::uint32_t next = 1;
  for (const auto& d : scene.discs) {
    if (uniform(rng, 0, 1) < 0.15) continue;
    paint_disc(out.pred, {d.row + uniform(rng, -3, 3), d.col + uniform(rng, -3, 3), d.radius * uniform(rng, 0.7, 1.3)},
               next++);
  }
  while (uniform(rng, 0, 1) < 0.4) {
    paint_disc(out.pred, {uniform(rng, 5, 59), uniform(rng, 5, 59), uniform(rng, 3, 8)}, next++);
  }
  // Clustered points: greedy nearest-first is often suboptimal here.
  const int gn = 1 + static_cast<int>(rng() % 8);
  const int pn = static_cast<int>(rng() % 9);
  for (int i = 0; i < gn; ++i) out.gt_points.push_back({{uniform(rng, 0, 30), uniform(rng, 0, 30)}, int(rng() % 2)});
  for (int i = 0; i < pn; ++i) out.pred_points.push_back({{uniform(rng, 0, 30), uniform(rng, 0, 30)}, int(rng() % 2)});
  return out;
}

}  // namespace cellflow::testing
