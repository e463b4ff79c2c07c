#include "cellflow/metrics.hpp"

#include <algorithm>
#include <array>
#include <tuple>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_map>

namespace cellflow {

// ---------------------------------------------------------------------------------------------
// Assignment

std::vector<int> solve_assignment(std::span<const double> cost, std::size_t rows, std::size_t cols) {
  if (cost.size() != rows * cols) fail(ErrorCode::ShapeMismatch, "cost matrix size does not match rows x cols");
  if (rows == 0) return {};
  if (cols == 0) return std::vector<int>(rows, -1);
  if (rows > cols) {
    std::vector<double> t(cost.size());
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < cols; ++j) t[j * rows + i] = cost[i * cols + j];
    }
    const std::vector<int> col_to_row = solve_assignment(t, cols, rows);
    std::vector<int> out(rows, -1);
    for (std::size_t j = 0; j < cols; ++j) out[static_cast<std::size_t>(col_to_row[j])] = static_cast<int>(j);
    return out;
  }
  // Shortest augmenting path with potentials; 1-based internally.
  const std::size_t n = rows, m = cols;
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost[(i0 - 1) * m + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> out(n, -1);
  for (std::size_t j = 1; j <= m; ++j) {
    if (p[j] != 0) out[p[j] - 1] = static_cast<int>(j - 1);
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// Detection matching

namespace {

struct DisjointSet {
  std::vector<std::size_t> parent;
  explicit DisjointSet(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  std::size_t find(std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  }
  void unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  }
};

MatchSets match_one_class(std::span<const Detection> preds, const std::vector<std::size_t>& pred_idx,
                          std::span<const Detection> gts, const std::vector<std::size_t>& gt_idx, double radius) {
  const std::size_t np = pred_idx.size(), ng = gt_idx.size();
  // Candidate edges through a uniform grid with cell edge = radius.
  struct Edge {
    std::size_t g, p;
    double d;
  };
  std::vector<Edge> edges;
  const double cell = std::max(radius, 1e-9);
  auto key = [cell](const Point& q) {
    return std::pair<long long, long long>{static_cast<long long>(std::floor(q.row / cell)),
                                           static_cast<long long>(std::floor(q.col / cell))};
  };
  std::map<std::pair<long long, long long>, std::vector<std::size_t>> grid;
  for (std::size_t k = 0; k < np; ++k) grid[key(preds[pred_idx[k]].position)].push_back(k);
  for (std::size_t g = 0; g < ng; ++g) {
    const Point& q = gts[gt_idx[g]].position;
    const auto [kr, kc] = key(q);
    for (long long dr = -1; dr <= 1; ++dr) {
      for (long long dc = -1; dc <= 1; ++dc) {
        auto it = grid.find({kr + dr, kc + dc});
        if (it == grid.end()) continue;
        for (std::size_t p : it->second) {
          const Point& pp = preds[pred_idx[p]].position;
          const double d = std::hypot(pp.row - q.row, pp.col - q.col);
          if (d <= radius) edges.push_back({g, p, d});
        }
      }
    }
  }

  // Solve each connected component of the candidate graph independently.
  DisjointSet ds(ng + np);
  for (const Edge& e : edges) ds.unite(e.g, ng + e.p);
  std::map<std::size_t, std::vector<const Edge*>> components;
  for (const Edge& e : edges) components[ds.find(e.g)].push_back(&e);

  std::vector<char> gt_used(ng, 0), pred_used(np, 0);
  MatchSets out;
  for (const auto& [root, comp] : components) {
    std::vector<std::size_t> gs, ps;
    for (const Edge* e : comp) {
      gs.push_back(e->g);
      ps.push_back(e->p);
    }
    std::sort(gs.begin(), gs.end());
    gs.erase(std::unique(gs.begin(), gs.end()), gs.end());
    std::sort(ps.begin(), ps.end());
    ps.erase(std::unique(ps.begin(), ps.end()), ps.end());
    // Non-candidate cells cost more than any full set of real edges, so the optimum first
    // maximises cardinality and then minimises total distance.
    const double forbidden = radius * static_cast<double>(std::min(gs.size(), ps.size()) + 1) + 1.0;
    std::vector<double> cost(gs.size() * ps.size(), forbidden);
    auto gpos = [&](std::size_t g) { return static_cast<std::size_t>(std::lower_bound(gs.begin(), gs.end(), g) - gs.begin()); };
    auto ppos = [&](std::size_t p) { return static_cast<std::size_t>(std::lower_bound(ps.begin(), ps.end(), p) - ps.begin()); };
    for (const Edge* e : comp) cost[gpos(e->g) * ps.size() + ppos(e->p)] = e->d;
    const std::vector<int> assign = solve_assignment(cost, gs.size(), ps.size());
    for (std::size_t i = 0; i < gs.size(); ++i) {
      if (assign[i] < 0) continue;
      const double c = cost[i * ps.size() + static_cast<std::size_t>(assign[i])];
      if (c >= forbidden) continue;
      const std::size_t g = gs[i], p = ps[static_cast<std::size_t>(assign[i])];
      gt_used[g] = pred_used[p] = 1;
      out.tp.push_back({gt_idx[g], pred_idx[p], c});
    }
  }
  for (std::size_t g = 0; g < ng; ++g) {
    if (!gt_used[g]) out.fn.push_back(gt_idx[g]);
  }
  for (std::size_t p = 0; p < np; ++p) {
    if (!pred_used[p]) out.fp.push_back(pred_idx[p]);
  }
  std::sort(out.tp.begin(), out.tp.end(), [](const MatchPair& a, const MatchPair& b) { return a.gt < b.gt; });
  return out;
}

void check_unique(const MatchSets& m) {
  std::set<std::size_t> g, p;
  for (const auto& t : m.tp) {
    if (!g.insert(t.gt).second || !p.insert(t.pred).second) fail(ErrorCode::InvalidArgument, "matching is not unique");
  }
  for (std::size_t f : m.fp) {
    if (!p.insert(f).second) fail(ErrorCode::InvalidArgument, "prediction both matched and unmatched");
  }
  for (std::size_t f : m.fn) {
    if (!g.insert(f).second) fail(ErrorCode::InvalidArgument, "ground truth both matched and unmatched");
  }
}

}  // namespace

std::map<int, MatchSets> match_detections(std::span<const Detection> preds, std::span<const Detection> gts, double radius) {
  std::map<int, std::pair<std::vector<std::size_t>, std::vector<std::size_t>>> by_class;
  for (std::size_t i = 0; i < preds.size(); ++i) by_class[preds[i].cls].first.push_back(i);
  for (std::size_t i = 0; i < gts.size(); ++i) by_class[gts[i].cls].second.push_back(i);
  std::map<int, MatchSets> out;
  std::size_t n_pred = 0, n_gt = 0;
  for (const auto& [cls, idx] : by_class) {
    MatchSets m = match_one_class(preds, idx.first, gts, idx.second, radius);
    check_unique(m);
    n_pred += m.tp.size() + m.fp.size();
    n_gt += m.tp.size() + m.fn.size();
    out.emplace(cls, std::move(m));
  }
  if (n_pred != preds.size() || n_gt != gts.size()) fail(ErrorCode::InvalidArgument, "match sets do not partition inputs");
  return out;
}

DetectionScore detection_score(std::size_t tp, std::size_t fp, std::size_t fn) {
  DetectionScore s{tp, fp, fn, 0.0, 0.0, 0.0};
  s.precision = tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
  s.recall = tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
  s.f1 = s.precision + s.recall == 0.0 ? 0.0 : 2.0 * s.precision * s.recall / (s.precision + s.recall);
  return s;
}

namespace {

DetectionReport summarise(const std::map<int, std::array<std::size_t, 3>>& counts) {
  DetectionReport r;
  std::size_t used = 0;
  for (const auto& [cls, c] : counts) {
    const DetectionScore s = detection_score(c[0], c[1], c[2]);
    r.per_class[cls] = s;
    if (c[0] + c[1] + c[2] == 0) continue;
    r.m_precision += s.precision;
    r.m_recall += s.recall;
    r.m_f1 += s.f1;
    ++used;
  }
  if (used > 0) {
    r.m_precision /= static_cast<double>(used);
    r.m_recall /= static_cast<double>(used);
    r.m_f1 /= static_cast<double>(used);
  }
  return r;
}

}  // namespace

DetectionReport detection_scores(const std::map<int, MatchSets>& matches) {
  return detection_scores(std::vector<std::map<int, MatchSets>>{matches});
}

DetectionReport detection_scores(const std::vector<std::map<int, MatchSets>>& per_image) {
  std::map<int, std::array<std::size_t, 3>> counts;
  for (const auto& image : per_image) {
    for (const auto& [cls, m] : image) {
      auto& c = counts[cls];
      c[0] += m.tp.size();
      c[1] += m.fp.size();
      c[2] += m.fn.size();
    }
  }
  return summarise(counts);
}

// ---------------------------------------------------------------------------------------------
// Panoptic quality

double PQCounts::dq() const noexcept {
  if (empty()) return 1.0;
  return static_cast<double>(tp) / (static_cast<double>(tp) + 0.5 * static_cast<double>(fp) + 0.5 * static_cast<double>(fn));
}

double PQCounts::sq() const noexcept {
  if (empty()) return 1.0;
  return tp == 0 ? 0.0 : iou_sum / static_cast<double>(tp);
}

PQCounts& PQCounts::operator+=(const PQCounts& o) noexcept {
  tp += o.tp;
  fp += o.fp;
  fn += o.fn;
  iou_sum += o.iou_sum;
  return *this;
}

std::vector<IouPair> overlap_pairs(const LabelRaster& pred, const LabelRaster& gt) {
  if (!pred.same_shape(gt.rows(), gt.cols())) fail(ErrorCode::ShapeMismatch, "prediction and ground truth differ in size");
  std::unordered_map<std::uint32_t, std::size_t> area_p, area_g;
  std::unordered_map<std::uint64_t, std::size_t> inter;
  const auto& pd = pred.data();
  const auto& gd = gt.data();
  for (std::size_t i = 0; i < pd.size(); ++i) {
    if (pd[i]) ++area_p[pd[i]];
    if (gd[i]) ++area_g[gd[i]];
    if (pd[i] && gd[i]) ++inter[(static_cast<std::uint64_t>(gd[i]) << 32) | pd[i]];
  }
  std::vector<IouPair> out;
  out.reserve(inter.size());
  for (const auto& [key, n] : inter) {
    const auto g = static_cast<std::uint32_t>(key >> 32), p = static_cast<std::uint32_t>(key & 0xffffffffu);
    const double uni = static_cast<double>(area_g[g] + area_p[p] - n);
    out.push_back({g, p, static_cast<double>(n) / uni});
  }
  std::sort(out.begin(), out.end(), [](const IouPair& a, const IouPair& b) { return std::tie(a.gt, a.pred) < std::tie(b.gt, b.pred); });
  return out;
}

namespace {

std::set<std::uint32_t> ids_of(const LabelRaster& labels) {
  std::set<std::uint32_t> ids;
  for (std::uint32_t v : labels.data()) {
    if (v) ids.insert(v);
  }
  return ids;
}

}  // namespace

PQResult pq(const LabelRaster& pred, const LabelRaster& gt) {
  PQResult res;
  for (const IouPair& p : overlap_pairs(pred, gt)) {
    if (p.iou > 0.5) res.pairs.push_back(p);
  }
  const std::size_t n_pred = ids_of(pred).size(), n_gt = ids_of(gt).size();
  res.counts.tp = res.pairs.size();
  res.counts.fp = n_pred - res.counts.tp;
  res.counts.fn = n_gt - res.counts.tp;
  for (const auto& p : res.pairs) res.counts.iou_sum += p.iou;
  res.dq = res.counts.dq();
  res.sq = res.counts.sq();
  res.pq = res.dq * res.sq;
  return res;
}

LabelRaster filter_class(const LabelRaster& labels, const std::map<std::uint32_t, int>& classes, int cls) {
  LabelRaster out(labels.rows(), labels.cols(), 1, 0u);
  for (std::size_t i = 0; i < labels.data().size(); ++i) {
    const std::uint32_t id = labels.data()[i];
    if (id == 0) continue;
    const auto it = classes.find(id);
    if (it != classes.end() && it->second == cls) out.data()[i] = id;
  }
  return out;
}

PQReport mpq_suite(std::span<const SuiteImage> images, std::span<const int> classes) {
  if (images.empty()) fail(ErrorCode::EmptySuite, "evaluation suite has no images");
  PQReport report;
  report.images = images.size();
  double mpq_sum = 0.0, bpq_sum = 0.0, bdq_sum = 0.0, bsq_sum = 0.0, dice_sum = 0.0;
  std::size_t mpq_images = 0;
  bool any_pred = false;
  for (int cls : classes) report.per_class[cls] = {};

  for (const SuiteImage& img : images) {
    if (!img.pred.same_shape(img.gt.rows(), img.gt.cols())) fail(ErrorCode::ShapeMismatch, "suite image sizes differ");
    std::set<int> gt_present;
    for (std::uint32_t id : ids_of(img.gt)) {
      const auto it = img.gt_classes.find(id);
      if (it != img.gt_classes.end()) gt_present.insert(it->second);
    }
    any_pred = any_pred || !ids_of(img.pred).empty();
    double image_sum = 0.0;
    std::size_t image_classes = 0;
    for (int cls : classes) {
      const PQResult r = pq(filter_class(img.pred, img.pred_classes, cls), filter_class(img.gt, img.gt_classes, cls));
      report.per_class[cls].pooled += r.counts;
      if (gt_present.count(cls)) {
        image_sum += r.pq;
        ++image_classes;
      }
    }
    if (image_classes > 0) {
      mpq_sum += image_sum / static_cast<double>(image_classes);
      ++mpq_images;
    }

    const PQResult b = pq(img.pred, img.gt);
    report.binary_pooled += b.counts;
    bpq_sum += b.pq;
    bdq_sum += b.dq;
    bsq_sum += b.sq;

    std::size_t a = 0, g = 0, both = 0;
    for (std::size_t i = 0; i < img.pred.data().size(); ++i) {
      const bool p = img.pred.data()[i] != 0, t = img.gt.data()[i] != 0;
      a += p;
      g += t;
      both += p && t;
    }
    dice_sum += (a + g == 0) ? 1.0 : 2.0 * static_cast<double>(both) / static_cast<double>(a + g);
  }

  const double n = static_cast<double>(images.size());
  if (mpq_images > 0) {
    report.mpq = mpq_sum / static_cast<double>(mpq_images);
  } else {
    report.mpq = any_pred ? 0.0 : 1.0;
  }
  double plus_sum = 0.0;
  std::size_t plus_classes = 0;
  for (auto& [cls, c] : report.per_class) {
    c.dq = c.pooled.dq();
    c.sq = c.pooled.sq();
    c.pq = c.dq * c.sq;
    if (c.pooled.empty()) continue;
    plus_sum += c.pq;
    ++plus_classes;
  }
  report.mpq_plus = plus_classes > 0 ? plus_sum / static_cast<double>(plus_classes) : 1.0;
  report.bpq = bpq_sum / n;
  report.binary_dq = bdq_sum / n;
  report.binary_sq = bsq_sum / n;
  report.dice = dice_sum / n;
  return report;
}

nlohmann::json to_json(const PQReport& r) {
  nlohmann::json per_class = nlohmann::json::object();
  for (const auto& [cls, c] : r.per_class) {
    per_class[std::to_string(cls)] = {{"dq", c.dq}, {"sq", c.sq}, {"pq", c.pq}, {"tp", c.pooled.tp},
                                      {"fp", c.pooled.fp}, {"fn", c.pooled.fn}};
  }
  return {{"mpq", r.mpq},
          {"mpq_plus", r.mpq_plus},
          {"bpq", r.bpq},
          {"binary_dq", r.binary_dq},
          {"binary_sq", r.binary_sq},
          {"dice", r.dice},
          {"images", r.images},
          {"binary_counts", {{"tp", r.binary_pooled.tp}, {"fp", r.binary_pooled.fp}, {"fn", r.binary_pooled.fn}}},
          {"per_class", per_class}};
}

nlohmann::json to_json(const DetectionReport& r) {
  nlohmann::json per_class = nlohmann::json::object();
  for (const auto& [cls, s] : r.per_class) {
    per_class[std::to_string(cls)] = {{"precision", s.precision}, {"recall", s.recall}, {"f1", s.f1},
                                      {"tp", s.tp}, {"fp", s.fp}, {"fn", s.fn}};
  }
  return {{"m_precision", r.m_precision}, {"m_recall", r.m_recall}, {"m_f1", r.m_f1}, {"per_class", per_class}};
}

std::string to_csv(const PQReport& p, const DetectionReport& d) {
  std::ostringstream out;
  out.precision(10);
  out << "scope,class,metric,value\n";
  out << "aggregate,all,mpq," << p.mpq << "\n";
  out << "aggregate,all,mpq_plus," << p.mpq_plus << "\n";
  out << "aggregate,all,bpq," << p.bpq << "\n";
  out << "aggregate,all,dice," << p.dice << "\n";
  out << "aggregate,all,m_precision," << d.m_precision << "\n";
  out << "aggregate,all,m_recall," << d.m_recall << "\n";
  out << "aggregate,all,m_f1," << d.m_f1 << "\n";
  for (const auto& [cls, c] : p.per_class) {
    out << "segmentation," << cls << ",dq," << c.dq << "\n";
    out << "segmentation," << cls << ",sq," << c.sq << "\n";
    out << "segmentation," << cls << ",pq," << c.pq << "\n";
  }
  for (const auto& [cls, s] : d.per_class) {
    out << "detection," << cls << ",precision," << s.precision << "\n";
    out << "detection," << cls << ",recall," << s.recall << "\n";
    out << "detection," << cls << ",f1," << s.f1 << "\n";
  }
  return out.str();
}

double co2_kg(double energy_wh, double carbon_intensity) {
  if (energy_wh < 0.0 || std::isnan(energy_wh)) fail(ErrorCode::NegativeEnergy, "energy must be non-negative");
  return energy_wh / 1000.0 * carbon_intensity;
}

}  // namespace cellflow
