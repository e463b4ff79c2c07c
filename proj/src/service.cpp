#include "cellflow/service.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>

#include "cellflow/datagen.hpp"
#include "cellflow/tokens.hpp"

namespace cellflow {

// ---------------------------------------------------------------------------------------------
// Manifest and events

WorkspaceManifest load_manifest(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) fail(ErrorCode::Io, "cannot open workspace manifest " + file.string());
  WorkspaceManifest m;
  try {
    const auto j = nlohmann::json::parse(in);
    m.class_names = j.at("class_names").get<std::vector<std::string>>();
    m.encoder = j.value("encoder", std::string{});
    m.events = j.value("events", m.events);
    m.snapshot = j.value("snapshot", m.snapshot);
    m.checkpoints = j.value("checkpoints", m.checkpoints);
    for (const auto& s : j.at("slides")) {
      SlideEntry e;
      e.id = s.at("id").get<std::string>();
      e.width = s.value("width", 0);
      e.height = s.value("height", 0);
      e.pyramid = s.value("pyramid", std::string{});
      e.cells = s.at("cells").get<std::string>();
      e.embeddings = s.value("embeddings", std::string{});
      e.embedding_index = s.value("embedding_index", std::string{});
      e.split = s.value("split", std::string{});
      if (!e.split.empty() && e.split != "train" && e.split != "val") {
        fail(ErrorCode::InvalidConfig, "slide " + e.id + " has unknown split '" + e.split + "'");
      }
      m.slides.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::InvalidConfig, file.string() + ": " + e.what());
  }
  if (m.class_names.size() < 2) fail(ErrorCode::InvalidConfig, "workspace needs at least two classes");
  return m;
}

nlohmann::json to_json(const WorkspaceManifest& m) {
  nlohmann::json slides = nlohmann::json::array();
  for (const auto& s : m.slides) {
    slides.push_back({{"id", s.id},
                      {"width", s.width},
                      {"height", s.height},
                      {"pyramid", s.pyramid},
                      {"cells", s.cells},
                      {"embeddings", s.embeddings},
                      {"embedding_index", s.embedding_index},
                      {"split", s.split}});
  }
  return {{"class_names", m.class_names}, {"encoder", m.encoder},         {"events", m.events},
          {"snapshot", m.snapshot},       {"checkpoints", m.checkpoints}, {"slides", slides}};
}

nlohmann::json to_json(const AnnotationEvent& e) {
  return {{"event_id", e.event_id},
          {"slide_id", e.slide_id},
          {"cell_id", e.cell_id},
          {"old_label", e.old_label ? nlohmann::json(*e.old_label) : nlohmann::json()},
          {"new_label", e.new_label},
          {"actor", e.actor},
          {"timestamp", e.timestamp}};
}

AnnotationEvent event_from_json(const nlohmann::json& j) {
  AnnotationEvent e;
  e.event_id = j.at("event_id").get<std::uint64_t>();
  e.slide_id = j.at("slide_id").get<std::string>();
  e.cell_id = j.at("cell_id").get<std::string>();
  if (j.contains("old_label") && !j.at("old_label").is_null()) e.old_label = j.at("old_label").get<int>();
  e.new_label = j.at("new_label").get<int>();
  e.actor = j.value("actor", std::string{});
  e.timestamp = j.value("timestamp", std::string{});
  return e;
}

std::vector<AnnotationEvent> read_events(const std::filesystem::path& path) {
  std::vector<AnnotationEvent> out;
  std::ifstream in(path);
  if (!in) return out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(event_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::MalformedLine, path.string() + " line " + std::to_string(lineno) + ": " + e.what());
    }
    if (out.size() > 1 && out.back().event_id <= out[out.size() - 2].event_id) {
      fail(ErrorCode::MalformedLine, path.string() + " line " + std::to_string(lineno) + ": event ids must increase");
    }
  }
  return out;
}

LabelMap replay(LabelMap base, const std::vector<AnnotationEvent>& events) {
  for (const auto& e : events) base[{e.slide_id, e.cell_id}] = e.new_label;
  return base;
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02d.%03dZ", tm.tm_year + 1900, tm.tm_mon + 1, tm.tm_mday,
                tm.tm_hour, tm.tm_min, tm.tm_sec, static_cast<int>(ms));
  return buf;
}

// ---------------------------------------------------------------------------------------------
// Service

namespace {

constexpr int kBucket = 256;

HttpResponse json_response(int status, const nlohmann::json& body) { return {status, body.dump(), "application/json", {}}; }

HttpResponse error_response(int status, const std::string& message) {
  return json_response(status, {{"error", message}});
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::vector<std::string> split_path(const std::string& path) {
  std::vector<std::string> parts;
  std::string cur;
  for (char c : path) {
    if (c == '/') {
      if (!cur.empty()) parts.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) parts.push_back(std::move(cur));
  return parts;
}

bool all_digits(const std::string& s) {
  return !s.empty() && s.size() < 10 && std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; });
}

std::optional<double> parse_number(const std::string& s) {
  double v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

// Pixel rectangle covered by a contour traced on pixel corners.
Rect contour_bbox(const std::vector<Point>& ring) {
  if (ring.empty()) return {};
  double r0 = ring[0].row, r1 = r0, c0 = ring[0].col, c1 = c0;
  for (const auto& p : ring) {
    r0 = std::min(r0, p.row);
    r1 = std::max(r1, p.row);
    c0 = std::min(c0, p.col);
    c1 = std::max(c1, p.col);
  }
  return {static_cast<int>(std::ceil(r0)), static_cast<int>(std::ceil(c0)), static_cast<int>(std::floor(r1)) + 1,
          static_cast<int>(std::floor(c1)) + 1};
}

std::int64_t bucket_key(int br, int bc) { return (static_cast<std::int64_t>(br) << 32) ^ static_cast<std::uint32_t>(bc); }

int floor_div(int a, int b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }

}  // namespace

struct Service::SlideData {
  SlideEntry entry;
  std::vector<CellRecord> cells;  // sorted by cell_id
  std::vector<Rect> boxes;
  std::map<std::string, std::size_t> index;
  std::unordered_map<std::int64_t, std::vector<std::size_t>> grid;
};

Service::Service(const std::filesystem::path& manifest_file, ServiceOptions options)
    : root_(manifest_file.parent_path()), manifest_(load_manifest(manifest_file)), options_(std::move(options)) {
  std::set<std::string> ids;
  for (const auto& entry : manifest_.slides) {
    if (!ids.insert(entry.id).second) fail(ErrorCode::InvalidConfig, "duplicate slide id " + entry.id);
    auto slide = std::make_unique<SlideData>();
    slide->entry = entry;
    slide->cells = read_cells(root_ / entry.cells);
    std::sort(slide->cells.begin(), slide->cells.end(),
              [](const CellRecord& a, const CellRecord& b) { return a.cell_id < b.cell_id; });
    for (std::size_t i = 0; i < slide->cells.size(); ++i) {
      const auto& c = slide->cells[i];
      if (!slide->index.emplace(c.cell_id, i).second) fail(ErrorCode::InvalidRecord, "duplicate cell id " + c.cell_id);
      const Rect box = contour_bbox(c.contour);
      slide->boxes.push_back(box);
      for (int br = floor_div(box.row0, kBucket); br <= floor_div(box.row1 - 1, kBucket); ++br) {
        for (int bc = floor_div(box.col0, kBucket); bc <= floor_div(box.col1 - 1, kBucket); ++bc) {
          slide->grid[bucket_key(br, bc)].push_back(i);
        }
      }
      if (c.class_label) base_[{entry.id, c.cell_id}] = *c.class_label;
    }
    slides_.push_back(std::move(slide));
  }
  auto snap = std::make_shared<Snapshot>();
  for (const auto& e : read_events(root_ / manifest_.events)) {
    if (!find_slide(e.slide_id) || !find_slide(e.slide_id)->index.count(e.cell_id)) {
      fail(ErrorCode::NotFound, "event " + std::to_string(e.event_id) + " refers to unknown cell " + e.cell_id);
    }
    snap->overrides[{e.slide_id, e.cell_id}] = e.new_label;
    snap->version = e.event_id;
  }
  snapshot_ = std::move(snap);
}

Service::~Service() {
  std::unique_lock lock(job_mutex_);
  job_cv_.wait(lock, [this] { return !job_active_; });
  lock.unlock();
  if (worker_.joinable()) worker_.join();
}

std::shared_ptr<const Service::Snapshot> Service::snapshot() const {
  std::lock_guard lock(snapshot_mutex_);
  return snapshot_;
}

std::uint64_t Service::version() const { return snapshot()->version; }

LabelMap Service::current_labels() const {
  LabelMap out = base_;
  for (const auto& [k, v] : snapshot()->overrides) out[k] = v;
  return out;
}

LabelMap Service::replayed_labels() const { return replay(base_, read_events(root_ / manifest_.events)); }

void Service::write_snapshot() const {
  const auto snap = snapshot();
  nlohmann::json labels = nlohmann::json::array();
  for (const auto& [k, v] : current_labels()) labels.push_back({{"slide_id", k.first}, {"cell_id", k.second}, {"label", v}});
  std::ofstream out(root_ / manifest_.snapshot);
  if (!out) fail(ErrorCode::Io, "cannot write label snapshot");
  out << nlohmann::json{{"version", snap->version}, {"labels", labels}}.dump() << '\n';
}

const Service::SlideData* Service::find_slide(const std::string& id) const {
  for (const auto& s : slides_) {
    if (s->entry.id == id) return s.get();
  }
  return nullptr;
}

HttpResponse Service::handle(const HttpRequest& request) {
  try {
    const auto parts = split_path(request.path);
    if (request.method == "OPTIONS") return {204, "", "text/plain", {}};
    const bool get = request.method == "GET", post = request.method == "POST";
    if (parts.size() == 1 && parts[0] == "slides") {
      return get ? list_slides() : error_response(405, "method not allowed");
    }
    if (parts.size() >= 3 && parts[0] == "slides") {
      const SlideData* slide = find_slide(parts[1]);
      if (!slide) return error_response(404, "unknown slide " + parts[1]);
      if (parts.size() == 6 && parts[2] == "tiles") return get ? get_tile(*slide, parts) : error_response(405, "method not allowed");
      if (parts.size() == 3 && parts[2] == "cells") return get ? get_cells(*slide, request) : error_response(405, "method not allowed");
      if (parts.size() == 5 && parts[2] == "cells" && parts[4] == "label") {
        return post ? post_label(*slide, parts[3], request.body) : error_response(405, "method not allowed");
      }
    }
    if (parts.size() == 1 && parts[0] == "train") return post ? post_train(request.body) : error_response(405, "method not allowed");
    if (parts.size() == 2 && parts[0] == "train") return get ? get_train(parts[1]) : error_response(405, "method not allowed");
    return error_response(404, "no route for " + request.path);
  } catch (const Error& e) {
    switch (e.code()) {
      case ErrorCode::NotFound: return error_response(404, e.detail());
      case ErrorCode::InvalidConfig:
      case ErrorCode::UnknownClass: return error_response(422, e.detail());
      case ErrorCode::JobAlreadyRunning: return error_response(409, e.detail());
      case ErrorCode::InvalidArgument: return error_response(400, e.detail());
      default: return error_response(500, e.what());
    }
  } catch (const std::exception& e) {
    return error_response(500, e.what());
  }
}

HttpResponse Service::list_slides() const {
  nlohmann::json slides = nlohmann::json::array();
  for (const auto& s : slides_) {
    slides.push_back({{"id", s->entry.id},
                      {"width", s->entry.width},
                      {"height", s->entry.height},
                      {"cells", s->cells.size()},
                      {"split", s->entry.split}});
  }
  return json_response(200, {{"slides", slides}, {"class_names", manifest_.class_names}, {"version", version()}});
}

HttpResponse Service::get_tile(const SlideData& slide, const std::vector<std::string>& parts) const {
  std::string y = parts[5];
  if (y.size() > 4 && y.compare(y.size() - 4, 4, ".jpg") == 0) y.resize(y.size() - 4);
  if (!all_digits(parts[3]) || !all_digits(parts[4]) || !all_digits(y)) return error_response(400, "tile coordinates must be integers");
  if (slide.entry.pyramid.empty()) return error_response(404, "slide has no pyramid");
  const auto file = root_ / slide.entry.pyramid / parts[3] / parts[4] / (y + ".jpg");
  std::ifstream in(file, std::ios::binary);
  if (!in) return error_response(404, "no such tile");
  std::ostringstream buf;
  buf << in.rdbuf();
  return {200, buf.str(), "image/jpeg", {{"Cache-Control", "max-age=86400"}}};
}

HttpResponse Service::get_cells(const SlideData& slide, const HttpRequest& request) const {
  const auto snap = snapshot();
  std::optional<Rect> query;
  double min_prob = 0.0;
  std::size_t max_features = 0;
  std::string canonical;
  if (auto it = request.query.find("bbox"); it != request.query.end()) {
    std::vector<int> v;
    std::stringstream ss(it->second);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      const auto n = parse_number(tok);
      if (!n || *n != std::floor(*n) || std::abs(*n) > 1e9) return error_response(400, "malformed bbox");
      v.push_back(static_cast<int>(*n));
    }
    if (v.size() != 4 || v[2] <= v[0] || v[3] <= v[1]) return error_response(400, "bbox must be r0,c0,r1,c1 with r1 > r0 and c1 > c0");
    query = Rect{v[0], v[1], v[2], v[3]};
    canonical += "bbox=" + std::to_string(v[0]) + "," + std::to_string(v[1]) + "," + std::to_string(v[2]) + "," + std::to_string(v[3]);
  }
  if (auto it = request.query.find("min_prob"); it != request.query.end()) {
    const auto n = parse_number(it->second);
    if (!n || *n < 0.0 || *n > 1.0) return error_response(400, "min_prob must lie in [0, 1]");
    min_prob = *n;
    canonical += "&min_prob=" + it->second;
  }
  if (auto it = request.query.find("max_features"); it != request.query.end()) {
    if (!all_digits(it->second) || std::stoul(it->second) == 0) return error_response(400, "max_features must be a positive integer");
    max_features = std::stoul(it->second);
    canonical += "&max_features=" + it->second;
  }

  const std::string etag = [&] {
    char buf[24];
    std::snprintf(buf, sizeof buf, "\"%016llx\"",
                  static_cast<unsigned long long>(fnv1a(slide.entry.id + '\n' + canonical + '\n' + std::to_string(snap->version))));
    return std::string(buf);
  }();
  std::map<std::string, std::string> headers{{"ETag", etag}, {"X-Label-Version", std::to_string(snap->version)}};
  if (auto it = request.headers.find("If-None-Match"); it != request.headers.end() && it->second == etag) {
    return {304, "", "application/json", headers};
  }

  std::vector<std::size_t> hits;
  if (query) {
    std::set<std::size_t> seen;
    for (int br = floor_div(query->row0, kBucket); br <= floor_div(query->row1 - 1, kBucket); ++br) {
      for (int bc = floor_div(query->col0, kBucket); bc <= floor_div(query->col1 - 1, kBucket); ++bc) {
        auto it = slide.grid.find(bucket_key(br, bc));
        if (it == slide.grid.end()) continue;
        for (std::size_t i : it->second) {
          if (slide.boxes[i].intersects(*query)) seen.insert(i);
        }
      }
    }
    hits.assign(seen.begin(), seen.end());
  } else {
    hits.resize(slide.cells.size());
    for (std::size_t i = 0; i < hits.size(); ++i) hits[i] = i;
  }

  const std::size_t classes = manifest_.class_names.size();
  std::vector<CellRecord> out;
  for (std::size_t i : hits) {
    CellRecord rec = slide.cells[i];
    if (auto it = snap->overrides.find({slide.entry.id, rec.cell_id}); it != snap->overrides.end()) {
      rec.class_label = it->second;
      std::vector<double> onehot(classes, 0.0);
      if (it->second >= 0 && static_cast<std::size_t>(it->second) < classes) onehot[static_cast<std::size_t>(it->second)] = 1.0;
      rec.class_probs = onehot;
    }
    if (min_prob > 0.0 && rec.class_probs) {
      const auto& p = *rec.class_probs;
      const double prob = rec.class_label && static_cast<std::size_t>(*rec.class_label) < p.size()
                              ? p[static_cast<std::size_t>(*rec.class_label)]
                              : *std::max_element(p.begin(), p.end());
      if (prob < min_prob) continue;
    }
    out.push_back(std::move(rec));
  }

  if (max_features > 0 && out.size() > max_features) {
    // Uniform grid thinning: one cell (smallest id) per grid square.
    const int g = std::max(1, static_cast<int>(std::floor(std::sqrt(static_cast<double>(max_features)))));
    const Rect area = query.value_or(Rect{0, 0, std::max(1, slide.entry.height), std::max(1, slide.entry.width)});
    std::map<std::pair<int, int>, std::size_t> keep;
    for (std::size_t i = 0; i < out.size(); ++i) {
      const auto bin = [g](double v, int lo, int hi) {
        return std::clamp(static_cast<int>(std::floor((v - lo) * g / static_cast<double>(hi - lo))), 0, g - 1);
      };
      const std::pair<int, int> key{bin(out[i].centroid.row, area.row0, area.row1), bin(out[i].centroid.col, area.col0, area.col1)};
      auto [it, inserted] = keep.emplace(key, i);
      if (!inserted && out[i].cell_id < out[it->second].cell_id) it->second = i;
    }
    std::vector<CellRecord> thinned;
    for (const auto& [key, i] : keep) thinned.push_back(std::move(out[i]));
    out = std::move(thinned);
  }

  ClassNames names;
  for (std::size_t k = 0; k < classes; ++k) names[static_cast<int>(k)] = manifest_.class_names[k];
  return {200, to_geojson(std::move(out), names).dump(), "application/geo+json", headers};
}

HttpResponse Service::post_label(const SlideData& slide, const std::string& cell_id, const std::string& body) {
  if (!slide.index.count(cell_id)) return error_response(404, "unknown cell " + cell_id);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(body);
  } catch (const nlohmann::json::exception&) {
    return error_response(400, "body must be JSON");
  }
  if (!j.is_object() || !j.contains("new_label")) return error_response(400, "body needs new_label");
  int label = -1;
  const auto& nl = j["new_label"];
  if (nl.is_number_integer()) {
    label = nl.get<int>();
  } else if (nl.is_string()) {
    const auto it = std::find(manifest_.class_names.begin(), manifest_.class_names.end(), nl.get<std::string>());
    if (it != manifest_.class_names.end()) label = static_cast<int>(it - manifest_.class_names.begin());
  }
  if (label < 0 || static_cast<std::size_t>(label) >= manifest_.class_names.size()) {
    return error_response(422, "label is not in the class universe");
  }
  const std::string actor = j.value("actor", std::string("anonymous"));

  std::lock_guard writer(write_mutex_);
  const auto snap = snapshot();
  const CellKey key{slide.entry.id, cell_id};
  std::optional<int> current;
  if (auto it = snap->overrides.find(key); it != snap->overrides.end()) {
    current = it->second;
  } else if (auto b = base_.find(key); b != base_.end()) {
    current = b->second;
  }
  if (current && *current == label) {
    return json_response(200, {{"noop", true}, {"version", snap->version}, {"label", label}});
  }
  AnnotationEvent e{snap->version + 1, slide.entry.id, cell_id, current, label, actor, options_.clock()};
  {
    std::ofstream log(root_ / manifest_.events, std::ios::app);
    if (!log) fail(ErrorCode::Io, "cannot append to the event log");
    log << to_json(e).dump() << '\n';
    log.flush();
    if (!log) fail(ErrorCode::Io, "event log write failed");
  }
  auto next = std::make_shared<Snapshot>(*snap);
  next->version = e.event_id;
  next->overrides[key] = label;
  {
    std::lock_guard lock(snapshot_mutex_);
    snapshot_ = std::move(next);
  }
  auto out = to_json(e);
  out["noop"] = false;
  out["version"] = e.event_id;
  return json_response(200, out);
}

HttpResponse Service::post_train(const std::string& body) {
  nlohmann::json j;
  try {
    j = body.empty() ? nlohmann::json::object() : nlohmann::json::parse(body);
  } catch (const nlohmann::json::exception&) {
    return error_response(400, "body must be JSON");
  }
  const TrainConfig config = train_config_from_json(j.contains("config") ? j["config"] : j);
  std::lock_guard lock(job_mutex_);
  if (job_active_) fail(ErrorCode::JobAlreadyRunning, "a training job is already running");
  if (worker_.joinable()) worker_.join();
  const std::uint64_t id = next_job_++;
  jobs_[id] = Job{id, "queued", config, nlohmann::json::object()};
  job_active_ = true;
  worker_ = std::thread([this, id] { run_job(id); });
  return json_response(202, {{"job_id", id}, {"state", "queued"}});
}

HttpResponse Service::get_train(const std::string& id) const {
  if (!all_digits(id)) return error_response(404, "unknown job");
  std::lock_guard lock(job_mutex_);
  auto it = jobs_.find(std::stoull(id));
  if (it == jobs_.end()) return error_response(404, "unknown job");
  const Job& job = it->second;
  return json_response(200, {{"job_id", job.id}, {"state", job.state}, {"config", to_json(job.config)}, {"result", job.result}});
}

LabeledCellSet labeled_set(const std::filesystem::path& root, const WorkspaceManifest& manifest, const LabelMap& labels,
                           LabeledSetSummary* summary) {
  std::vector<CellRecord> cells;
  EmbeddingTable table;
  SplitSpec split;
  for (const auto& e : manifest.slides) {
    if (e.split.empty()) continue;
    (e.split == "train" ? split.train : split.val).push_back(e.id);
    const auto emb = read_embeddings(root / e.embeddings, root / e.embedding_index);
    for (auto it = labels.lower_bound({e.id, std::string()}); it != labels.end() && it->first.first == e.id; ++it) {
      CellRecord rec;
      rec.slide_id = e.id;
      rec.cell_id = it->first.second;
      rec.class_label = it->second;
      table.append(rec.cell_id, emb.row(emb.row_of(rec.cell_id)));
      cells.push_back(std::move(rec));
    }
  }
  LabeledCellSet set = build_labeled_set(cells, table, split, manifest.class_names, summary);
  set.encoder = manifest.encoder;
  return set;
}

LabelMap workspace_labels(const std::filesystem::path& manifest_file) {
  const auto manifest = load_manifest(manifest_file);
  const auto root = manifest_file.parent_path();
  LabelMap base;
  for (const auto& e : manifest.slides) {
    for (const auto& c : read_cells(root / e.cells)) {
      if (c.class_label) base[{e.id, c.cell_id}] = *c.class_label;
    }
  }
  const auto events_path = root / manifest.events;
  if (!std::filesystem::exists(events_path)) return base;
  return replay(std::move(base), read_events(events_path));
}

void Service::run_job(std::uint64_t job_id) {
  TrainConfig config;
  {
    std::lock_guard lock(job_mutex_);
    jobs_[job_id].state = "running";
    config = jobs_[job_id].config;
  }
  nlohmann::json result;
  std::string state = "done";
  try {
    LabeledSetSummary summary;
    const LabeledCellSet set = labeled_set(root_, manifest_, current_labels(), &summary);
    const TrainResult tr = train(set, config);
    const auto dir = root_ / manifest_.checkpoints;
    std::filesystem::create_directories(dir);
    const std::string stem = "job-" + std::to_string(job_id);
    save_checkpoint(dir / (stem + ".json"), tr.model);
    write_history_csv(dir / (stem + ".history.csv"), tr.history);
    result = {{"val_auroc", tr.best_auroc},
              {"val_macro_f1", tr.val_macro_f1},
              {"best_epoch", tr.best_epoch},
              {"epochs", tr.history.size()},
              {"checkpoint", (std::filesystem::path(manifest_.checkpoints) / (stem + ".json")).string()},
              {"counts", to_json(summary)}};
  } catch (const std::exception& e) {
    state = "failed";
    result = {{"error", e.what()}};
  }
  std::lock_guard lock(job_mutex_);
  jobs_[job_id].state = state;
  jobs_[job_id].result = std::move(result);
  job_active_ = false;
  job_cv_.notify_all();
}

void Service::wait_for_jobs() {
  std::unique_lock lock(job_mutex_);
  job_cv_.wait(lock, [this] { return !job_active_; });
}

std::pair<std::string, int> bind_address_from_env() {
  const char* env = std::getenv("CELLFLOW_BIND");
  std::string s = env ? env : "127.0.0.1:8080";
  const auto colon = s.rfind(':');
  if (colon == std::string::npos) fail(ErrorCode::InvalidConfig, "CELLFLOW_BIND must be host:port");
  const std::string port = s.substr(colon + 1);
  if (!all_digits(port) || std::stoi(port) > 65535) fail(ErrorCode::InvalidConfig, "CELLFLOW_BIND has a bad port");
  return {s.substr(0, colon), std::stoi(port)};
}

}  // namespace cellflow
