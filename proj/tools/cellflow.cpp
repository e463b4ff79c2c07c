#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cellflow/classifier.hpp"
#include "cellflow/datagen.hpp"
#include "cellflow/metrics.hpp"
#include "cellflow/service.hpp"
#include "jpeg.hpp"
#include "pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cellflow;
using namespace cellflow::cli;

namespace {

constexpr const char* kVersion = "0.1.0";

struct Globals {
  fs::path workspace = ".";
  std::uint64_t seed = 0;
  bool seed_set = false;
  int threads = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  std::string log_file;
};

Globals g;

fs::path ws(const fs::path& p) { return p.is_absolute() ? p : g.workspace / p; }

// JSON-lines log on stderr or --log.
class Log {
 public:
  void event(json j) {
    j["ts"] = utc_timestamp();
    const std::string line = j.dump();
    std::lock_guard lock(mutex_);
    if (!g.log_file.empty()) {
      std::ofstream out(ws(g.log_file), std::ios::app);
      out << line << '\n';
    } else {
      std::cerr << line << '\n';
    }
  }

 private:
  std::mutex mutex_;
};

Log logger;

class StageTimer {
 public:
  explicit StageTimer(std::string stage) : stage_(std::move(stage)), start_(std::chrono::steady_clock::now()) {}
  ~StageTimer() {
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    json j{{"stage", stage_}, {"seconds", s}};
    j.update(fields_);
    logger.event(std::move(j));
  }
  json& fields() { return fields_; }

 private:
  std::string stage_;
  std::chrono::steady_clock::time_point start_;
  json fields_ = json::object();
};

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) fail(ErrorCode::Io, "cannot read " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorCode::InvalidConfig, p.string() + ": " + e.what());
  }
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) fail(ErrorCode::Io, "cannot write " + p.string());
  out << text;
  if (!out) fail(ErrorCode::Io, "short write to " + p.string());
}

std::vector<fs::path> tensor_files(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".cvtt") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

// Shared geometry flags.
struct GeometryFlags {
  SlideGeometry geo;
  std::string slide_id;

  void add(CLI::App* cmd) {
    cmd->add_option("--width", geo.width, "Slide width in px")->required();
    cmd->add_option("--height", geo.height, "Slide height in px")->required();
    cmd->add_option("--tile-edge", geo.tile_edge, "Tile edge in px")->capture_default_str();
    cmd->add_option("--overlap", geo.overlap, "Tile overlap in px")->capture_default_str();
    cmd->add_option("--patch", geo.patch, "Encoder patch size in px")->capture_default_str();
    cmd->add_option("--mpp", geo.mpp, "Microns per pixel")->capture_default_str();
    cmd->add_option("--slide-id", slide_id, "Slide identifier used in cell ids")->required();
  }
};

struct PostprocFlags {
  PostprocParams params;
  void add(CLI::App* cmd) {
    cmd->add_option("--np-threshold", params.np_threshold, "Foreground threshold")->capture_default_str();
    cmd->add_option("--marker-threshold", params.marker_threshold, "Marker energy threshold")->capture_default_str();
    cmd->add_option("--min-size", params.min_object_size, "Minimum instance area in px")->capture_default_str();
    cmd->add_option("--sobel", params.sobel_size, "Sobel kernel size (3, 5 or 7)")->capture_default_str();
  }
};

struct TokenFlags {
  int k_extra = 1;
  std::string encoder;
  void add(CLI::App* cmd) {
    cmd->add_option("--k-extra", k_extra, "Non-spatial tokens preceding the grid")->capture_default_str();
    cmd->add_option("--encoder", encoder, "Encoder name recorded with the embeddings");
  }
  TokenLoader loader(const fs::path& dir, const SlideGeometry& geo) const {
    const TokenLayout layout{geo.patch, geo.tile_edge, geo.tile_edge, k_extra, encoder};
    return [dir, layout](int r, int c) { return reshape_tokens(read_tensor(dir / tile_file_name(r, c)), layout); };
  }
};

std::map<std::pair<int, int>, TileSegmentation> segment_tiles(const fs::path& maps_dir, const TilePlan& plan,
                                                              const PostprocParams& params) {
  std::vector<TileSegmentation> segs(plan.tiles.size());
  parallel_for(plan.tiles.size(), g.threads, [&](std::size_t i) {
    const Tile& t = plan.tiles[i];
    segs[i] = segment_tile(maps_from_tensor(read_tensor(maps_dir / tile_file_name(t.row, t.col))), params);
  });
  std::map<std::pair<int, int>, TileSegmentation> out;
  for (std::size_t i = 0; i < segs.size(); ++i) out.emplace(std::pair{plan.tiles[i].row, plan.tiles[i].col}, std::move(segs[i]));
  return out;
}

// ---------------------------------------------------------------------------------------------

void add_postprocess(CLI::App& app) {
  auto* cmd = app.add_subcommand("postprocess", "Instance segmentation from (H, W, C) probability maps");
  static fs::path in, out;
  static PostprocFlags pp;
  cmd->add_option("--maps", in, "Maps tensor, or a directory of them")->required();
  cmd->add_option("--out", out, "Instance map tensor, or a directory when --maps is one")->required();
  pp.add(cmd);
  cmd->callback([] {
    StageTimer timer("postprocess");
    const fs::path src = ws(in), dst = ws(out);
    std::vector<std::pair<fs::path, fs::path>> jobs;
    if (fs::is_directory(src)) {
      fs::create_directories(dst);
      for (const auto& f : tensor_files(src)) jobs.emplace_back(f, dst / f.filename());
    } else {
      if (dst.has_parent_path()) fs::create_directories(dst.parent_path());
      jobs.emplace_back(src, dst);
    }
    std::vector<std::size_t> counts(jobs.size());
    parallel_for(jobs.size(), g.threads, [&](std::size_t i) {
      const auto seg = segment_tile(maps_from_tensor(read_tensor(jobs[i].first)), pp.params);
      write_segmentation(jobs[i].second, seg);
      counts[i] = seg.instances.count();
    });
    std::size_t total = 0;
    for (auto n : counts) total += n;
    timer.fields() = {{"files", jobs.size()}, {"instances", total}};
  });
}

void add_merge(CLI::App& app) {
  auto* cmd = app.add_subcommand("merge", "Deduplicate per-tile instances into slide-level cell records");
  static fs::path tiles, out, plan_out;
  static GeometryFlags geo;
  cmd->add_option("--tiles", tiles, "Directory of per-tile instance maps")->required();
  cmd->add_option("--out", out, "Cell records (JSON lines)")->required();
  cmd->add_option("--plan-out", plan_out, "Also write the tile plan as JSON");
  geo.add(cmd);
  cmd->callback([] {
    StageTimer timer("merge");
    const TilePlan plan = plan_tiles(geo.geo);
    std::map<std::pair<int, int>, TileSegmentation> segs;
    for (const Tile& t : plan.tiles) segs.emplace(std::pair{t.row, t.col}, read_segmentation(ws(tiles) / tile_file_name(t.row, t.col)));
    const auto cells = merge_segmentations(plan, segs, geo.slide_id);
    write_cells(ws(out), cells);
    if (!plan_out.empty()) write_text(ws(plan_out), to_json(plan).dump(2) + "\n");
    timer.fields() = {{"tiles", plan.tiles.size()}, {"cells", cells.size()}};
  });
}

void add_embed(CLI::App& app) {
  auto* cmd = app.add_subcommand("embed", "Mean token embedding per cell");
  static fs::path cells_path, tokens, matrix, index;
  static int tile_edge = 1024, patch = 16;
  static TokenFlags tf;
  cmd->add_option("--cells", cells_path, "Cell records (JSON lines)")->required();
  cmd->add_option("--tokens", tokens, "Directory of per-tile flat token tensors (N, D)")->required();
  cmd->add_option("--tile-edge", tile_edge, "Tile edge in px")->capture_default_str();
  cmd->add_option("--patch", patch, "Encoder patch size in px")->capture_default_str();
  cmd->add_option("--out-matrix", matrix, "Embedding matrix tensor")->required();
  cmd->add_option("--out-index", index, "Row index (JSON lines)")->required();
  tf.add(cmd);
  cmd->callback([] {
    StageTimer timer("embed");
    SlideGeometry geo;
    geo.tile_edge = tile_edge;
    geo.patch = patch;
    const auto cells = read_cells(ws(cells_path));
    const auto table = embed_cells(cells, tf.loader(ws(tokens), geo));
    write_embeddings(ws(matrix), ws(index), table);
    timer.fields() = {{"cells", cells.size()}, {"dim", table.dim}};
  });
}

FOV parse_fov(const std::string& s) {
  FOV f;
  char c1 = 0, c2 = 0, c3 = 0;
  std::istringstream in(s);
  if (!(in >> f.row0 >> c1 >> f.col0 >> c2 >> f.row1 >> c3 >> f.col1) || c1 != ',' || c2 != ',' || c3 != ',') {
    fail(ErrorCode::InvalidArgument, "--fov expects r0,c0,r1,c1");
  }
  f.validate();
  return f;
}

void add_genlabels(CLI::App& app) {
  auto* cmd = app.add_subcommand("genlabels", "Label cells from a registered immunofluorescence mask");
  static fs::path cells_path, mask_path, out;
  static double threshold = kIfThreshold;
  static std::string antibody, fov;
  cmd->add_option("--cells", cells_path, "Cell records (JSON lines)")->required();
  cmd->add_option("--if-mask", mask_path, "uint8 (H, W) mask tensor, nonzero = positive")->required();
  cmd->add_option("--threshold", threshold, "Positive when the overlap fraction exceeds this")->capture_default_str();
  cmd->add_option("--antibody", antibody, "Antibody name stored with the labels");
  cmd->add_option("--fov", fov, "Keep only cells whose centroid lies in r0,c0,r1,c1 (inclusive)");
  cmd->add_option("--out", out, "Labelled cell records")->required();
  cmd->callback([] {
    StageTimer timer("genlabels");
    auto cells = read_cells(ws(cells_path));
    if (!fov.empty()) cells = filter_by_fov<CellRecord>(cells, parse_fov(fov));
    const IFMask mask{to_raster<std::uint8_t>(read_tensor(ws(mask_path))), antibody, true};
    const auto labels = label_records_from_if(cells, mask, threshold);
    if (!antibody.empty()) {
      for (auto& c : cells) c.extra["antibody"] = antibody;
    }
    write_cells(ws(out), cells);
    std::size_t pos = 0;
    for (const auto& l : labels) pos += l.positive;
    timer.fields() = {{"cells", cells.size()}, {"positive", pos}};
  });
}

TrainConfig load_config(const std::string& path) {
  TrainConfig c = path.empty() ? TrainConfig{} : train_config_from_json(read_json(ws(path)));
  if (g.seed_set) c.seed = g.seed;
  c.validate();
  return c;
}

void add_train(CLI::App& app) {
  auto* cmd = app.add_subcommand("train", "Train the cell classifier on a workspace's labelled cells");
  static fs::path manifest, out, history;
  static std::string config;
  cmd->add_option("--manifest", manifest, "Workspace manifest")->required();
  cmd->add_option("--config", config, "TrainConfig JSON");
  cmd->add_option("--out", out, "Checkpoint path (.json)")->required();
  cmd->add_option("--history", history, "Per-epoch CSV");
  cmd->callback([] {
    StageTimer timer("train");
    const TrainConfig cfg = load_config(config);
    const fs::path mf = ws(manifest);
    LabeledSetSummary summary;
    const auto set = labeled_set(mf.parent_path(), load_manifest(mf), workspace_labels(mf), &summary);
    const TrainResult r = train(set, cfg);
    save_checkpoint(ws(out), r.model);
    if (!history.empty()) write_history_csv(ws(history), r.history);
    const json report{{"val_auroc", r.best_auroc},
                      {"val_macro_f1", r.val_macro_f1},
                      {"best_epoch", r.best_epoch},
                      {"epochs", r.history.size()},
                      {"counts", to_json(summary)}};
    std::cout << report.dump(2) << '\n';
    timer.fields() = {{"epochs", r.history.size()}, {"val_auroc", r.best_auroc}};
  });
}

void add_tune(CLI::App& app) {
  auto* cmd = app.add_subcommand("tune", "Random hyperparameter search over cached embeddings");
  static fs::path manifest, out;
  static std::string space_path, config;
  static int runs = 100;
  cmd->add_option("--manifest", manifest, "Workspace manifest")->required();
  cmd->add_option("--runs", runs, "Number of random configurations")->capture_default_str();
  cmd->add_option("--space", space_path, "Search space JSON");
  cmd->add_option("--config", config, "Base TrainConfig JSON");
  cmd->add_option("--out", out, "Leaderboard JSON")->required();
  cmd->callback([] {
    StageTimer timer("tune");
    const TrainConfig base = load_config(config);
    const SearchSpace space = space_path.empty() ? SearchSpace{} : search_space_from_json(read_json(ws(space_path)));
    const fs::path mf = ws(manifest);
    EmbeddingCache cache([&] {
      StageTimer extract("extract_embeddings");
      return labeled_set(mf.parent_path(), load_manifest(mf), workspace_labels(mf));
    });
    const TuneResult r = tune(cache, space, runs, g.seed, base);
    write_text(ws(out), to_json(r).dump(2) + "\n");
    timer.fields() = {{"runs", runs}, {"embedding_extractions", cache.extraction_count()}, {"best_auroc", r.best.val_auroc}};
  });
}

void add_predict(CLI::App& app) {
  auto* cmd = app.add_subcommand(
      "predict", "Classify cells and export GeoJSON, either end to end from tile maps and tokens or from stored cells");
  static fs::path maps, tokens, cells_path, matrix, index, checkpoint, out, cells_out;
  static GeometryFlags geo;
  static PostprocFlags pp;
  static TokenFlags tf;
  cmd->add_option("--checkpoint", checkpoint, "Classifier checkpoint")->required();
  cmd->add_option("--out", out, "GeoJSON output")->required();
  cmd->add_option("--maps", maps, "Directory of per-tile maps (end-to-end mode)");
  cmd->add_option("--tokens", tokens, "Directory of per-tile tokens (end-to-end mode)");
  cmd->add_option("--cells", cells_path, "Cell records (stored mode)");
  cmd->add_option("--embeddings", matrix, "Embedding matrix (stored mode)");
  cmd->add_option("--index", index, "Embedding index (stored mode)");
  cmd->add_option("--cells-out", cells_out, "Also write the classified cell records");
  cmd->add_option("--width", geo.geo.width, "Slide width in px (end-to-end mode)");
  cmd->add_option("--height", geo.geo.height, "Slide height in px (end-to-end mode)");
  cmd->add_option("--tile-edge", geo.geo.tile_edge, "Tile edge in px")->capture_default_str();
  cmd->add_option("--overlap", geo.geo.overlap, "Tile overlap in px")->capture_default_str();
  cmd->add_option("--patch", geo.geo.patch, "Encoder patch size in px")->capture_default_str();
  cmd->add_option("--slide-id", geo.slide_id, "Slide identifier (end-to-end mode)");
  pp.add(cmd);
  tf.add(cmd);
  cmd->callback([] {
    StageTimer timer("predict");
    const Classifier model = load_checkpoint(ws(checkpoint));
    std::vector<CellRecord> cells;
    EmbeddingTable table;
    const bool end_to_end = !maps.empty();
    if (end_to_end) {
      if (tokens.empty() || geo.slide_id.empty()) {
        fail(ErrorCode::InvalidArgument, "--maps needs --tokens, --width, --height and --slide-id");
      }
      const TilePlan plan = plan_tiles(geo.geo);
      cells = merge_segmentations(plan, segment_tiles(ws(maps), plan, pp.params), geo.slide_id);
      table = embed_cells(cells, tf.loader(ws(tokens), geo.geo));
    } else {
      if (cells_path.empty() || matrix.empty() || index.empty()) {
        fail(ErrorCode::InvalidArgument, "give either --maps/--tokens or --cells/--embeddings/--index");
      }
      cells = read_cells(ws(cells_path));
      table = read_embeddings(ws(matrix), ws(index));
    }
    classify_cells(cells, table, model);
    write_text(ws(out), geojson_text(cells, class_names_of(model)));
    if (!cells_out.empty()) write_cells(ws(cells_out), cells);
    timer.fields() = {{"cells", cells.size()}, {"mode", end_to_end ? "end_to_end" : "stored"}};
  });
}

// Without a class map every instance is class 0.
std::map<std::uint32_t, int> class_map(const json& j, const LabelRaster& labels) {
  std::map<std::uint32_t, int> out;
  if (j.is_null()) {
    for (auto v : labels.data()) {
      if (v) out[v] = 0;
    }
    return out;
  }
  for (const auto& [k, v] : j.items()) out[static_cast<std::uint32_t>(std::stoul(k))] = v.get<int>();
  return out;
}

std::vector<Detection> detections_of(const LabelRaster& labels, const std::map<std::uint32_t, int>& classes) {
  std::vector<Detection> out;
  const InstanceMap inst(labels);
  for (const auto& s : inst.instances()) {
    const auto it = classes.find(s.id);
    out.push_back({s.centroid, it == classes.end() ? 0 : it->second});
  }
  return out;
}

void add_evaluate(CLI::App& app) {
  auto* cmd = app.add_subcommand("evaluate", "Detection and panoptic quality metrics over an evaluation suite");
  static fs::path suite_path, out_json, out_csv;
  static double radius = kDetectionRadius;
  cmd->add_option("--suite", suite_path, "Suite JSON {classes, images: [{pred, gt, pred_classes, gt_classes}]}")->required();
  cmd->add_option("--radius", radius, "Detection matching radius in px")->capture_default_str();
  cmd->add_option("--out-json", out_json, "Metrics JSON");
  cmd->add_option("--out-csv", out_csv, "Metrics CSV");
  cmd->callback([] {
    StageTimer timer("evaluate");
    const fs::path sp = ws(suite_path);
    const json suite = read_json(sp);
    std::vector<int> classes;
    std::vector<SuiteImage> images;
    std::vector<std::map<int, MatchSets>> matches;
    try {
      classes = suite.value("classes", std::vector<int>{0});
      for (const auto& img : suite.at("images")) {
        SuiteImage s;
        s.pred = to_raster<std::uint32_t>(read_tensor(sp.parent_path() / img.at("pred").get<std::string>()));
        s.gt = to_raster<std::uint32_t>(read_tensor(sp.parent_path() / img.at("gt").get<std::string>()));
        s.pred_classes = class_map(img.value("pred_classes", json()), s.pred);
        s.gt_classes = class_map(img.value("gt_classes", json()), s.gt);
        matches.push_back(
            match_detections(detections_of(s.pred, s.pred_classes), detections_of(s.gt, s.gt_classes), radius));
        images.push_back(std::move(s));
      }
    } catch (const json::exception& e) {
      fail(ErrorCode::InvalidConfig, sp.string() + ": " + e.what());
    }
    const PQReport pq_report = mpq_suite(images, classes);
    const DetectionReport det = detection_scores(matches);
    std::printf("%-12s %8s\n", "metric", "value");
    const std::pair<const char*, double> rows[] = {{"mPQ", pq_report.mpq},       {"mPQ+", pq_report.mpq_plus},
                                                   {"bPQ", pq_report.bpq},       {"Dice", pq_report.dice},
                                                   {"mF1", det.m_f1},            {"mPrecision", det.m_precision},
                                                   {"mRecall", det.m_recall}};
    for (const auto& [name, v] : rows) std::printf("%-12s %8.4f\n", name, v);
    if (!out_json.empty()) {
      write_text(ws(out_json), json{{"segmentation", to_json(pq_report)}, {"detection", to_json(det)}}.dump(2) + "\n");
    }
    if (!out_csv.empty()) write_text(ws(out_csv), to_csv(pq_report, det));
    timer.fields() = {{"images", images.size()}};
  });
}

void add_subsample(CLI::App& app) {
  auto* cmd = app.add_subcommand("subsample", "Negative-ratio or stratified subsets of labelled cells");
  static fs::path cells_path, out;
  static std::size_t ratio = 0;
  static double fraction = 0.0;
  static int positive = 1;
  cmd->add_option("--cells", cells_path, "Labelled cell records")->required();
  cmd->add_option("--out", out, "Subset cell records")->required();
  auto* r = cmd->add_option("--ratio", ratio, "Keep all positives and ratio x as many negatives");
  auto* f = cmd->add_option("--fraction", fraction, "Class-stratified fraction in (0, 1]");
  r->excludes(f);
  cmd->add_option("--positive-class", positive, "Label treated as positive for --ratio")->capture_default_str();
  cmd->callback([r, f] {
    StageTimer timer("subsample");
    const auto cells = read_cells(ws(cells_path));
    std::vector<int> labels;
    for (const auto& c : cells) {
      if (!c.class_label) fail(ErrorCode::MissingLabel, "cell " + c.cell_id + " has no label");
      labels.push_back(*c.class_label);
    }
    std::vector<std::size_t> keep;
    bool clamped = false;
    if (r->count()) {
      std::vector<std::size_t> pos, neg;
      for (std::size_t i = 0; i < cells.size(); ++i) (labels[i] == positive ? pos : neg).push_back(i);
      const auto s = ratio_sample(pos.size(), neg.size(), ratio, g.seed);
      clamped = s.clamped;
      keep = pos;
      for (auto k : s.negatives) keep.push_back(neg[k]);
      std::sort(keep.begin(), keep.end());
    } else if (f->count()) {
      keep = stratified_fraction(labels, fraction, g.seed);
    } else {
      fail(ErrorCode::InvalidArgument, "give --ratio or --fraction");
    }
    std::vector<CellRecord> subset;
    for (auto i : keep) subset.push_back(cells[i]);
    write_cells(ws(out), subset);
    timer.fields() = {{"kept", subset.size()}, {"of", cells.size()}, {"clamped", clamped}};
  });
}

ByteRaster to_bytes(const FloatRaster& f) {
  ByteRaster out(f.rows(), f.cols(), f.channels());
  for (std::size_t i = 0; i < f.data().size(); ++i) {
    out.data()[i] = static_cast<std::uint8_t>(std::clamp(std::lround(f.data()[i]), 0L, 255L));
  }
  return out;
}

FloatRaster to_floats(const ByteRaster& b) {
  FloatRaster out(b.rows(), b.cols(), b.channels());
  for (std::size_t i = 0; i < b.data().size(); ++i) out.data()[i] = b.data()[i];
  return out;
}

void add_resample(CLI::App& app) {
  auto* cmd = app.add_subcommand("resample", "Lanczos-3 image or nearest-neighbour label resampling");
  static fs::path in, out;
  static double scale = 1.0;
  cmd->add_option("--in", in, "float32/uint8 image or uint32 instance map")->required();
  cmd->add_option("--scale", scale, "Output size / input size")->required();
  cmd->add_option("--out", out, "Output tensor")->required();
  cmd->callback([] {
    StageTimer timer("resample");
    Tensor t = read_tensor(ws(in));
    switch (t.dtype()) {
      case DType::UInt32: {
        const auto r = resample_labels(InstanceMap(to_raster<std::uint32_t>(std::move(t))), scale);
        write_tensor(ws(out), to_tensor(r.map.labels()));
        timer.fields() = {{"dropped_instances", r.dropped}};
        if (r.dropped) std::cout << "dropped " << r.dropped << " instances\n";
        break;
      }
      case DType::UInt8:
        write_tensor(ws(out), to_tensor(to_bytes(lanczos_resample(to_floats(to_raster<std::uint8_t>(std::move(t))), scale))));
        break;
      case DType::Float32:
        write_tensor(ws(out), to_tensor(lanczos_resample(to_raster<float>(std::move(t)), scale)));
        break;
    }
  });
}

void add_pyramid(CLI::App& app) {
  auto* cmd = app.add_subcommand("pyramid", "JPEG tile pyramid ({level}/{x}/{y}.jpg, level 0 = full resolution)");
  static fs::path image, out;
  static int tile = 256, quality = 90;
  cmd->add_option("--image", image, "uint8 (H, W[, 3]) image tensor")->required();
  cmd->add_option("--out", out, "Pyramid directory")->required();
  cmd->add_option("--tile", tile, "Tile edge in px")->capture_default_str()->check(CLI::Range(16, 4096));
  cmd->add_option("--quality", quality, "JPEG quality")->capture_default_str()->check(CLI::Range(1, 100));
  cmd->callback([] {
    StageTimer timer("pyramid");
    ByteRaster level = to_raster<std::uint8_t>(read_tensor(ws(image)));
    const int width = level.cols(), height = level.rows();
    int l = 0;
    std::size_t files = 0;
    for (;; ++l) {
      for (int y = 0; y * tile < level.rows(); ++y) {
        for (int x = 0; x * tile < level.cols(); ++x) {
          const int r0 = y * tile, c0 = x * tile;
          const int rows = std::min(tile, level.rows() - r0), cols = std::min(tile, level.cols() - c0);
          ByteRaster crop(rows, cols, level.channels());
          for (int r = 0; r < rows; ++r) {
            for (int c = 0; c < cols; ++c) {
              for (int k = 0; k < level.channels(); ++k) crop(r, c, k) = level(r0 + r, c0 + c, k);
            }
          }
          const fs::path dir = ws(out) / std::to_string(l) / std::to_string(x);
          fs::create_directories(dir);
          write_jpeg(dir / (std::to_string(y) + ".jpg"), crop, quality);
          ++files;
        }
      }
      if (level.rows() <= tile && level.cols() <= tile) break;
      level = to_bytes(lanczos_resample(to_floats(level), 0.5));
    }
    write_text(ws(out) / "pyramid.json",
               json{{"width", width}, {"height", height}, {"tile", tile}, {"levels", l + 1}}.dump(2) + "\n");
    timer.fields() = {{"levels", l + 1}, {"tiles", files}};
  });
}

std::atomic<bool> stop_requested{false};

void add_serve(CLI::App& app) {
  auto* cmd = app.add_subcommand("serve", "HTTP labelling service over a workspace (bind address from CELLFLOW_BIND)");
  static fs::path manifest;
  static std::string bind;
  cmd->add_option("--manifest", manifest, "Workspace manifest")->required();
  cmd->add_option("--bind", bind, "host:port, overrides CELLFLOW_BIND");
  cmd->callback([] {
    if (!bind.empty()) setenv("CELLFLOW_BIND", bind.c_str(), 1);
    const auto [host, port] = bind_address_from_env();
    Service service(ws(manifest));
    HttpServer server(service);
    std::signal(SIGINT, [](int) { stop_requested = true; });
    std::signal(SIGTERM, [](int) { stop_requested = true; });
    std::thread watcher([&] {
      while (!stop_requested) std::this_thread::sleep_for(std::chrono::milliseconds(100));
      server.stop();
    });
    logger.event({{"stage", "serve"}, {"host", host}, {"port", port}});
    const bool ok = server.listen(host, port);
    stop_requested = true;
    watcher.join();
    service.wait_for_jobs();
    service.write_snapshot();
    if (!ok) fail(ErrorCode::Io, "cannot bind " + host + ":" + std::to_string(port));
  });
}

void add_co2(CLI::App& app) {
  auto* cmd = app.add_subcommand("co2", "Carbon footprint from energy, or from run time and device power");
  static double wh = -1, watts = -1, seconds = -1, intensity = kCarbonIntensity;
  static fs::path log_path;
  auto* e = cmd->add_option("--wh", wh, "Energy in watt hours");
  auto* w = cmd->add_option("--watts", watts, "Device power draw");
  auto* s = cmd->add_option("--seconds", seconds, "Wall time");
  auto* l = cmd->add_option("--log-file", log_path, "Sum stage timings from a JSON-lines log");
  cmd->add_option("--intensity", intensity, "kg CO2 eq. per kWh")->capture_default_str();
  e->excludes(w)->excludes(s)->excludes(l);
  s->excludes(l);
  cmd->callback([e, w, s, l] {
    double energy = wh;
    if (!e->count()) {
      if (!w->count() || (!s->count() && !l->count())) fail(ErrorCode::InvalidArgument, "give --wh, or --watts with --seconds or --log-file");
      double secs = seconds;
      if (l->count()) {
        secs = 0;
        std::ifstream in(ws(log_path));
        if (!in) fail(ErrorCode::Io, "cannot read " + ws(log_path).string());
        std::string line;
        while (std::getline(in, line)) {
          if (line.empty()) continue;
          const auto j = json::parse(line, nullptr, false);
          // Only top-level stages; nested timers would double count.
          if (j.is_object() && j.contains("seconds") && j.value("stage", "") != "extract_embeddings") {
            secs += j["seconds"].get<double>();
          }
        }
      }
      energy = watts * secs / 3600.0;
    }
    std::printf("%.2f kg CO2 eq.\n", co2_kg(energy, intensity));
  });
}

int exit_code(ErrorCode code) {
  switch (code) {
    case ErrorCode::Io:
    case ErrorCode::JobAlreadyRunning:
      return 2;
    default:
      return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cell segmentation, embedding, classification and evaluation pipeline"};
  app.require_subcommand(1);
  app.set_version_flag("--version", json{{"name", "cellflow"}, {"version", kVersion}}.dump());
  app.add_option("--workspace", g.workspace, "Root for relative paths")->capture_default_str();
  app.add_option_function<std::uint64_t>(
      "--seed", [](std::uint64_t s) { g.seed = s, g.seed_set = true; }, "Seed for every stochastic stage");
  app.add_option("--threads", g.threads, "Tile-level worker threads")->check(CLI::PositiveNumber);
  app.add_option("--log", g.log_file, "Append JSON-lines logs here instead of stderr");

  add_postprocess(app);
  add_merge(app);
  add_embed(app);
  add_genlabels(app);
  add_train(app);
  add_tune(app);
  add_predict(app);
  add_evaluate(app);
  add_subsample(app);
  add_resample(app);
  add_pyramid(app);
  add_serve(app);
  add_co2(app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e.code());
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
