#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "doctest.h"

#include "cellflow/classifier.hpp"
#include "cellflow/tensor_io.hpp"
#include "cellflow/wsi.hpp"
#include "support/fixtures.hpp"
#include "support/scenes.hpp"
#include "support/workspace.hpp"

namespace fs = std::filesystem;
using namespace cellflow;

namespace {

struct Run {
  int code = 0;
  std::string output;
};

Run run(const fs::path& ws, const std::string& args) {
  const fs::path out = ws / "cli_output.txt";
  const std::string cmd = std::string(CELLFLOW_CLI) + " --workspace " + ws.string() + " --threads 2 --log log.jsonl " +
                          args + " > " + out.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  std::ifstream in(out);
  std::stringstream ss;
  ss << in.rdbuf();
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, ss.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Slide maps and tokens cut into tiles, plus a checkpoint for D-dimensional tokens.
struct SlideFixture {
  fs::path root;
  static constexpr int kWidth = 700, kHeight = 600, kTile = 256, kOverlap = 64, kDim = 8;
  LabelRaster gt;

  SlideFixture() : root(fs::temp_directory_path() / "cellflow_cli_slide") {
    fs::remove_all(root);
    fs::create_directories(root / "maps");
    fs::create_directories(root / "tokens");
    const auto scene = cellflow::testing::random_disc_scene(kHeight, kWidth, 120, 6, 14, 17);
    gt = scene.labels;
    const ProbMaps maps = encode_targets(InstanceMap(gt));
    SlideGeometry geo{kWidth, kHeight, 0.25, kTile, kOverlap, 16};
    std::mt19937_64 rng(5);
    for (const Tile& t : plan_tiles(geo).tiles) {
      const ProbMaps local = crop_maps(maps, t.row, t.col, kTile);
      FloatRaster stacked(kTile, kTile, 3);
      for (int r = 0; r < kTile; ++r) {
        for (int c = 0; c < kTile; ++c) {
          stacked(r, c, 0) = local.np(r, c);
          stacked(r, c, 1) = local.horizontal(r, c);
          stacked(r, c, 2) = local.vertical(r, c);
        }
      }
      char name[48];
      std::snprintf(name, sizeof name, "r%06d_c%06d.cvtt", t.row, t.col);
      write_tensor(root / "maps" / name, to_tensor(stacked));
      const std::uint32_t n = 1 + (kTile / 16) * (kTile / 16);
      std::vector<float> tokens(n * kDim);
      for (auto& v : tokens) v = static_cast<float>(cellflow::testing::normal(rng));
      write_tensor(root / "tokens" / name, Tensor({n, kDim}, std::move(tokens)));
    }
    write_tensor(root / "gt.cvtt", to_tensor(gt));
    const auto set = cellflow::testing::gaussian_blobs(200, kDim, 2, 4.0, 3);
    TrainConfig cfg;
    cfg.max_epochs = 3;
    cfg.hidden = 16;
    save_checkpoint(root / "model.json", train(set, cfg).model);
  }
  ~SlideFixture() { fs::remove_all(root); }

  std::string geometry() const {
    return "--width " + std::to_string(kWidth) + " --height " + std::to_string(kHeight) + " --tile-edge " +
           std::to_string(kTile) + " --overlap " + std::to_string(kOverlap) + " --slide-id S1";
  }
};

}  // namespace

TEST_CASE("co2 and global flags") {
  const fs::path ws = fs::temp_directory_path();
  auto r = run(ws, "co2 --wh 680");
  CHECK(r.code == 0);
  CHECK(r.output == "0.29 kg CO2 eq.\n");
  CHECK(run(ws, "co2 --wh 3170").output == "1.37 kg CO2 eq.\n");
  CHECK(run(ws, "co2 --watts 3600 --seconds 680").output == "0.29 kg CO2 eq.\n");
  r = run(ws, "--version");
  CHECK(r.code == 0);
  CHECK(nlohmann::json::parse(r.output)["version"] == "0.1.0");
  CHECK(run(ws, "co2 --wh -5").code == 1);
  CHECK(run(ws, "co2").code == 1);
  CHECK(run(ws, "no-such-command").code == 1);
  CHECK(run(ws, "postprocess --maps missing.cvtt --out x.cvtt").code == 2);
  CHECK(run(ws, "postprocess --help").code == 0);
}

TEST_CASE("step-by-step commands match the one-shot predict byte for byte") {
  SlideFixture f;
  const fs::path& ws = f.root;
  REQUIRE(run(ws, "postprocess --maps maps --out inst").code == 0);
  REQUIRE(run(ws, "merge --tiles inst --out cells.jsonl --plan-out plan.json " + f.geometry()).code == 0);
  REQUIRE(run(ws, "embed --cells cells.jsonl --tokens tokens --tile-edge 256 --out-matrix emb.cvtt --out-index emb.jsonl").code == 0);
  auto r = run(ws, "predict --checkpoint model.json --cells cells.jsonl --embeddings emb.cvtt --index emb.jsonl --out composed.geojson");
  REQUIRE(r.code == 0);
  r = run(ws, "predict --checkpoint model.json --maps maps --tokens tokens --out oneshot.geojson " + f.geometry());
  REQUIRE(r.code == 0);
  const std::string composed = slurp(ws / "composed.geojson");
  CHECK(!composed.empty());
  CHECK(composed == slurp(ws / "oneshot.geojson"));
  const auto doc = nlohmann::json::parse(composed);
  // Tiled detections match the ground-truth discs.
  CHECK(doc["features"].size() == InstanceMap(f.gt).count());

  // Re-running gives identical outputs.
  const std::string cells = slurp(ws / "cells.jsonl");
  const std::string emb = slurp(ws / "emb.cvtt");
  REQUIRE(run(ws, "postprocess --maps maps --out inst").code == 0);
  REQUIRE(run(ws, "merge --tiles inst --out cells.jsonl " + f.geometry()).code == 0);
  REQUIRE(run(ws, "embed --cells cells.jsonl --tokens tokens --tile-edge 256 --out-matrix emb.cvtt --out-index emb.jsonl").code == 0);
  CHECK(slurp(ws / "cells.jsonl") == cells);
  CHECK(slurp(ws / "emb.cvtt") == emb);

  // The log carries stage timings that co2 can consume.
  CHECK(slurp(ws / "log.jsonl").find("\"stage\":\"merge\"") != std::string::npos);
  CHECK(run(ws, "co2 --watts 100 --log-file log.jsonl").code == 0);

  // Mismatched geometry is a validation error.
  CHECK(run(ws, "merge --tiles inst --out x.jsonl --width 700 --height 600 --tile-edge 100 --overlap 64 --slide-id S1").code == 1);
}

TEST_CASE("evaluate, resample, pyramid, genlabels and subsample") {
  SlideFixture f;
  const fs::path& ws = f.root;
  std::ofstream(ws / "suite.json") << R"({"classes": [0], "images": [{"pred": "gt.cvtt", "gt": "gt.cvtt"}]})";
  auto r = run(ws, "evaluate --suite suite.json --out-json metrics.json --out-csv metrics.csv");
  REQUIRE(r.code == 0);
  const auto metrics = nlohmann::json::parse(slurp(ws / "metrics.json"));
  CHECK(metrics["segmentation"]["mpq"] == 1.0);
  CHECK(metrics["segmentation"]["bpq"] == 1.0);
  CHECK(metrics["detection"]["m_f1"] == 1.0);
  CHECK(r.output.find("mPQ+") != std::string::npos);

  REQUIRE(run(ws, "resample --in gt.cvtt --scale 0.5 --out half.cvtt").code == 0);
  CHECK(read_tensor(ws / "half.cvtt").dims() == std::vector<std::uint32_t>{300, 350});

  ByteRaster rgb(300, 520, 3, std::uint8_t{0});
  for (int r0 = 0; r0 < 300; ++r0) {
    for (int c = 0; c < 520; ++c) rgb(r0, c, 0) = static_cast<std::uint8_t>(c % 256);
  }
  write_tensor(ws / "rgb.cvtt", to_tensor(rgb));
  REQUIRE(run(ws, "pyramid --image rgb.cvtt --out pyr --tile 256").code == 0);
  CHECK(fs::exists(ws / "pyr/0/2/1.jpg"));
  CHECK(fs::exists(ws / "pyr/1/0/0.jpg"));
  CHECK(nlohmann::json::parse(slurp(ws / "pyr/pyramid.json"))["levels"] == 3);

  REQUIRE(run(ws, "merge --tiles maps --out cells.jsonl " + f.geometry()).code != 0);  // maps are not instance maps
  REQUIRE(run(ws, "postprocess --maps maps --out inst").code == 0);
  REQUIRE(run(ws, "merge --tiles inst --out cells.jsonl " + f.geometry()).code == 0);
  ByteRaster mask(600, 700, 1, std::uint8_t{0});
  for (int r0 = 0; r0 < 600; ++r0) {
    for (int c = 0; c < 350; ++c) mask(r0, c) = 1;
  }
  write_tensor(ws / "if.cvtt", to_tensor(mask));
  REQUIRE(run(ws, "genlabels --cells cells.jsonl --if-mask if.cvtt --antibody pan-CK --out labelled.jsonl").code == 0);
  const auto labelled = read_cells(ws / "labelled.jsonl");
  REQUIRE(!labelled.empty());
  for (const auto& c : labelled) {
    if (c.centroid.col < 330) CHECK(c.class_label == 1);
    if (c.centroid.col > 370) CHECK(c.class_label == 0);
  }
  REQUIRE(run(ws, "--seed 4 subsample --cells labelled.jsonl --fraction 0.5 --out half.jsonl").code == 0);
  const auto half = read_cells(ws / "half.jsonl");
  CHECK(half.size() < labelled.size());
  REQUIRE(run(ws, "--seed 4 subsample --cells labelled.jsonl --fraction 0.5 --out half2.jsonl").code == 0);
  CHECK(slurp(ws / "half.jsonl") == slurp(ws / "half2.jsonl"));
  REQUIRE(run(ws, "subsample --cells labelled.jsonl --ratio 1 --out ratio.jsonl").code == 0);
  CHECK(run(ws, "subsample --cells labelled.jsonl --fraction 2 --out bad.jsonl").code == 1);
}

TEST_CASE("train and tune on a workspace") {
  cellflow::testing::WorkspaceFixture w("cli_train", 200);
  const fs::path ws = w.root;
  auto r = run(ws, "--seed 3 train --manifest " + w.manifest.filename().string() + " --out ckpt/model.json --history ckpt/h.csv");
  INFO(r.output);
  REQUIRE(r.code == 0);
  const auto report = nlohmann::json::parse(r.output);
  CHECK(report["val_macro_f1"].get<double>() >= 0.95);
  CHECK(fs::exists(ws / "ckpt/h.csv"));

  std::ofstream(ws / "base.json") << R"({"max_epochs": 2})";
  r = run(ws, "--seed 9 tune --manifest " + w.manifest.filename().string() + " --runs 5 --config base.json --out tune.json");
  REQUIRE(r.code == 0);
  const std::string first = slurp(ws / "tune.json");
  CHECK(nlohmann::json::parse(first)["leaderboard"].size() == 5);
  const std::string log = slurp(ws / "log.jsonl");
  CHECK(log.find("\"embedding_extractions\":1") != std::string::npos);
  REQUIRE(run(ws, "--seed 9 tune --manifest " + w.manifest.filename().string() + " --runs 5 --config base.json --out tune2.json").code == 0);
  CHECK(slurp(ws / "tune2.json") == first);

  std::ofstream(ws / "bad.json") << R"({"hidden": -1})";
  CHECK(run(ws, "train --manifest " + w.manifest.filename().string() + " --config bad.json --out x.json").code == 1);
}
