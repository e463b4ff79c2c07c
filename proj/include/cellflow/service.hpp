#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "cellflow/cells.hpp"
#include "cellflow/classifier.hpp"
#include "cellflow/datagen.hpp"

namespace cellflow {

struct SlideEntry {
  std::string id;
  int width = 0;
  int height = 0;
  std::string pyramid;          // directory holding {level}/{x}/{y}.jpg
  std::string cells;            // JSON-lines cell store
  std::string embeddings;       // N x D CVTT
  std::string embedding_index;  // JSON-lines {row, cell_id}
  std::string split;            // "train", "val" or empty
};

/// workspace.json: class universe, slides and where the service keeps its state. Paths are
/// relative to the workspace root.
struct WorkspaceManifest {
  std::vector<std::string> class_names;
  std::string encoder;
  std::string events = "events.jsonl";
  std::string snapshot = "labels_snapshot.json";
  std::string checkpoints = "checkpoints";
  std::vector<SlideEntry> slides;
};

WorkspaceManifest load_manifest(const std::filesystem::path& file);
nlohmann::json to_json(const WorkspaceManifest& m);

struct AnnotationEvent {
  std::uint64_t event_id = 0;
  std::string slide_id;
  std::string cell_id;
  std::optional<int> old_label;
  int new_label = 0;
  std::string actor;
  std::string timestamp;  // UTC ISO-8601
};

nlohmann::json to_json(const AnnotationEvent& e);
AnnotationEvent event_from_json(const nlohmann::json& j);
std::vector<AnnotationEvent> read_events(const std::filesystem::path& path);

using CellKey = std::pair<std::string, std::string>;  // (slide_id, cell_id)
using LabelMap = std::map<CellKey, int>;

/// Applies events in order on top of `base`.
LabelMap replay(LabelMap base, const std::vector<AnnotationEvent>& events);

std::string utc_timestamp();

/// Labels from the manifest's cell stores with its event log (if any) replayed.
LabelMap workspace_labels(const std::filesystem::path& manifest_file);

/// Training/validation set for the labelled cells of every slide that has a split. Paths in
/// `manifest` are relative to `root`.
LabeledCellSet labeled_set(const std::filesystem::path& root, const WorkspaceManifest& manifest, const LabelMap& labels,
                           LabeledSetSummary* summary = nullptr);

struct HttpRequest {
  std::string method;
  std::string path;  // already percent-decoded
  std::map<std::string, std::string> query;
  std::string body;
  std::map<std::string, std::string> headers;
};

struct HttpResponse {
  int status = 200;
  std::string body;
  std::string content_type = "application/json";
  std::map<std::string, std::string> headers;
};

struct ServiceOptions {
  std::function<std::string()> clock = utc_timestamp;
};

/// Workspace-backed labelling service. Reads work on immutable label snapshots; writes are
/// serialised and each effective write publishes a new snapshot.
class Service {
 public:
  explicit Service(const std::filesystem::path& manifest_file, ServiceOptions options = {});
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  HttpResponse handle(const HttpRequest& request);

  std::uint64_t version() const;
  /// Base labels with every override applied.
  LabelMap current_labels() const;
  /// Base labels from the cell stores with the on-disk event log replayed.
  LabelMap replayed_labels() const;
  const WorkspaceManifest& manifest() const noexcept { return manifest_; }

  /// Blocks until no training job is queued or running.
  void wait_for_jobs();
  /// Writes the current label state to the manifest's snapshot path.
  void write_snapshot() const;

 private:
  struct SlideData;
  struct Snapshot {
    std::uint64_t version = 0;
    LabelMap overrides;
  };
  struct Job {
    std::uint64_t id = 0;
    std::string state = "queued";
    TrainConfig config;
    nlohmann::json result;
  };

  std::shared_ptr<const Snapshot> snapshot() const;
  HttpResponse list_slides() const;
  HttpResponse get_tile(const SlideData& slide, const std::vector<std::string>& parts) const;
  HttpResponse get_cells(const SlideData& slide, const HttpRequest& request) const;
  HttpResponse post_label(const SlideData& slide, const std::string& cell_id, const std::string& body);
  HttpResponse post_train(const std::string& body);
  HttpResponse get_train(const std::string& id) const;
  void run_job(std::uint64_t job_id);
  const SlideData* find_slide(const std::string& id) const;

  std::filesystem::path root_;
  WorkspaceManifest manifest_;
  ServiceOptions options_;
  std::vector<std::unique_ptr<SlideData>> slides_;
  LabelMap base_;

  mutable std::mutex snapshot_mutex_;
  std::shared_ptr<const Snapshot> snapshot_;
  std::mutex write_mutex_;

  mutable std::mutex job_mutex_;
  std::condition_variable job_cv_;
  std::map<std::uint64_t, Job> jobs_;
  std::uint64_t next_job_ = 1;
  bool job_active_ = false;
  std::thread worker_;
};

/// Serves `service` over HTTP until stop() is called from another thread or a signal handler.
class HttpServer {
 public:
  explicit HttpServer(Service& service);
  ~HttpServer();
  /// Binds and blocks. Returns false when the address cannot be bound.
  bool listen(const std::string& host, int port);
  /// Binds to an ephemeral port and returns it; serve with listen_after_bind().
  int bind_any_port(const std::string& host);
  bool listen_after_bind();
  void stop();
  void wait_until_ready() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// "host:port" from CELLFLOW_BIND, defaulting to 127.0.0.1:8080.
std::pair<std::string, int> bind_address_from_env();

}  // namespace cellflow
