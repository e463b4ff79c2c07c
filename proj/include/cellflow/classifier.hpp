#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace cellflow {

// ---------------------------------------------------------------------------------------------
// Randomness shared by training, tuning and sampling. Everything draws from mt19937_64 through
// these helpers so results do not depend on the standard library's distributions.

using Rng = std::mt19937_64;

inline double unit_uniform(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

/// Uniform index in [0, n).
inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  return static_cast<std::size_t>(unit_uniform(rng) * static_cast<double>(n));
}

std::uint64_t splitmix64(std::uint64_t x);

void shuffle_indices(std::vector<std::size_t>& idx, Rng& rng);

// ---------------------------------------------------------------------------------------------
// One-hidden-layer network

/// Flat parameter vector laid out as W1 (hidden x D), b1, W2 (C x hidden), b2.
template <class Real>
struct Mlp {
  int dim = 0;
  int hidden = 0;
  int classes = 0;
  double dropout = 0.1;
  std::vector<Real> theta;

  Mlp() = default;
  Mlp(int dim, int hidden, int classes, double dropout = 0.1);

  std::size_t w1_offset() const noexcept { return 0; }
  std::size_t b1_offset() const noexcept { return static_cast<std::size_t>(hidden) * dim; }
  std::size_t w2_offset() const noexcept { return b1_offset() + hidden; }
  std::size_t b2_offset() const noexcept { return w2_offset() + static_cast<std::size_t>(classes) * hidden; }
  std::size_t size() const noexcept { return b2_offset() + classes; }

  Real* w1() noexcept { return theta.data(); }
  Real* b1() noexcept { return theta.data() + b1_offset(); }
  Real* w2() noexcept { return theta.data() + w2_offset(); }
  Real* b2() noexcept { return theta.data() + b2_offset(); }
  const Real* w1() const noexcept { return theta.data(); }
  const Real* b1() const noexcept { return theta.data() + b1_offset(); }
  const Real* w2() const noexcept { return theta.data() + w2_offset(); }
  const Real* b2() const noexcept { return theta.data() + b2_offset(); }
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases.
template <class Real>
Mlp<Real> init_mlp(int dim, int hidden, int classes, double dropout, Rng& rng);

template <class Real>
struct ForwardCache {
  std::size_t batch = 0;
  std::vector<Real> input;    // B x D
  std::vector<Real> hidden;   // B x H, after ReLU and dropout
  std::vector<Real> keep;     // B x H dropout multipliers (0 or 1/(1-p)); empty in eval mode
  std::vector<Real> logits;   // B x C
};

/// Eval mode when `rng` is null. In train mode a fresh dropout mask is drawn.
template <class Real>
ForwardCache<Real> forward(const Mlp<Real>& net, std::span<const Real> x, std::size_t batch, Rng* rng);

/// Train-mode forward with a caller-supplied dropout multiplier mask (B x H).
template <class Real>
ForwardCache<Real> forward_masked(const Mlp<Real>& net, std::span<const Real> x, std::size_t batch,
                                  std::span<const Real> keep);

/// Row-wise softmax of B x C logits.
template <class Real>
std::vector<Real> softmax(std::span<const Real> logits, std::size_t classes);

/// Mean cross-entropy over the batch.
template <class Real>
double cross_entropy(std::span<const Real> logits, std::size_t classes, std::span<const int> labels);

/// Gradient of the mean cross-entropy with respect to theta.
template <class Real>
std::vector<Real> backward(const Mlp<Real>& net, const ForwardCache<Real>& cache, std::span<const int> labels);

// ---------------------------------------------------------------------------------------------
// Optimisation

enum class Schedule { Exponential, HalveAtMidpoint };

std::string to_string(Schedule s);
Schedule schedule_from_string(const std::string& s);

struct TrainConfig {
  double lr = 1e-3;
  double weight_decay = 1e-4;
  double beta1 = 0.85;
  double beta2 = 0.9;
  double eps = 1e-8;
  int batch_size = 256;
  int max_epochs = 50;
  int patience = 10;
  Schedule schedule = Schedule::Exponential;
  double gamma = 0.95;
  std::uint64_t seed = 0;
  int hidden = 128;
  double dropout = 0.1;

  /// Throws InvalidConfig.
  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
/// Missing keys keep their defaults; unknown keys are rejected with InvalidConfig.
TrainConfig train_config_from_json(const nlohmann::json& j);

/// Learning rate used during `epoch` (0-based).
double lr_at(const TrainConfig& c, int epoch);

template <class Real>
struct AdamState {
  std::vector<Real> m, v;
  long long t = 0;
};

/// theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta). Advances state.t.
template <class Real>
void adamw_step(std::vector<Real>& theta, std::span<const Real> grad, AdamState<Real>& state, const TrainConfig& c,
                double lr);

// ---------------------------------------------------------------------------------------------
// Data, training and evaluation

struct Dataset {
  std::size_t dim = 0;
  std::vector<float> x;  // N x dim
  std::vector<int> y;
  std::vector<std::string> ids;  // optional, parallel to y

  std::size_t size() const noexcept { return y.size(); }
  std::span<const float> row(std::size_t i) const { return {x.data() + i * dim, dim}; }
  void push(std::span<const float> v, int label, std::string id = {});
};

Dataset subset(const Dataset& d, std::span<const std::size_t> rows);

struct LabeledCellSet {
  std::vector<std::string> class_names;
  std::string encoder;
  Dataset train;
  Dataset val;

  std::size_t classes() const noexcept { return class_names.size(); }
};

/// Macro one-vs-rest AUROC over N x C scores with average ranks for ties. Classes without both
/// positives and negatives are skipped; throws NoComputableClass when none remain.
double auroc(std::span<const double> scores, std::size_t classes, std::span<const int> labels);

/// Binary rank-statistic AUROC.
double binary_auroc(std::span<const double> scores, std::span<const bool> positive);

/// Mean F1 over classes that occur in labels or predictions.
double macro_f1(std::span<const int> predicted, std::span<const int> labels, std::size_t classes);

struct Classifier {
  Mlp<float> net;
  std::vector<std::string> class_names;
  std::string encoder;
};

/// Eval-mode class probabilities, N x C.
std::vector<double> predict_proba(const Classifier& model, const Dataset& data);
std::vector<double> predict_proba(const Classifier& model, std::span<const float> x, std::size_t n);
std::vector<int> predict_labels(std::span<const double> probs, std::size_t classes);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_auroc = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  Classifier model;  // weights from the best validation epoch
  std::vector<EpochRecord> history;
  int best_epoch = 0;
  double best_auroc = 0.0;
  double val_macro_f1 = 0.0;
};

/// Throws EmptySplit, SingleClassVal or DimMismatch.
TrainResult train(const LabeledCellSet& set, const TrainConfig& config);

void write_history_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& history);

/// Checkpoint: JSON header at `path` plus one CVTT file per weight tensor next to it.
void save_checkpoint(const std::filesystem::path& path, const Classifier& model);
Classifier load_checkpoint(const std::filesystem::path& path);

// ---------------------------------------------------------------------------------------------
// Hyperparameter search

/// Runs the loader at most once; later calls return the cached set.
class EmbeddingCache {
 public:
  explicit EmbeddingCache(std::function<LabeledCellSet()> loader) : loader_(std::move(loader)) {}
  const LabeledCellSet& get();
  int extraction_count() const noexcept { return extractions_; }

 private:
  std::function<LabeledCellSet()> loader_;
  std::optional<LabeledCellSet> cached_;
  int extractions_ = 0;
};

struct SearchSpace {
  std::vector<int> hidden{32, 64, 128, 256, 512, 1024};
  double lr_min = 1e-5, lr_max = 1e-2;
  double wd_min = 1e-6, wd_max = 1e-2;
  std::vector<Schedule> schedules{Schedule::Exponential, Schedule::HalveAtMidpoint};

  /// Throws EmptySearchSpace.
  void validate() const;
};

nlohmann::json to_json(const SearchSpace& s);
SearchSpace search_space_from_json(const nlohmann::json& j);

struct TuneRun {
  int run = 0;
  TrainConfig config;
  double val_auroc = 0.0;
  double val_macro_f1 = 0.0;
  int best_epoch = 0;
};

struct TuneResult {
  std::vector<TuneRun> leaderboard;  // best first
  TuneRun best;
};

/// Samples `n_runs` configurations from `space` on top of `base` and trains each. Ranked by AUROC,
/// then smaller hidden size, then run index.
TuneResult tune(EmbeddingCache& cache, const SearchSpace& space, int n_runs, std::uint64_t seed, const TrainConfig& base = {});

nlohmann::json to_json(const TuneResult& r);

// ---------------------------------------------------------------------------------------------
// Dataset sampling

struct RatioSample {
  std::vector<std::size_t> negatives;  // chosen indices into the negative pool, ascending
  bool clamped = false;                // fewer negatives than requested were available
};

/// min(ratio * n_pos, n_neg) negatives drawn without replacement.
RatioSample ratio_sample(std::size_t n_pos, std::size_t n_neg, std::size_t ratio, std::uint64_t seed);

/// Per class round(f * n_c) rows without replacement; returns ascending row indices.
/// Throws FractionOutOfRange unless 0 < f <= 1.
std::vector<std::size_t> stratified_fraction(std::span<const int> labels, double fraction, std::uint64_t seed);

}  // namespace cellflow
