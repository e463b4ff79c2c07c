#include "cellflow/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <set>

#include "cellflow/error.hpp"
#include "cellflow/tensor_io.hpp"

namespace cellflow {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

void shuffle_indices(std::vector<std::size_t>& idx, Rng& rng) {
  for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[uniform_index(rng, i)]);
}

// ---------------------------------------------------------------------------------------------

template <class Real>
Mlp<Real>::Mlp(int dim_, int hidden_, int classes_, double dropout_)
    : dim(dim_), hidden(hidden_), classes(classes_), dropout(dropout_) {
  if (dim < 1 || hidden < 1 || classes < 2) fail(ErrorCode::InvalidArgument, "network needs D >= 1, hidden >= 1 and C >= 2");
  theta.assign(size(), Real(0));
}

template <class Real>
Mlp<Real> init_mlp(int dim, int hidden, int classes, double dropout, Rng& rng) {
  Mlp<Real> net(dim, hidden, classes, dropout);
  auto fill = [&](Real* p, std::size_t n, int fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (std::size_t i = 0; i < n; ++i) p[i] = static_cast<Real>((2.0 * unit_uniform(rng) - 1.0) * bound);
  };
  fill(net.w1(), static_cast<std::size_t>(hidden) * dim, dim);
  fill(net.b1(), static_cast<std::size_t>(hidden), dim);
  fill(net.w2(), static_cast<std::size_t>(classes) * hidden, hidden);
  fill(net.b2(), static_cast<std::size_t>(classes), hidden);
  return net;
}

namespace {

template <class Real>
ForwardCache<Real> forward_impl(const Mlp<Real>& net, std::span<const Real> x, std::size_t batch, std::vector<Real> keep) {
  const std::size_t d = static_cast<std::size_t>(net.dim), h = static_cast<std::size_t>(net.hidden),
                    c = static_cast<std::size_t>(net.classes);
  if (x.size() != batch * d) fail(ErrorCode::DimMismatch, "input is not batch x D");
  if (net.theta.size() != net.size()) fail(ErrorCode::DimMismatch, "parameter vector has the wrong length");
  if (!keep.empty() && keep.size() != batch * h) fail(ErrorCode::DimMismatch, "dropout mask is not batch x hidden");
  ForwardCache<Real> out;
  out.batch = batch;
  out.input.assign(x.begin(), x.end());
  out.hidden.assign(batch * h, Real(0));
  out.logits.assign(batch * c, Real(0));
  for (std::size_t b = 0; b < batch; ++b) {
    const Real* xb = x.data() + b * d;
    Real* hb = out.hidden.data() + b * h;
    for (std::size_t j = 0; j < h; ++j) {
      const Real* w = net.w1() + j * d;
      Real s = net.b1()[j];
      for (std::size_t k = 0; k < d; ++k) s += w[k] * xb[k];
      s = s > Real(0) ? s : Real(0);
      if (!keep.empty()) s *= keep[b * h + j];
      hb[j] = s;
    }
    Real* lb = out.logits.data() + b * c;
    for (std::size_t k = 0; k < c; ++k) {
      const Real* w = net.w2() + k * h;
      Real s = net.b2()[k];
      for (std::size_t j = 0; j < h; ++j) s += w[j] * hb[j];
      lb[k] = s;
    }
  }
  out.keep = std::move(keep);
  return out;
}

}  // namespace

template <class Real>
ForwardCache<Real> forward(const Mlp<Real>& net, std::span<const Real> x, std::size_t batch, Rng* rng) {
  std::vector<Real> keep;
  if (rng != nullptr && net.dropout > 0.0) {
    keep.resize(batch * static_cast<std::size_t>(net.hidden));
    const Real scale = static_cast<Real>(1.0 / (1.0 - net.dropout));
    for (Real& k : keep) k = unit_uniform(*rng) < net.dropout ? Real(0) : scale;
  } else if (rng != nullptr) {
    keep.assign(batch * static_cast<std::size_t>(net.hidden), Real(1));
  }
  return forward_impl(net, x, batch, std::move(keep));
}

template <class Real>
ForwardCache<Real> forward_masked(const Mlp<Real>& net, std::span<const Real> x, std::size_t batch, std::span<const Real> keep) {
  return forward_impl(net, x, batch, std::vector<Real>(keep.begin(), keep.end()));
}

template <class Real>
std::vector<Real> softmax(std::span<const Real> logits, std::size_t classes) {
  std::vector<Real> p(logits.size());
  for (std::size_t b = 0; b * classes < logits.size(); ++b) {
    const Real* l = logits.data() + b * classes;
    const Real mx = *std::max_element(l, l + classes);
    Real sum = 0;
    for (std::size_t k = 0; k < classes; ++k) sum += (p[b * classes + k] = std::exp(l[k] - mx));
    for (std::size_t k = 0; k < classes; ++k) p[b * classes + k] /= sum;
  }
  return p;
}

template <class Real>
double cross_entropy(std::span<const Real> logits, std::size_t classes, std::span<const int> labels) {
  if (labels.size() * classes != logits.size()) fail(ErrorCode::DimMismatch, "labels do not match the logits");
  if (labels.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t b = 0; b < labels.size(); ++b) {
    const Real* l = logits.data() + b * classes;
    const double mx = static_cast<double>(*std::max_element(l, l + classes));
    double sum = 0.0;
    for (std::size_t k = 0; k < classes; ++k) sum += std::exp(static_cast<double>(l[k]) - mx);
    total += mx + std::log(sum) - static_cast<double>(l[labels[b]]);
  }
  return total / static_cast<double>(labels.size());
}

template <class Real>
std::vector<Real> backward(const Mlp<Real>& net, const ForwardCache<Real>& cache, std::span<const int> labels) {
  const std::size_t d = static_cast<std::size_t>(net.dim), h = static_cast<std::size_t>(net.hidden),
                    c = static_cast<std::size_t>(net.classes), batch = cache.batch;
  if (labels.size() != batch) fail(ErrorCode::DimMismatch, "labels do not match the cached batch");
  if (cache.hidden.size() != batch * h || cache.logits.size() != batch * c) {
    fail(ErrorCode::DimMismatch, "forward cache does not belong to this network");
  }
  std::vector<Real> grad(net.size(), Real(0));
  Real* gw1 = grad.data() + net.w1_offset();
  Real* gb1 = grad.data() + net.b1_offset();
  Real* gw2 = grad.data() + net.w2_offset();
  Real* gb2 = grad.data() + net.b2_offset();
  std::vector<Real> dlogits = softmax<Real>(cache.logits, c);
  const Real inv_b = Real(1) / static_cast<Real>(batch);
  std::vector<Real> dh(h);
  for (std::size_t b = 0; b < batch; ++b) {
    const int y = labels[b];
    if (y < 0 || static_cast<std::size_t>(y) >= c) fail(ErrorCode::InvalidArgument, "label out of range");
    Real* dl = dlogits.data() + b * c;
    dl[y] -= Real(1);
    for (std::size_t k = 0; k < c; ++k) dl[k] *= inv_b;
    const Real* hb = cache.hidden.data() + b * h;
    std::fill(dh.begin(), dh.end(), Real(0));
    for (std::size_t k = 0; k < c; ++k) {
      const Real g = dl[k];
      gb2[k] += g;
      Real* gw = gw2 + k * h;
      const Real* w = net.w2() + k * h;
      for (std::size_t j = 0; j < h; ++j) {
        gw[j] += g * hb[j];
        dh[j] += g * w[j];
      }
    }
    const Real* xb = cache.input.data() + b * d;
    for (std::size_t j = 0; j < h; ++j) {
      if (!(hb[j] > Real(0))) continue;  // ReLU off, or unit dropped
      const Real g = cache.keep.empty() ? dh[j] : dh[j] * cache.keep[b * h + j];
      gb1[j] += g;
      Real* gw = gw1 + j * d;
      for (std::size_t k = 0; k < d; ++k) gw[k] += g * xb[k];
    }
  }
  return grad;
}

// ---------------------------------------------------------------------------------------------

std::string to_string(Schedule s) { return s == Schedule::Exponential ? "exponential" : "halve"; }

Schedule schedule_from_string(const std::string& s) {
  if (s == "exponential" || s == "exp") return Schedule::Exponential;
  if (s == "halve" || s == "halve_at_midpoint") return Schedule::HalveAtMidpoint;
  fail(ErrorCode::InvalidConfig, "unknown schedule '" + s + "'");
}

void TrainConfig::validate() const {
  auto bad = [](const std::string& m) { fail(ErrorCode::InvalidConfig, m); };
  if (!std::isfinite(lr) || lr < 0.0) bad("lr must be a finite non-negative number");
  if (!std::isfinite(weight_decay) || weight_decay < 0.0) bad("weight_decay must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) bad("betas must lie in [0, 1)");
  if (!(eps > 0.0)) bad("eps must be positive");
  if (batch_size < 1) bad("batch_size must be >= 1");
  if (max_epochs < 1) bad("max_epochs must be >= 1");
  if (patience < 1) bad("patience must be >= 1");
  if (!(gamma > 0.0 && gamma < 1.0)) bad("gamma must lie in (0, 1)");
  if (hidden < 1) bad("hidden must be >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) bad("dropout must lie in [0, 1)");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"lr", c.lr},         {"weight_decay", c.weight_decay}, {"beta1", c.beta1},       {"beta2", c.beta2},
          {"eps", c.eps},       {"batch_size", c.batch_size},     {"max_epochs", c.max_epochs}, {"patience", c.patience},
          {"schedule", to_string(c.schedule)}, {"gamma", c.gamma}, {"seed", c.seed},        {"hidden", c.hidden},
          {"dropout", c.dropout}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) fail(ErrorCode::InvalidConfig, "training config must be a JSON object");
  TrainConfig c;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "lr") c.lr = v.get<double>();
      else if (key == "weight_decay") c.weight_decay = v.get<double>();
      else if (key == "beta1") c.beta1 = v.get<double>();
      else if (key == "beta2") c.beta2 = v.get<double>();
      else if (key == "eps") c.eps = v.get<double>();
      else if (key == "batch_size") c.batch_size = v.get<int>();
      else if (key == "max_epochs") c.max_epochs = v.get<int>();
      else if (key == "patience") c.patience = v.get<int>();
      else if (key == "schedule") c.schedule = schedule_from_string(v.get<std::string>());
      else if (key == "gamma") c.gamma = v.get<double>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "hidden") c.hidden = v.get<int>();
      else if (key == "dropout") c.dropout = v.get<double>();
      else fail(ErrorCode::InvalidConfig, "unknown config key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::InvalidConfig, e.what());
  }
  c.validate();
  return c;
}

double lr_at(const TrainConfig& c, int epoch) {
  if (c.schedule == Schedule::Exponential) return c.lr * std::pow(c.gamma, epoch);
  return epoch < c.max_epochs / 2 ? c.lr : c.lr / 2.0;
}

template <class Real>
void adamw_step(std::vector<Real>& theta, std::span<const Real> grad, AdamState<Real>& state, const TrainConfig& c, double lr) {
  if (grad.size() != theta.size()) fail(ErrorCode::DimMismatch, "gradient length differs from parameters");
  if (state.m.empty()) {
    state.m.assign(theta.size(), Real(0));
    state.v.assign(theta.size(), Real(0));
  }
  ++state.t;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double g = grad[i];
    const double m = c.beta1 * state.m[i] + (1.0 - c.beta1) * g;
    const double v = c.beta2 * state.v[i] + (1.0 - c.beta2) * g * g;
    state.m[i] = static_cast<Real>(m);
    state.v[i] = static_cast<Real>(v);
    const double th = theta[i];
    theta[i] = static_cast<Real>(th - lr * ((m / bc1) / (std::sqrt(v / bc2) + c.eps) + c.weight_decay * th));
  }
}

// ---------------------------------------------------------------------------------------------

void Dataset::push(std::span<const float> v, int label, std::string id) {
  if (y.empty() && dim == 0) dim = v.size();
  if (v.size() != dim) fail(ErrorCode::DimMismatch, "row has " + std::to_string(v.size()) + " values, expected " + std::to_string(dim));
  x.insert(x.end(), v.begin(), v.end());
  y.push_back(label);
  if (!id.empty() || !ids.empty()) {
    ids.resize(y.size() - 1);
    ids.push_back(std::move(id));
  }
}

Dataset subset(const Dataset& d, std::span<const std::size_t> rows) {
  Dataset out;
  out.dim = d.dim;
  for (std::size_t r : rows) {
    if (r >= d.size()) fail(ErrorCode::InvalidArgument, "row index out of range");
    out.push(d.row(r), d.y[r], d.ids.empty() ? std::string{} : d.ids[r]);
  }
  return out;
}

double binary_auroc(std::span<const double> scores, std::span<const bool> positive) {
  const std::size_t n = scores.size();
  if (positive.size() != n) fail(ErrorCode::DimMismatch, "scores and labels differ in length");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k) {
      if (positive[order[k]]) {
        pos_rank_sum += avg_rank;
        ++n_pos;
      }
    }
    i = j;
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) fail(ErrorCode::NoComputableClass, "AUROC needs positives and negatives");
  const double np = static_cast<double>(n_pos);
  return (pos_rank_sum - np * (np + 1.0) / 2.0) / (np * static_cast<double>(n_neg));
}

double auroc(std::span<const double> scores, std::size_t classes, std::span<const int> labels) {
  if (classes == 0 || scores.size() != labels.size() * classes) fail(ErrorCode::DimMismatch, "scores are not N x C");
  std::vector<double> col(labels.size());
  const auto pos = std::make_unique<bool[]>(labels.size());
  double sum = 0.0;
  std::size_t used = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    std::size_t n_pos = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      col[i] = scores[i * classes + c];
      pos[i] = labels[i] == static_cast<int>(c);
      n_pos += pos[i];
    }
    if (n_pos == 0 || n_pos == labels.size()) continue;
    sum += binary_auroc(col, std::span<const bool>(pos.get(), labels.size()));
    ++used;
  }
  if (used == 0) fail(ErrorCode::NoComputableClass, "no class has both positives and negatives");
  return sum / static_cast<double>(used);
}

double macro_f1(std::span<const int> predicted, std::span<const int> labels, std::size_t classes) {
  if (predicted.size() != labels.size()) fail(ErrorCode::DimMismatch, "prediction and label counts differ");
  std::vector<std::size_t> tp(classes, 0), fp(classes, 0), fn(classes, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto p = static_cast<std::size_t>(predicted[i]), y = static_cast<std::size_t>(labels[i]);
    if (p >= classes || y >= classes) fail(ErrorCode::InvalidArgument, "class index out of range");
    if (p == y) {
      ++tp[y];
    } else {
      ++fp[p];
      ++fn[y];
    }
  }
  double sum = 0.0;
  std::size_t used = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    if (tp[c] + fp[c] + fn[c] == 0) continue;
    sum += 2.0 * static_cast<double>(tp[c]) / static_cast<double>(2 * tp[c] + fp[c] + fn[c]);
    ++used;
  }
  return used == 0 ? 0.0 : sum / static_cast<double>(used);
}

std::vector<double> predict_proba(const Classifier& model, std::span<const float> x, std::size_t n) {
  const std::size_t d = static_cast<std::size_t>(model.net.dim), c = static_cast<std::size_t>(model.net.classes);
  if (x.size() != n * d) fail(ErrorCode::DimMismatch, "embeddings do not have the model's dimension " + std::to_string(d));
  constexpr std::size_t kChunk = 4096;
  std::vector<double> out;
  out.reserve(n * c);
  for (std::size_t start = 0; start < n; start += kChunk) {
    const std::size_t b = std::min(kChunk, n - start);
    const auto cache = forward<float>(model.net, x.subspan(start * d, b * d), b, nullptr);
    const auto p = softmax<float>(cache.logits, c);
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

std::vector<double> predict_proba(const Classifier& model, const Dataset& data) {
  return predict_proba(model, data.x, data.size());
}

std::vector<int> predict_labels(std::span<const double> probs, std::size_t classes) {
  std::vector<int> out(probs.size() / classes);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto row = probs.subspan(i * classes, classes);
    out[i] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

TrainResult train(const LabeledCellSet& set, const TrainConfig& config) {
  config.validate();
  const Dataset& tr = set.train;
  const Dataset& va = set.val;
  if (tr.size() == 0) fail(ErrorCode::EmptySplit, "training split is empty");
  if (va.size() == 0) fail(ErrorCode::EmptySplit, "validation split is empty");
  if (tr.dim != va.dim || tr.dim == 0) fail(ErrorCode::DimMismatch, "train and val embeddings differ in dimension");
  const std::size_t classes = set.classes();
  if (classes < 2) fail(ErrorCode::InvalidArgument, "need at least two classes");
  for (const Dataset* d : {&tr, &va}) {
    for (int y : d->y) {
      if (y < 0 || static_cast<std::size_t>(y) >= classes) fail(ErrorCode::InvalidArgument, "label outside the class list");
    }
  }
  if (std::set<int>(va.y.begin(), va.y.end()).size() < 2) {
    fail(ErrorCode::SingleClassVal, "validation split holds a single class; AUROC is undefined");
  }

  Rng rng(config.seed);
  TrainResult result;
  result.model.class_names = set.class_names;
  result.model.encoder = set.encoder;
  result.model.net = init_mlp<float>(static_cast<int>(tr.dim), config.hidden, static_cast<int>(classes), config.dropout, rng);
  Mlp<float>& net = result.model.net;
  std::vector<float> best_theta = net.theta;
  result.best_auroc = -std::numeric_limits<double>::infinity();
  AdamState<float> state;
  std::vector<std::size_t> order(tr.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<float> xb;
  std::vector<int> yb;
  int stale = 0;
  for (int epoch = 0; epoch < config.max_epochs; ++epoch) {
    const double lr = lr_at(config, epoch);
    shuffle_indices(order, rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      xb.clear();
      yb.clear();
      for (std::size_t i = start; i < end; ++i) {
        const auto row = tr.row(order[i]);
        xb.insert(xb.end(), row.begin(), row.end());
        yb.push_back(tr.y[order[i]]);
      }
      const auto cache = forward<float>(net, xb, yb.size(), &rng);
      loss_sum += cross_entropy<float>(cache.logits, classes, yb) * static_cast<double>(yb.size());
      const auto grad = backward(net, cache, yb);
      adamw_step<float>(net.theta, grad, state, config, lr);
    }
    const auto probs = predict_proba(result.model, va);
    const double auc = auroc(probs, classes, va.y);
    result.history.push_back({epoch, loss_sum / static_cast<double>(tr.size()), auc, lr});
    if (auc > result.best_auroc) {
      result.best_auroc = auc;
      result.best_epoch = epoch;
      best_theta = net.theta;
      stale = 0;
    } else if (++stale >= config.patience) {
      break;
    }
  }
  net.theta = std::move(best_theta);
  result.val_macro_f1 = macro_f1(predict_labels(predict_proba(result.model, va), classes), va.y, classes);
  return result;
}

void write_history_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& history) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::Io, "cannot write " + path.string());
  out << "epoch,train_loss,val_auroc,lr\n";
  out.precision(10);
  for (const auto& h : history) out << h.epoch << ',' << h.train_loss << ',' << h.val_auroc << ',' << h.lr << '\n';
}

namespace {

std::filesystem::path sibling(const std::filesystem::path& header, const std::string& tensor) {
  return header.parent_path() / (header.stem().string() + "." + tensor + ".cvtt");
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Classifier& model) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto& n = model.net;
  const auto u = [](int v) { return static_cast<std::uint32_t>(v); };
  struct Part {
    const char* name;
    std::vector<std::uint32_t> dims;
    std::size_t offset, count;
  };
  const std::vector<Part> parts{
      {"W1", {u(n.hidden), u(n.dim)}, n.w1_offset(), static_cast<std::size_t>(n.hidden) * n.dim},
      {"b1", {u(n.hidden)}, n.b1_offset(), static_cast<std::size_t>(n.hidden)},
      {"W2", {u(n.classes), u(n.hidden)}, n.w2_offset(), static_cast<std::size_t>(n.classes) * n.hidden},
      {"b2", {u(n.classes)}, n.b2_offset(), static_cast<std::size_t>(n.classes)},
  };
  nlohmann::json tensors;
  for (const auto& p : parts) {
    const auto file = sibling(path, p.name);
    const auto first = n.theta.begin() + static_cast<std::ptrdiff_t>(p.offset);
    write_tensor(file, Tensor(p.dims, std::vector<float>(first, first + static_cast<std::ptrdiff_t>(p.count))));
    tensors[p.name] = file.filename().string();
  }
  nlohmann::json header{{"D", n.dim},           {"hidden", n.hidden},    {"C", n.classes}, {"dropout", n.dropout},
                        {"class_names", model.class_names}, {"encoder", model.encoder}, {"tensors", tensors}};
  std::ofstream out(path);
  if (!out) fail(ErrorCode::Io, "cannot write " + path.string());
  out << header.dump(2) << '\n';
}

Classifier load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::Io, "cannot open " + path.string());
  Classifier model;
  try {
    const auto header = nlohmann::json::parse(in);
    model.net = Mlp<float>(header.at("D").get<int>(), header.at("hidden").get<int>(), header.at("C").get<int>(),
                           header.value("dropout", 0.1));
    model.class_names = header.at("class_names").get<std::vector<std::string>>();
    model.encoder = header.value("encoder", std::string{});
    const std::pair<const char*, std::size_t> parts[] = {{"W1", model.net.w1_offset()},
                                                         {"b1", model.net.b1_offset()},
                                                         {"W2", model.net.w2_offset()},
                                                         {"b2", model.net.b2_offset()}};
    const std::size_t ends[] = {model.net.b1_offset(), model.net.w2_offset(), model.net.b2_offset(), model.net.size()};
    for (std::size_t i = 0; i < 4; ++i) {
      const auto t = read_tensor(path.parent_path() / header.at("tensors").at(parts[i].first).get<std::string>());
      if (t.dtype() != DType::Float32 || t.element_count() != ends[i] - parts[i].second) {
        fail(ErrorCode::ShapeMismatch, std::string("checkpoint tensor ") + parts[i].first + " has the wrong shape");
      }
      const auto v = t.values<float>();
      std::copy(v.begin(), v.end(), model.net.theta.begin() + static_cast<std::ptrdiff_t>(parts[i].second));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::InvalidConfig, path.string() + ": " + e.what());
  }
  if (model.class_names.size() != static_cast<std::size_t>(model.net.classes)) {
    fail(ErrorCode::CountMismatch, "checkpoint class_names do not match C");
  }
  return model;
}

// ---------------------------------------------------------------------------------------------

const LabeledCellSet& EmbeddingCache::get() {
  if (!cached_) {
    cached_ = loader_();
    ++extractions_;
  }
  return *cached_;
}

void SearchSpace::validate() const {
  if (hidden.empty() || schedules.empty()) fail(ErrorCode::EmptySearchSpace, "search space has no hidden sizes or schedules");
  for (int h : hidden) {
    if (h < 1) fail(ErrorCode::EmptySearchSpace, "hidden sizes must be >= 1");
  }
  if (!(lr_min > 0.0 && lr_min <= lr_max) || !(wd_min > 0.0 && wd_min <= wd_max)) {
    fail(ErrorCode::EmptySearchSpace, "log-uniform ranges need 0 < min <= max");
  }
}

nlohmann::json to_json(const SearchSpace& s) {
  nlohmann::json sched = nlohmann::json::array();
  for (auto v : s.schedules) sched.push_back(to_string(v));
  return {{"hidden", s.hidden}, {"lr", {s.lr_min, s.lr_max}}, {"weight_decay", {s.wd_min, s.wd_max}}, {"schedules", sched}};
}

SearchSpace search_space_from_json(const nlohmann::json& j) {
  SearchSpace s;
  try {
    if (j.contains("hidden")) s.hidden = j.at("hidden").get<std::vector<int>>();
    if (j.contains("lr")) {
      s.lr_min = j.at("lr").at(0).get<double>();
      s.lr_max = j.at("lr").at(1).get<double>();
    }
    if (j.contains("weight_decay")) {
      s.wd_min = j.at("weight_decay").at(0).get<double>();
      s.wd_max = j.at("weight_decay").at(1).get<double>();
    }
    if (j.contains("schedules")) {
      s.schedules.clear();
      for (const auto& v : j.at("schedules")) s.schedules.push_back(schedule_from_string(v.get<std::string>()));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::InvalidConfig, e.what());
  }
  s.validate();
  return s;
}

namespace {

double log_uniform(Rng& rng, double lo, double hi) {
  return std::exp(std::log(lo) + unit_uniform(rng) * (std::log(hi) - std::log(lo)));
}

}  // namespace

TuneResult tune(EmbeddingCache& cache, const SearchSpace& space, int n_runs, std::uint64_t seed, const TrainConfig& base) {
  space.validate();
  if (n_runs < 1) fail(ErrorCode::InvalidArgument, "n_runs must be >= 1");
  const LabeledCellSet& set = cache.get();
  TuneResult result;
  for (int i = 0; i < n_runs; ++i) {
    Rng rng(splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(i))));
    TuneRun run;
    run.run = i;
    run.config = base;
    run.config.hidden = space.hidden[uniform_index(rng, space.hidden.size())];
    run.config.lr = log_uniform(rng, space.lr_min, space.lr_max);
    run.config.weight_decay = log_uniform(rng, space.wd_min, space.wd_max);
    run.config.schedule = space.schedules[uniform_index(rng, space.schedules.size())];
    run.config.seed = rng();
    const TrainResult tr = train(set, run.config);
    run.val_auroc = tr.best_auroc;
    run.val_macro_f1 = tr.val_macro_f1;
    run.best_epoch = tr.best_epoch;
    result.leaderboard.push_back(run);
  }
  std::sort(result.leaderboard.begin(), result.leaderboard.end(), [](const TuneRun& a, const TuneRun& b) {
    if (a.val_auroc != b.val_auroc) return a.val_auroc > b.val_auroc;
    if (a.config.hidden != b.config.hidden) return a.config.hidden < b.config.hidden;
    return a.run < b.run;
  });
  result.best = result.leaderboard.front();
  return result;
}

nlohmann::json to_json(const TuneResult& r) {
  nlohmann::json board = nlohmann::json::array();
  for (const auto& run : r.leaderboard) {
    board.push_back({{"run", run.run},
                     {"config", to_json(run.config)},
                     {"val_auroc", run.val_auroc},
                     {"val_macro_f1", run.val_macro_f1},
                     {"best_epoch", run.best_epoch}});
  }
  return {{"best", board.empty() ? nlohmann::json() : board.front()}, {"leaderboard", board}};
}

// ---------------------------------------------------------------------------------------------

namespace {

std::vector<std::size_t> draw_without_replacement(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<std::size_t> pool(n);
  std::iota(pool.begin(), pool.end(), 0);
  for (std::size_t i = 0; i < k; ++i) std::swap(pool[i], pool[i + uniform_index(rng, n - i)]);
  pool.resize(k);
  std::sort(pool.begin(), pool.end());
  return pool;
}

}  // namespace

RatioSample ratio_sample(std::size_t n_pos, std::size_t n_neg, std::size_t ratio, std::uint64_t seed) {
  const std::size_t wanted = ratio * n_pos;
  RatioSample s;
  s.clamped = wanted > n_neg;
  Rng rng(seed);
  s.negatives = draw_without_replacement(n_neg, std::min(wanted, n_neg), rng);
  return s;
}

std::vector<std::size_t> stratified_fraction(std::span<const int> labels, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) fail(ErrorCode::FractionOutOfRange, "fraction must lie in (0, 1]");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  Rng rng(seed);
  std::vector<std::size_t> out;
  for (const auto& [cls, rows] : by_class) {
    const auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(rows.size())));
    for (std::size_t i : draw_without_replacement(rows.size(), k, rng)) out.push_back(rows[i]);
  }
  std::sort(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------------------------------------

#define CELLFLOW_INSTANTIATE(Real)                                                                                        \
  template struct Mlp<Real>;                                                                                              \
  template Mlp<Real> init_mlp<Real>(int, int, int, double, Rng&);                                                         \
  template ForwardCache<Real> forward<Real>(const Mlp<Real>&, std::span<const Real>, std::size_t, Rng*);                 \
  template ForwardCache<Real> forward_masked<Real>(const Mlp<Real>&, std::span<const Real>, std::size_t,                 \
                                                   std::span<const Real>);                                                \
  template std::vector<Real> softmax<Real>(std::span<const Real>, std::size_t);                                          \
  template double cross_entropy<Real>(std::span<const Real>, std::size_t, std::span<const int>);                         \
  template std::vector<Real> backward<Real>(const Mlp<Real>&, const ForwardCache<Real>&, std::span<const int>);          \
  template void adamw_step<Real>(std::vector<Real>&, std::span<const Real>, AdamState<Real>&, const TrainConfig&, double);

CELLFLOW_INSTANTIATE(float)
CELLFLOW_INSTANTIATE(double)

#undef CELLFLOW_INSTANTIATE

}  // namespace cellflow
