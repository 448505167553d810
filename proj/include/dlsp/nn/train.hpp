#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <vector>

#include "dlsp/morpho.hpp"
#include "dlsp/nn/metrics.hpp"
#include "dlsp/nn/network.hpp"
#include "dlsp/parallel.hpp"

namespace dlsp::nn {

/// Byte-quantized images held in memory; value = byte / 255 as in the PGM codec.
struct ImageSet {
  Shape3 shape{101, 101, 1};
  std::vector<std::uint8_t> pixels;
  std::vector<int> labels;

  [[nodiscard]] std::size_t size() const { return labels.size(); }

  void add(const Morphology& m, int label) {
    if (m.height() != shape.h || m.width() != shape.w) {
      throw NnError(NnError::Code::ShapeMismatch, "image is " + std::to_string(m.height()) + "x" + std::to_string(m.width()));
    }
    for (double v : m.values()) pixels.push_back(quantize_byte(v));
    labels.push_back(label);
  }

  template <class T>
  void copy_to(std::size_t index, T* dst) const {
    const auto* src = pixels.data() + index * shape.size();
    for (std::size_t i = 0; i < shape.size(); ++i) dst[i] = static_cast<T>(src[i] / 255.0);
  }

  [[nodiscard]] ImageSet subset(std::span<const std::size_t> idx) const {
    ImageSet out{shape, {}, {}};
    for (auto i : idx) {
      const auto* src = pixels.data() + i * shape.size();
      out.pixels.insert(out.pixels.end(), src, src + shape.size());
      out.labels.push_back(labels[i]);
    }
    return out;
  }
};

/// Loads every labelled sample of `split` (all samples for Split::None).
inline ImageSet load_images(const DatasetManifest& manifest, Split split, int jobs = 1, Shape3 shape = {101, 101, 1}) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < manifest.samples.size(); ++i) {
    const auto& s = manifest.samples[i];
    if ((split == Split::None || s.split == split) && s.class_id) idx.push_back(i);
  }
  std::vector<Morphology> images(idx.size(), Morphology(3, 3));
  parallel_for(idx.size(), jobs, [&](std::size_t k) { images[k] = read_pgm(manifest.resolve(manifest.samples[idx[k]])); });
  ImageSet set{shape, {}, {}};
  set.pixels.reserve(idx.size() * shape.size());
  for (std::size_t k = 0; k < idx.size(); ++k) set.add(images[k], *manifest.samples[idx[k]].class_id);
  return set;
}

struct TrainConfig {
  double learning_rate = 1e-4;
  int batch_size = 128;
  int epochs = 30;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t seed = 0;
  int jobs = 1;
  int chunk = 16;  // samples per worker task; fixes the gradient reduction order

  void validate() const {
    if (!(learning_rate > 0)) throw NnError(NnError::Code::InvalidConfig, "learning_rate must be positive");
    if (batch_size < 1) throw NnError(NnError::Code::InvalidConfig, "batch_size must be >= 1");
    if (epochs < 0) throw NnError(NnError::Code::InvalidConfig, "epochs must be >= 0");
    if (chunk < 1) throw NnError(NnError::Code::InvalidConfig, "chunk must be >= 1");
  }
};

template <class T>
struct AdamState {
  std::vector<T> m, v;
  long step = 0;

  AdamState() = default;
  explicit AdamState(std::size_t n) : m(n, T{0}), v(n, T{0}) {}
};

/// Bias-corrected Adam update; increments the timestep once.
template <class T>
void adam_step(Model<T>& model, std::span<const T> grads, AdamState<T>& st, const TrainConfig& cfg) {
  const auto n = model.params.size();
  if (grads.size() != n || st.m.size() != n || st.v.size() != n) throw NnError(NnError::Code::ShapeMismatch, "Adam state/gradient size mismatch");
  ++st.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T step_size = static_cast<T>(cfg.learning_rate / c1);
  const T inv_c2 = static_cast<T>(1.0 / c2);
  const T eps = static_cast<T>(cfg.epsilon);
  for (std::size_t i = 0; i < n; ++i) {
    const T g = grads[i];
    st.m[i] = b1 * st.m[i] + (T{1} - b1) * g;
    st.v[i] = b2 * st.v[i] + (T{1} - b2) * g * g;
    model.params[i] -= step_size * st.m[i] / (std::sqrt(st.v[i] * inv_c2) + eps);
  }
}

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double train_acc = 0.0;  // running accuracy over the epoch's mini-batches
  double val_acc = 0.0;    // NaN without a validation set
};

template <class T>
struct TrainResult {
  Model<T> final_model;
  Model<T> best_model;  // highest validation accuracy (final model without validation data)
  int best_epoch = 0;
  double best_val_acc = 0.0;
  std::vector<EpochRecord> history;
};

namespace detail {

template <class T>
class WorkspacePool {
 public:
  WorkspacePool(const ArchSpec& arch, int capacity) : arch_(arch), capacity_(capacity) {}

  std::unique_ptr<Workspace<T>> acquire() {
    std::lock_guard lock(mu_);
    if (free_.empty()) return std::make_unique<Workspace<T>>(arch_, capacity_);
    auto ws = std::move(free_.back());
    free_.pop_back();
    return ws;
  }
  void release(std::unique_ptr<Workspace<T>> ws) {
    std::lock_guard lock(mu_);
    free_.push_back(std::move(ws));
  }

 private:
  ArchSpec arch_;
  int capacity_;
  std::mutex mu_;
  std::vector<std::unique_ptr<Workspace<T>>> free_;
};

}  // namespace detail

/// Argmax predictions for every image, evaluated in chunks on `jobs` threads.
template <class T>
std::vector<int> predict_classes(const Model<T>& model, const ImageSet& set, int jobs = 1, int chunk = 32) {
  std::vector<int> out(set.size());
  const std::size_t n_chunks = (set.size() + chunk - 1) / chunk;
  detail::WorkspacePool<T> pool(model.arch, chunk);
  parallel_for(n_chunks, jobs, [&](std::size_t c) {
    auto ws = pool.acquire();
    const std::size_t begin = c * chunk, end = std::min(set.size(), begin + chunk);
    const auto in_size = model.arch.input.size();
    for (std::size_t i = begin; i < end; ++i) set.copy_to(i, ws->input().data() + (i - begin) * in_size);
    forward(model, *ws, static_cast<int>(end - begin));
    const auto logits = ws->logits();
    for (std::size_t i = begin; i < end; ++i) {
      out[i] = argmax(logits.subspan((i - begin) * model.arch.classes, model.arch.classes));
    }
    pool.release(std::move(ws));
  });
  return out;
}

template <class T>
EvalReport evaluate(const Model<T>& model, const ImageSet& set, int jobs = 1) {
  if (set.size() == 0) throw NnError(NnError::Code::EmptySplit, "cannot evaluate an empty split");
  const auto pred = predict_classes(model, set, jobs);
  return make_report(set.labels, pred);
}

template <class T>
double accuracy(const Model<T>& model, const ImageSet& set, int jobs = 1) {
  const auto pred = predict_classes(model, set, jobs);
  long hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == set.labels[i];
  return set.size() ? static_cast<double>(hits) / set.size() : 0.0;
}

template <class T>
using EpochCallback = std::function<bool(const EpochRecord&, const Model<T>&)>;

/// Mini-batch Adam on softmax cross-entropy. Each batch is cut into fixed
/// chunks whose gradients are reduced in chunk order, so results do not
/// depend on `jobs`. The callback may stop training early by returning false.
template <class T>
TrainResult<T> train(Model<T> model, const ImageSet& train_set, const ImageSet* val_set, const TrainConfig& cfg,
                     const EpochCallback<T>& on_epoch = {}) {
  cfg.validate();
  if (train_set.size() == 0) throw NnError(NnError::Code::EmptyTrainSplit, "training split is empty");
  if (!(train_set.shape == model.arch.input)) throw NnError(NnError::Code::ShapeMismatch, "training images do not match the model input");
  const std::size_t n = train_set.size();
  const auto in_size = model.arch.input.size();
  const std::size_t max_chunks = (static_cast<std::size_t>(cfg.batch_size) + cfg.chunk - 1) / cfg.chunk;

  AdamState<T> adam(model.params.size());
  detail::WorkspacePool<T> pool(model.arch, cfg.chunk);
  std::vector<std::vector<T>> chunk_grads(max_chunks, std::vector<T>(model.params.size()));
  std::vector<XentStats> chunk_stats(max_chunks);
  std::vector<T> grads(model.params.size());
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::mt19937_64 rng(cfg.seed);

  TrainResult<T> result;
  result.best_model = model;
  result.best_val_acc = -1.0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
    double loss_sum = 0;
    long correct = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t bsz = std::min<std::size_t>(cfg.batch_size, n - start);
      const std::size_t n_chunks = (bsz + cfg.chunk - 1) / cfg.chunk;
      const T scale = static_cast<T>(1.0 / static_cast<double>(bsz));
      parallel_for(n_chunks, cfg.jobs, [&](std::size_t c) {
        auto ws = pool.acquire();
        const std::size_t cb = c * cfg.chunk, ce = std::min(bsz, cb + cfg.chunk);
        const int m = static_cast<int>(ce - cb);
        std::vector<int> labels(m);
        for (int k = 0; k < m; ++k) {
          const std::size_t idx = order[start + cb + k];
          train_set.copy_to(idx, ws->input().data() + static_cast<std::size_t>(k) * in_size);
          labels[k] = train_set.labels[idx];
        }
        forward(model, *ws, m);
        chunk_stats[c] = softmax_xent(*ws, m, std::span<const int>(labels), scale);
        std::fill(chunk_grads[c].begin(), chunk_grads[c].end(), T{0});
        backward(model, *ws, m, std::span<T>(chunk_grads[c]));
        pool.release(std::move(ws));
      });
      std::copy(chunk_grads[0].begin(), chunk_grads[0].end(), grads.begin());
      for (std::size_t c = 1; c < n_chunks; ++c) {
        const auto& g = chunk_grads[c];
        for (std::size_t i = 0; i < grads.size(); ++i) grads[i] += g[i];
      }
      for (std::size_t c = 0; c < n_chunks; ++c) {
        loss_sum += chunk_stats[c].loss_sum;
        correct += chunk_stats[c].correct;
      }
      adam_step(model, std::span<const T>(grads), adam, cfg);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(n);
    rec.train_acc = static_cast<double>(correct) / static_cast<double>(n);
    rec.val_acc = std::numeric_limits<double>::quiet_NaN();
    if (val_set && val_set->size() > 0) {
      rec.val_acc = accuracy(model, *val_set, cfg.jobs);
      if (rec.val_acc > result.best_val_acc) {
        result.best_val_acc = rec.val_acc;
        result.best_epoch = epoch;
        result.best_model = model;
      }
    }
    result.history.push_back(rec);
    if (on_epoch && !on_epoch(rec, model)) break;
  }
  if (!val_set || val_set->size() == 0) {
    result.best_model = model;
    result.best_epoch = static_cast<int>(result.history.size());
    result.best_val_acc = std::numeric_limits<double>::quiet_NaN();
  }
  result.final_model = std::move(model);
  return result;
}

struct Prediction {
  int class_id = 0;
  std::array<double, kClasses> probabilities{};
};

/// Input values go in unquantized (the Morphology's doubles cast to T).
template <class T>
std::vector<T> to_input(const Model<T>& model, const Morphology& m) {
  const auto& in = model.arch.input;
  if (m.height() != in.h || m.width() != in.w || in.c != 1) {
    throw NnError(NnError::Code::ShapeMismatch, "morphology is " + std::to_string(m.height()) + "x" + std::to_string(m.width()) + ", model expects " +
                                                    std::to_string(in.h) + "x" + std::to_string(in.w));
  }
  std::vector<T> x(m.values().size());
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<T>(m.values()[i]);
  return x;
}

template <class T>
Prediction predict(const Model<T>& model, const Morphology& m) {
  if (model.arch.classes != kClasses) throw NnError(NnError::Code::ShapeMismatch, "predict expects a 10-class model");
  const auto x = to_input(model, m);
  const auto logits = forward_logits(model, std::span<const T>(x));
  const auto p = softmax(std::span<const T>(logits), kClasses);
  Prediction out;
  for (int c = 0; c < kClasses; ++c) out.probabilities[c] = static_cast<double>(p[c]);
  out.class_id = argmax(std::span<const T>(logits));
  return out;
}

}  // namespace dlsp::nn
