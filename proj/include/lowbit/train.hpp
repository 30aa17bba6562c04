#pragma once

#include <chrono>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "lowbit/data.hpp"
#include "lowbit/models.hpp"
#include "lowbit/ops.hpp"

namespace lowbit {

/// Raised when a training batch produces a non-finite loss; carries the
/// index of the offending batch within its epoch.
struct NanAbortError : std::runtime_error {
  NanAbortError(int64_t batch, const std::string& why)
      : std::runtime_error("training aborted: non-finite loss at batch " +
                           std::to_string(batch) + " (" + why + ")"),
        batch_index(batch) {}
  int64_t batch_index;
};

/// Mean over the batch of -sum(y * log(p + eps)) on probability rows.
inline Tensor cross_entropy(const Tensor& pred, const Tensor& target,
                            float eps = 1e-9f) {
  if (pred.rank() != 2 || target.rank() != 2 || pred.shape() != target.shape())
    throw ShapeError("cross_entropy: prediction/target shape mismatch");
  const int64_t batch = pred.dim(0), classes = pred.dim(1);
  auto pv = pred.data(), tv = target.data();
  double acc = 0.0;
  for (int64_t i = 0; i < batch * classes; ++i)
    if (tv[i] != 0.0f) acc -= double(tv[i]) * std::log(double(pv[i]) + double(eps));
  Tensor y = Tensor::scalar(static_cast<float>(acc / double(batch)),
                            detail::grad_wanted({&pred}));
  check_finite("cross_entropy", y);
  if (y.requires_grad()) {
    Tape::active()->record("cross_entropy", [pred, target, y, batch, classes, eps] {
      if (!y.grad_allocated()) return;
      const float g = y.grad()[0];
      auto pv2 = pred.data();
      auto tv2 = target.data();
      auto pg = pred.grad();
      const float inv_b = 1.0f / static_cast<float>(batch);
      for (int64_t i = 0; i < batch * classes; ++i)
        if (tv2[i] != 0.0f)
          pg[i] -= g * inv_b * tv2[i] / (pv2[i] + eps);
    });
  }
  return y;
}

struct TrainConfig {
  float lr = 0.001f;
  float momentum = 0.92f;
  int64_t batch_size = 256;
  int64_t epochs = 1;
  bool augment = false;
  AugmentConfig aug;
  uint64_t seed = 0;

  void validate() const {
    if (lr <= 0.0f) throw std::invalid_argument("lr must be > 0");
    if (momentum < 0.0f || momentum >= 1.0f)
      throw std::invalid_argument("momentum must be in [0, 1)");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (epochs < 0) throw std::invalid_argument("epochs must be >= 0");
  }
};

/// Classical heavy-ball momentum: v <- mu*v + g, w <- w - lr*v.
/// Velocity buffers mirror the parameter tensors; only 32-bit masters are
/// ever updated.
class SgdMomentum {
 public:
  void step(std::span<const Tensor> params, float lr, float mu) {
    if (velocity_.empty()) {
      for (const Tensor& p : params)
        velocity_.emplace_back(static_cast<size_t>(p.numel()), 0.0f);
    }
    if (velocity_.size() != params.size())
      throw ShapeError("optimizer: parameter list changed size");
    for (size_t i = 0; i < params.size(); ++i) {
      const Tensor& p = params[i];
      std::vector<float>& v = velocity_[i];
      if (v.size() != static_cast<size_t>(p.numel()))
        throw ShapeError("optimizer: velocity shape mismatch for parameter " +
                         std::to_string(i));
      auto w = p.data_mut();
      if (!p.grad_allocated()) continue;  // no gradient flowed this step
      auto g = p.grad();
      for (size_t j = 0; j < v.size(); ++j) {
        v[j] = mu * v[j] + g[j];
        w[j] -= lr * v[j];
      }
    }
  }

 private:
  std::vector<std::vector<float>> velocity_;
};

inline std::vector<Tensor> trainable_params(Model& m) {
  std::vector<Tensor> ps;
  for (const LayerRecord& r : m.records()) {
    ps.push_back(r.weights);
    if (r.bias.defined()) ps.push_back(r.bias);
  }
  return ps;
}

struct MetricsRow {
  int64_t epoch = 0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double val_loss = 0.0;
  double val_acc = 0.0;
  double epoch_time_s = 0.0;
};

inline int64_t count_argmax_matches(const Tensor& pred,
                                    std::span<const int> labels) {
  const int64_t batch = pred.dim(0), classes = pred.dim(1);
  auto pv = pred.data();
  int64_t hits = 0;
  for (int64_t i = 0; i < batch; ++i) {
    const float* row = pv.data() + i * classes;
    int best = 0;
    for (int c = 1; c < classes; ++c)
      if (row[c] > row[best]) best = c;
    if (best == labels[static_cast<size_t>(i)]) ++hits;
  }
  return hits;
}

/// Inference-mode loss and accuracy over a dataset.
inline std::pair<double, double> evaluate(Model& model, const Dataset& ds,
                                          int64_t batch_size = 256) {
  if (ds.size() == 0) throw DataError("evaluate: empty dataset");
  double loss_acc = 0.0;
  int64_t hits = 0;
  for (const auto& idx : batch_indices(ds.size(), batch_size, false, 0, 0)) {
    Batch b = gather_batch(ds, idx, nullptr, 0, 0);
    Tensor pred = model.forward(b.x, false, nullptr);
    Tensor loss = cross_entropy(pred, b.y);
    loss_acc += double(loss.item()) * double(b.x.dim(0));
    hits += count_argmax_matches(pred, b.labels);
  }
  const double n = static_cast<double>(ds.size());
  return {loss_acc / n, static_cast<double>(hits) / n};
}

/// One full pass: quantized forward, backward into the 32-bit masters, one
/// optimizer step per batch. Train metrics are accumulated from the batches
/// as seen (training-mode forward); validation runs in inference mode.
inline MetricsRow train_epoch(Model& model, const Dataset& train,
                              const Dataset& val, const TrainConfig& cfg,
                              SgdMomentum& opt, int64_t epoch) {
  if (model.inference_only)
    throw std::logic_error("train_epoch: model was loaded for inference only");
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<Tensor> params = trainable_params(model);
  double loss_acc = 0.0;
  int64_t hits = 0, seen = 0;
  const auto index_sets =
      batch_indices(train.size(), cfg.batch_size, true, cfg.seed, epoch);
  Prng drop_root(cfg.seed);
  for (size_t bi = 0; bi < index_sets.size(); ++bi) {
    Batch b = gather_batch(train, index_sets[bi],
                           cfg.augment ? &cfg.aug : nullptr, cfg.seed, epoch);
    Prng drop_rng = drop_root.split(stream::kDropout,
                                    static_cast<uint64_t>(epoch),
                                    static_cast<uint64_t>(bi));
    try {
      Tape tape;
      Tensor pred = model.forward(b.x, true, &drop_rng);
      Tensor loss = cross_entropy(pred, b.y);
      loss_acc += double(loss.item()) * double(b.x.dim(0));
      hits += count_argmax_matches(pred, b.labels);
      seen += b.x.dim(0);
      tape.backward(loss);
      opt.step(params, cfg.lr, cfg.momentum);
    } catch (const NumericsError& e) {
      throw NanAbortError(static_cast<int64_t>(bi), e.what());
    }
    for (const Tensor& p : params) p.clear_grad();
  }
  MetricsRow row;
  row.epoch = epoch;
  row.train_loss = seen ? loss_acc / double(seen) : 0.0;
  row.train_acc = seen ? double(hits) / double(seen) : 0.0;
  auto [vl, va] = evaluate(model, val, cfg.batch_size);
  row.val_loss = vl;
  row.val_acc = va;
  row.epoch_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return row;
}

/// CSV column order is a frozen interface; keep in sync with README.
inline constexpr const char* kMetricsCsvHeader =
    "epoch,train_loss,train_acc,val_loss,val_acc,epoch_time_s";

inline void write_metrics_csv(const std::string& path,
                              std::span<const MetricsRow> rows) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write metrics file: " + path);
  f << kMetricsCsvHeader << "\n";
  char line[256];
  for (const MetricsRow& r : rows) {
    std::snprintf(line, sizeof(line), "%lld,%.6f,%.6f,%.6f,%.6f,%.3f",
                  static_cast<long long>(r.epoch), r.train_loss, r.train_acc,
                  r.val_loss, r.val_acc, r.epoch_time_s);
    f << line << "\n";
  }
}

}  // namespace lowbit
