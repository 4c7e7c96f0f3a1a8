#pragma once

// Heterogeneous training loop: sample a dataset, draw a batch, forward,
// weighted task loss plus buffered MI loss, clip, update, refresh buffers.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "hetmoe/error.hpp"
#include "hetmoe/model.hpp"
#include "hetmoe/objectives.hpp"
#include "hetmoe/synthdata.hpp"

namespace hetmoe {

enum class OptimizerKind { SgdMomentum, Adam };

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::SgdMomentum ? "sgd-momentum" : "adam"; }

inline OptimizerKind parse_optimizer(std::string_view s) {
  if (s == "sgd-momentum") return OptimizerKind::SgdMomentum;
  if (s == "adam") return OptimizerKind::Adam;
  throw ConfigError("unknown optimizer '" + std::string(s) + "'");
}

struct TrainConfig {
  std::size_t total_iters = 1000;
  double peak_lr = 3e-3;
  double warmup_frac = 0.1;
  double clip_norm = 0.1;
  double lambda_mi = 0.1;
  OptimizerKind optimizer = OptimizerKind::Adam;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 0;
};

inline void validate(const TrainConfig& c) {
  if (c.total_iters < 1) throw ConfigError("train: total_iters must be at least 1");
  if (!(c.clip_norm > 0.0)) throw ConfigError("train: clip_norm must be positive");
  if (!(c.peak_lr >= 0.0)) throw ConfigError("train: peak_lr must be non-negative");
  if (!(c.warmup_frac >= 0.0 && c.warmup_frac < 1.0)) throw ConfigError("train: warmup_frac must lie in [0, 1)");
  if (!(c.lambda_mi >= 0.0)) throw ConfigError("train: lambda_mi must be non-negative");
}

/// Triangular schedule: linear ramp from 0 to peak over the warm-up
/// iterations, then linear decay reaching 0 at total_iters.
inline double lr_at(std::size_t iter, const TrainConfig& cfg) {
  const auto total = static_cast<double>(cfg.total_iters);
  const double warm = std::floor(cfg.warmup_frac * total);
  const auto it = static_cast<double>(iter);
  if (warm > 0.0 && it <= warm) return cfg.peak_lr * it / warm;
  return cfg.peak_lr * std::max(total - it, 0.0) / (total - warm);
}

struct TrainState {
  std::size_t iter = 0;
  std::size_t optimizer_steps = 0;
  Rng rng;
  std::map<int, BatchCursor> cursors;
};

inline TrainState make_train_state(std::uint64_t seed) {
  TrainState s;
  s.rng.reseed(mix_seed(seed, 0x5A3F1E));
  return s;
}

inline BatchCursor& cursor_for(TrainState& s, int dataset_id, std::uint64_t seed) {
  auto it = s.cursors.find(dataset_id);
  if (it == s.cursors.end()) {
    BatchCursor c;
    c.seed = mix_seed(seed, 0xC0125, dataset_id);
    it = s.cursors.emplace(dataset_id, std::move(c)).first;
  }
  return it->second;
}

struct StepReport {
  std::size_t iter = 0;
  int dataset_id = 0;
  double task_loss = 0.0;
  double mi_loss = 0.0;
  double lr = 0.0;
  /// Global gradient norm over unfrozen parameters, before and after clipping.
  double grad_norm = 0.0;
  double clipped_norm = 0.0;
  /// Per MoE layer, how many samples selected each pool expert.
  std::vector<std::vector<std::size_t>> usage;
};

namespace detail {

inline bool all_finite(const Tensor& t) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

inline std::string locate_non_finite(const ForwardResult& fwd, const Model& model) {
  std::size_t layer = 0;
  for (std::size_t b = 0; b < fwd.block_outputs.size(); ++b) {
    const bool has_moe = model.blocks[b].moe.has_value();
    if (has_moe && !all_finite(fwd.moe[layer].gate.probs.value())) {
      return "router softmax in block " + std::to_string(b) + " (moe layer " + std::to_string(layer) + ")";
    }
    if (!all_finite(fwd.block_outputs[b].value())) {
      return has_moe ? "moe_forward in block " + std::to_string(b) + " (moe layer " + std::to_string(layer) + ")"
                     : "dense block " + std::to_string(b);
    }
    layer += has_moe ? 1 : 0;
  }
  if (!all_finite(fwd.output.value())) return "dataset head";
  return "";
}

inline void optimizer_update(Parameter& p, double lr, const TrainConfig& cfg) {
  const std::size_t step = ++p.steps;
  if (cfg.optimizer == OptimizerKind::SgdMomentum) {
    for (std::size_t i = 0; i < p.size(); ++i) {
      p.moment1[i] = cfg.momentum * p.moment1[i] + p.grad[i];
      p.value[i] -= lr * p.moment1[i];
    }
    return;
  }
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double g = p.grad[i];
    p.moment1[i] = cfg.beta1 * p.moment1[i] + (1.0 - cfg.beta1) * g;
    p.moment2[i] = cfg.beta2 * p.moment2[i] + (1.0 - cfg.beta2) * g * g;
    p.value[i] -= lr * (p.moment1[i] / c1) / (std::sqrt(p.moment2[i] / c2) + cfg.eps);
  }
}

}  // namespace detail

/// One optimisation step on a dataset drawn from `active`.
inline StepReport train_step(Model& model, std::span<const Dataset* const> active, TrainState& state,
                             const TrainConfig& cfg) {
  if (active.empty()) throw ConfigError("train_step: no datasets to train on");
  std::vector<DatasetSpec> specs;
  for (const Dataset* d : active) {
    if (!model.knows(d->spec.dataset_id)) {
      throw MissingEntityError("train_step: dataset " + std::to_string(d->spec.dataset_id) + " is not registered");
    }
    specs.push_back(d->spec);
  }
  StepReport rep;
  rep.iter = state.iter;
  rep.lr = lr_at(state.iter, cfg);
  rep.dataset_id = sample_dataset(specs, state.rng);
  const Dataset* ds = nullptr;
  for (const Dataset* d : active) {
    if (d->spec.dataset_id == rep.dataset_id) ds = d;
  }
  const Batch batch = next_batch(*ds, cursor_for(state, rep.dataset_id, cfg.seed));

  Tape tape;
  const ForwardResult fwd = forward(tape, model, batch);
  if (!detail::all_finite(fwd.output.value())) {
    throw NumericError("non-finite forward pass on dataset " + std::to_string(rep.dataset_id) + " originating in " +
                       detail::locate_non_finite(fwd, model));
  }
  const Var task = task_loss(fwd.output, batch.y, ds->spec.task);
  rep.task_loss = task.value().item();
  if (!std::isfinite(rep.task_loss)) {
    const std::string where = detail::locate_non_finite(fwd, model);
    throw NumericError("non-finite task loss on dataset " + std::to_string(rep.dataset_id) +
                       (where.empty() ? " (loss op)" : " originating in " + where));
  }

  auto layers = model.moe_layers();
  std::vector<UsageSnapshot> snaps;
  Var mi_total = tape.constant(Tensor::scalar(0.0));
  for (std::size_t l = 0; l < layers.size(); ++l) {
    snaps.push_back(batch_usage(fwd.moe[l].gate, layers[l]->buffer, rep.dataset_id));
    buffer_initialize(layers[l]->buffer, snaps.back().p_joint.value(), rep.dataset_id);
    const Var mi = mi_loss_surrogate(snaps.back(), layers[l]->buffer);
    if (!std::isfinite(mi.value().item())) {
      throw NumericError("non-finite mi_loss_surrogate in moe layer " + std::to_string(l));
    }
    mi_total = ndgrad::add(mi_total, mi);
  }
  rep.mi_loss = mi_total.value().item();
  const Var loss = ndgrad::add(ndgrad::scale(task, ds->spec.w_loss), ndgrad::scale(mi_total, cfg.lambda_mi));

  auto params = parameters(model);
  for (auto& p : params) p.param->zero_grad();
  tape.backward(loss);

  std::vector<Tensor*> grads;
  for (auto& p : params) {
    if (!p.param->frozen) grads.push_back(&p.param->grad);
  }
  rep.grad_norm = ndgrad::clip_global_norm(std::span<Tensor* const>(grads), cfg.clip_norm);
  {
    std::vector<const Tensor*> view(grads.begin(), grads.end());
    rep.clipped_norm = ndgrad::global_norm(view);
  }
  if (!std::isfinite(rep.grad_norm)) throw NumericError("non-finite gradient norm at iteration " + std::to_string(state.iter));

  if (!grads.empty()) {
    ++state.optimizer_steps;
    for (auto& p : params) {
      if (!p.param->frozen) detail::optimizer_update(*p.param, rep.lr, cfg);
    }
  }
  for (std::size_t l = 0; l < layers.size(); ++l) {
    buffer_update(layers[l]->buffer, snaps[l].p_joint.value(), rep.dataset_id);
    rep.usage.push_back(fwd.moe[l].evaluations);
  }
  ++state.iter;
  return rep;
}

using StepSink = std::function<void(const StepReport&)>;

/// Runs train_step until state.iter reaches cfg.total_iters.
inline void train(Model& model, std::span<const Dataset* const> active, TrainState& state, const TrainConfig& cfg,
                  const StepSink& sink = {}) {
  validate(cfg);
  while (state.iter < cfg.total_iters) {
    const StepReport rep = train_step(model, active, state, cfg);
    if (sink) sink(rep);
  }
}

struct LayerUsage {
  /// Pool expert ids, aligned with `frequency`.
  std::vector<int> expert_ids;
  /// Fraction of samples whose Top-K set contains each expert.
  std::vector<double> frequency;
};

struct Metrics {
  int dataset_id = 0;
  TaskKind kind = TaskKind::Classification;
  std::size_t n = 0;
  double accuracy = 0.0;
  double mse = 0.0;
  double r2 = 0.0;
  std::vector<LayerUsage> usage;

  /// Accuracy for classification, R² for regression.
  double score() const { return kind == TaskKind::Classification ? accuracy : r2; }
};

struct Prediction {
  Tensor outputs;
  std::vector<LayerUsage> usage;
};

/// Forward pass over a whole split in chunks; returns head outputs and
/// per-layer selection frequencies. Does not modify the model.
inline Prediction predict(Model& model, const Dataset& ds, Split split, std::size_t chunk = 512) {
  const int id = ds.spec.dataset_id;
  const std::size_t n = ds.split(split).size();
  const std::size_t width = model.heads.at(id).linear.bias.size();
  Prediction pred;
  pred.outputs = Tensor(Shape{n, width});
  auto layers = model.moe_layers();
  std::vector<std::vector<std::size_t>> counts(layers.size());
  for (std::size_t l = 0; l < layers.size(); ++l) counts[l].assign(layers[l]->n_experts(), 0);
  for (std::size_t first = 0; first < n; first += chunk) {
    const std::size_t count = std::min(chunk, n - first);
    const Batch b = slice(ds, split, first, count);
    Tape tape;
    const ForwardResult fwd = forward(tape, model, b);
    std::copy(fwd.output.value().data().begin(), fwd.output.value().data().end(), &pred.outputs[first * width]);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      for (std::size_t p = 0; p < counts[l].size(); ++p) counts[l][p] += fwd.moe[l].evaluations[p];
    }
  }
  for (std::size_t l = 0; l < layers.size(); ++l) {
    LayerUsage u;
    u.expert_ids = layers[l]->expert_ids();
    for (auto c : counts[l]) u.frequency.push_back(static_cast<double>(c) / static_cast<double>(n));
    pred.usage.push_back(std::move(u));
  }
  return pred;
}

/// Top-1 accuracy (classification) or MSE and R² (regression), plus
/// expert-usage frequencies.
inline Metrics evaluate(Model& model, const Dataset& ds, Split split) {
  Prediction pred = predict(model, ds, split);
  const auto& sd = ds.split(split);
  Metrics m;
  m.dataset_id = ds.spec.dataset_id;
  m.kind = ds.spec.task;
  m.n = sd.size();
  m.usage = std::move(pred.usage);
  const Tensor& out = pred.outputs;
  const std::size_t w = out.cols();
  if (m.kind == TaskKind::Classification) {
    std::size_t correct = 0;
    for (std::size_t i = 0; i < m.n; ++i) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < w; ++j) {
        if (out[i * w + j] > out[i * w + best]) best = j;
      }
      correct += static_cast<int>(best) == sd.targets.labels[i] ? 1 : 0;
    }
    m.accuracy = static_cast<double>(correct) / static_cast<double>(m.n);
  } else {
    const Tensor& y = sd.targets.values;
    std::vector<double> mean(w, 0.0);
    for (std::size_t i = 0; i < m.n; ++i) {
      for (std::size_t j = 0; j < w; ++j) mean[j] += y[i * w + j];
    }
    for (auto& v : mean) v /= static_cast<double>(m.n);
    double sse = 0.0, sst = 0.0;
    for (std::size_t i = 0; i < m.n; ++i) {
      for (std::size_t j = 0; j < w; ++j) {
        const double e = out[i * w + j] - y[i * w + j];
        const double c = y[i * w + j] - mean[j];
        sse += e * e;
        sst += c * c;
      }
    }
    m.mse = sse / static_cast<double>(m.n * w);
    m.r2 = sst > 0.0 ? 1.0 - sse / sst : 0.0;
  }
  return m;
}

/// I(D;E) of one MoE layer from Top-K usage frequencies of several datasets:
/// P(E|D_i) = frequency / top_k and P(D_i) = 1/M.
inline double usage_mutual_information(std::span<const Metrics> per_dataset, std::span<const std::size_t> top_k,
                                       std::size_t layer) {
  const std::size_t m = per_dataset.size();
  if (m == 0) return 0.0;
  const std::size_t n = per_dataset[0].usage.at(layer).frequency.size();
  Tensor joint(Shape{m, n}, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const auto& f = per_dataset[i].usage.at(layer).frequency;
    if (f.size() != n) throw DimensionError("usage_mutual_information: pools differ across datasets");
    for (std::size_t j = 0; j < n; ++j) {
      joint.at(i, j) = f[j] / static_cast<double>(top_k[i]) / static_cast<double>(m);
    }
  }
  return -mi_loss_exact(joint);
}

}  // namespace hetmoe
