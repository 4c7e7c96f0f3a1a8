#pragma once

// Experts, dataset-specific routers, Top-K gating and the MoE layer forward
// pass, plus structural edits of the expert pool (add, remove, freeze).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "hetmoe/error.hpp"
#include "hetmoe/joint_buffer.hpp"
#include "hetmoe/ndgrad/ops.hpp"
#include "hetmoe/rng.hpp"

namespace hetmoe {

using ndgrad::Parameter;
using ndgrad::Shape;
using ndgrad::Tape;
using ndgrad::Tensor;
using ndgrad::Var;

/// Symmetric uniform initialisation scaled by 1/sqrt(fan_in).
inline Tensor uniform_init(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& v : t.data()) v = rng.uniform(-bound, bound);
  return t;
}

/// Two-layer tanh MLP, d -> hidden -> d.
struct Expert {
  int id = 0;
  Parameter w1;
  Parameter b1;
  Parameter w2;
  Parameter b2;

  bool frozen() const noexcept { return w1.frozen; }

  void set_frozen(bool flag) noexcept {
    w1.frozen = b1.frozen = w2.frozen = b2.frozen = flag;
  }

  std::size_t hidden() const { return w1.value.shape()[1]; }
  std::size_t param_count() const { return w1.size() + b1.size() + w2.size() + b2.size(); }
};

inline Expert make_expert(int id, std::size_t d, std::size_t hidden, std::uint64_t seed) {
  Rng rng(seed);
  Expert e;
  e.id = id;
  e.w1 = Parameter(uniform_init({d, hidden}, d, rng));
  e.b1 = Parameter(uniform_init({hidden}, d, rng));
  e.w2 = Parameter(uniform_init({hidden, d}, hidden, rng));
  e.b2 = Parameter(uniform_init({d}, hidden, rng));
  return e;
}

inline Var expert_forward(Tape& tape, Expert& e, Var x) {
  using namespace ndgrad;
  const Var h = ndgrad::tanh(add_bias(matmul(x, tape.param(e.w1)), tape.param(e.b1)));
  return add_bias(matmul(h, tape.param(e.w2)), tape.param(e.b2));
}

/// Per-dataset gating network. Column j of w_g scores expert_ids[j]; a
/// router only ever addresses the experts it has columns for.
struct Router {
  int dataset_id = 0;
  std::size_t top_k = 1;
  std::size_t n_experts_at_creation = 0;
  std::vector<int> expert_ids;
  Parameter w_g;

  std::size_t n_columns() const noexcept { return expert_ids.size(); }
};

/// Routing result for one batch.
struct GateDecision {
  int dataset_id = 0;
  std::size_t top_k = 0;
  /// Expert id of each probability column.
  std::vector<int> column_experts;
  /// Raw router scores x·W_g, [batch x columns].
  Var logits;
  /// Full softmax over the router's columns (before Top-K), [batch x columns].
  Var probs;
  /// Per sample, the Top-K expert ids in descending gate order.
  std::vector<std::vector<int>> selected;
  std::vector<std::vector<std::size_t>> selected_cols;
  /// Gate weights renormalised over the selected set, [batch x top_k],
  /// aligned with `selected`.
  Var weights;

  std::size_t batch() const { return selected.size(); }
};

/// Indices of the k largest scores; ties go to the lowest id.
inline std::vector<std::size_t> top_k_indices(std::span<const double> scores, std::span<const int> ids, std::size_t k) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (scores[a] != scores[b]) return scores[a] > scores[b];
                      return ids[a] < ids[b];
                    });
  idx.resize(k);
  return idx;
}

struct MoELayer {
  int layer_id = 0;
  std::size_t d = 0;
  std::size_t hidden = 0;
  std::uint64_t init_seed = 0;
  int next_expert_id = 0;
  std::vector<Expert> experts;
  std::map<int, Router> routers;
  JointBuffer buffer;

  MoELayer() = default;

  MoELayer(int id, std::size_t width, std::size_t hidden_width, std::size_t n_experts, std::uint64_t seed)
      : layer_id(id), d(width), hidden(hidden_width), init_seed(seed) {
    for (std::size_t i = 0; i < n_experts; ++i) {
      const int eid = next_expert_id++;
      experts.push_back(make_expert(eid, d, hidden, mix_seed(seed, layer_id, eid, 0xE)));
      buffer.expert_ids.push_back(eid);
    }
  }

  std::size_t n_experts() const noexcept { return experts.size(); }

  std::vector<int> expert_ids() const {
    std::vector<int> ids;
    for (const auto& e : experts) ids.push_back(e.id);
    return ids;
  }

  std::size_t position_of(int expert_id) const {
    for (std::size_t i = 0; i < experts.size(); ++i) {
      if (experts[i].id == expert_id) return i;
    }
    throw StructuralError("layer " + std::to_string(layer_id) + " has no expert " + std::to_string(expert_id));
  }

  Expert& expert(int expert_id) { return experts[position_of(expert_id)]; }

  const Router& router(int dataset_id) const {
    const auto it = routers.find(dataset_id);
    if (it == routers.end()) {
      throw MissingEntityError("layer " + std::to_string(layer_id) + " has no router for dataset " +
                               std::to_string(dataset_id));
    }
    return it->second;
  }

  Router& router(int dataset_id) { return const_cast<Router&>(std::as_const(*this).router(dataset_id)); }
};

/// Creates a router over every expert currently in the pool.
inline Router& add_router(MoELayer& layer, int dataset_id, std::size_t top_k, std::uint64_t seed) {
  if (layer.routers.count(dataset_id)) {
    throw StructuralError("layer " + std::to_string(layer.layer_id) + " already routes dataset " +
                          std::to_string(dataset_id));
  }
  if (top_k < 1 || top_k > layer.n_experts()) {
    throw StructuralError("top_k " + std::to_string(top_k) + " outside [1, " + std::to_string(layer.n_experts()) + "]");
  }
  Rng rng(mix_seed(seed, layer.layer_id, dataset_id, 0x7));
  Router r;
  r.dataset_id = dataset_id;
  r.top_k = top_k;
  r.n_experts_at_creation = layer.n_experts();
  r.expert_ids = layer.expert_ids();
  r.w_g = Parameter(uniform_init({layer.d, r.expert_ids.size()}, layer.d, rng));
  auto [it, ok] = layer.routers.emplace(dataset_id, std::move(r));
  if (!layer.buffer.has_dataset(dataset_id)) layer.buffer.add_dataset(dataset_id);
  return it->second;
}

/// Top-K routing: softmax over the router's columns, selection of the K
/// largest, and weights renormalised over the selected set. The weights are
/// computed as a softmax of the selected logits, which equals
/// probs[i] / sum(probs[selected]) and depends on the selected columns only.
inline GateDecision route(Tape& tape, MoELayer& layer, Var x, int dataset_id) {
  Router& r = layer.router(dataset_id);
  if (x.value().rank() != 2 || x.value().cols() != layer.d) {
    throw DimensionError("route: input " + ndgrad::shape_str(x.shape()) + " does not have width " +
                         std::to_string(layer.d));
  }
  GateDecision g;
  g.dataset_id = dataset_id;
  g.top_k = r.top_k;
  g.column_experts = r.expert_ids;
  g.logits = ndgrad::matmul(x, tape.param(r.w_g));
  g.probs = ndgrad::softmax(g.logits, 1);
  const Tensor& lv = g.logits.value();
  const std::size_t batch = lv.shape()[0], cols = lv.shape()[1];
  g.selected.resize(batch);
  g.selected_cols.resize(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    g.selected_cols[b] = top_k_indices(std::span<const double>(&lv[b * cols], cols), r.expert_ids, r.top_k);
    for (auto c : g.selected_cols[b]) g.selected[b].push_back(r.expert_ids[c]);
  }
  g.weights = ndgrad::softmax(ndgrad::take_cols(g.logits, g.selected_cols), 1);
  return g;
}

struct MoEOutput {
  Var output;
  GateDecision gate;
  /// Samples each pool expert was evaluated on, indexed by pool position.
  std::vector<std::size_t> evaluations;
};

/// y[b] = sum over selected experts k of weight_k * Expert_k(x[b]). Experts
/// run only on the rows that selected them.
inline MoEOutput moe_forward(Tape& tape, MoELayer& layer, Var x, int dataset_id) {
  MoEOutput out;
  out.gate = route(tape, layer, x, dataset_id);
  const GateDecision& g = out.gate;
  const std::size_t batch = g.batch();
  std::vector<std::vector<std::size_t>> rows_of(layer.n_experts());
  std::vector<std::vector<ndgrad::Slot>> slots(batch, std::vector<ndgrad::Slot>(g.top_k));
  // slot.part temporarily holds the pool position; remapped below.
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t k = 0; k < g.top_k; ++k) {
      const std::size_t pos = layer.position_of(g.selected[b][k]);
      slots[b][k] = ndgrad::Slot{pos, rows_of[pos].size()};
      rows_of[pos].push_back(b);
    }
  }
  std::vector<Var> parts;
  std::vector<std::size_t> part_of(layer.n_experts(), 0);
  out.evaluations.assign(layer.n_experts(), 0);
  for (std::size_t pos = 0; pos < layer.n_experts(); ++pos) {
    if (rows_of[pos].empty()) continue;
    out.evaluations[pos] = rows_of[pos].size();
    part_of[pos] = parts.size();
    parts.push_back(expert_forward(tape, layer.experts[pos], ndgrad::gather_rows(x, rows_of[pos])));
  }
  for (auto& row : slots) {
    for (auto& s : row) s.part = part_of[s.part];
  }
  out.output = ndgrad::mixture_combine(parts, g.weights, std::move(slots));
  return out;
}

/// Appends `count` freshly initialised experts. Existing routers are left
/// untouched, so they cannot address the new experts.
inline std::vector<int> add_experts(MoELayer& layer, std::size_t count, std::uint64_t init_seed) {
  if (count < 1) throw StructuralError("add_experts: count must be at least 1");
  std::vector<int> ids;
  for (std::size_t i = 0; i < count; ++i) {
    const int eid = layer.next_expert_id++;
    layer.experts.push_back(make_expert(eid, layer.d, layer.hidden, mix_seed(init_seed, layer.layer_id, eid, 0xE)));
    ids.push_back(eid);
  }
  layer.buffer.add_experts(ids);
  return ids;
}

namespace detail {

inline void keep_columns(Tensor& t, const std::vector<std::size_t>& keep) {
  if (t.empty()) return;
  const std::size_t rows = t.shape()[0], cols = t.shape()[1];
  Tensor out(Shape{rows, keep.size()});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < keep.size(); ++j) out.at(r, j) = t[r * cols + keep[j]];
  }
  t = std::move(out);
}

}  // namespace detail

/// Deletes experts by id; routers and the buffer drop the matching columns.
inline void remove_experts(MoELayer& layer, const std::set<int>& ids) {
  if (ids.empty()) return;
  for (int id : ids) layer.position_of(id);
  for (const auto& [ds, r] : layer.routers) {
    std::size_t left = 0;
    for (int id : r.expert_ids) left += ids.count(id) ? 0 : 1;
    if (left < r.top_k) {
      throw StructuralError("removing experts would leave router for dataset " + std::to_string(ds) + " in layer " +
                            std::to_string(layer.layer_id) + " with " + std::to_string(left) +
                            " experts, below its top_k " + std::to_string(r.top_k));
    }
  }
  for (auto& [ds, r] : layer.routers) {
    std::vector<std::size_t> keep;
    std::vector<int> kept_ids;
    for (std::size_t c = 0; c < r.expert_ids.size(); ++c) {
      if (ids.count(r.expert_ids[c])) continue;
      keep.push_back(c);
      kept_ids.push_back(r.expert_ids[c]);
    }
    if (kept_ids.size() == r.expert_ids.size()) continue;
    r.expert_ids = std::move(kept_ids);
    detail::keep_columns(r.w_g.value, keep);
    detail::keep_columns(r.w_g.grad, keep);
    detail::keep_columns(r.w_g.moment1, keep);
    detail::keep_columns(r.w_g.moment2, keep);
  }
  std::erase_if(layer.experts, [&](const Expert& e) { return ids.count(e.id) > 0; });
  layer.buffer.remove_experts(ids);
}

inline void set_experts_frozen(MoELayer& layer, const std::vector<int>& ids, bool flag) {
  for (int id : ids) layer.position_of(id);
  for (int id : ids) layer.expert(id).set_frozen(flag);
}

inline void set_routers_frozen(MoELayer& layer, const std::vector<int>& dataset_ids, bool flag) {
  for (int ds : dataset_ids) {
    if (!layer.routers.count(ds)) {
      throw StructuralError("layer " + std::to_string(layer.layer_id) + " has no router for dataset " +
                            std::to_string(ds));
    }
  }
  for (int ds : dataset_ids) layer.routers.at(ds).w_g.frozen = flag;
}

inline void set_layer_frozen(MoELayer& layer, bool flag) {
  for (auto& e : layer.experts) e.set_frozen(flag);
  for (auto& [ds, r] : layer.routers) r.w_g.frozen = flag;
}

}  // namespace hetmoe
