#pragma once

// Efficient adaptation of a pretrained model to a downstream dataset: new
// routers only, routers plus a few experts, usage-based pruning, reduced
// Top-K, their hybrids, and continual learning by expert expansion.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "hetmoe/error.hpp"
#include "hetmoe/model.hpp"
#include "hetmoe/trainer.hpp"

namespace hetmoe {

/// Frequencies per MoE layer; see LayerUsage.
using UsageFrequency = std::vector<LayerUsage>;

enum class SelectionPolicy { Random, MostUsed, LeastUsed };

inline std::string to_string(SelectionPolicy s) {
  switch (s) {
    case SelectionPolicy::Random: return "random";
    case SelectionPolicy::MostUsed: return "most_used";
    case SelectionPolicy::LeastUsed: return "least_used";
  }
  return "?";
}

inline SelectionPolicy parse_selection(std::string_view s) {
  if (s == "random") return SelectionPolicy::Random;
  if (s == "most_used") return SelectionPolicy::MostUsed;
  if (s == "least_used") return SelectionPolicy::LeastUsed;
  throw ConfigError("unknown selection policy '" + std::string(s) + "'");
}

struct PrunePolicy {
  enum class Kind { Fraction, Threshold };
  Kind kind = Kind::Fraction;
  /// Fraction of each layer's pool to remove, or the frequency threshold.
  double value = 0.5;

  static PrunePolicy fraction(double f) { return {Kind::Fraction, f}; }
  static PrunePolicy threshold(double theta) { return {Kind::Threshold, theta}; }
};

/// Fine-tuning budget. In hybrid mode the first router_warmup_frac of the
/// iterations trains routers alone so that usage on the target can be
/// measured before pruning.
struct Budget {
  TrainConfig train;
  double router_warmup_frac = 0.25;
};

struct AdaptReport {
  std::string mode;
  int dataset_id = 0;
  std::size_t trainable_params = 0;
  std::size_t model_params = 0;
  /// Expert evaluations per sample per forward (sum over MoE layers of the
  /// dataset's top_k), the compute proxy.
  std::size_t expert_evals_per_sample = 0;
  std::size_t reference_evals_per_sample = 0;
  Metrics metrics_before;
  Metrics metrics_after;
  UsageFrequency per_layer_usage;
  /// Per layer, experts unfrozen for fine-tuning.
  std::vector<std::vector<int>> tuned_experts;
  /// Per layer, experts removed by pruning.
  std::vector<std::vector<int>> removed_experts;
  /// Per layer, experts added by expansion.
  std::vector<std::vector<int>> added_experts;
};

/// Selection frequency of every pool expert on a dataset split.
inline UsageFrequency measure_usage(Model& model, const Dataset& ds, Split split) {
  if (!model.knows(ds.spec.dataset_id)) {
    throw MissingEntityError("measure_usage: dataset " + std::to_string(ds.spec.dataset_id) + " is not registered");
  }
  return predict(model, ds, split).usage;
}

inline std::size_t expert_evals_per_sample(const Model& model, int dataset_id) {
  std::size_t n = 0;
  for (const auto* layer : model.moe_layers()) n += layer->router(dataset_id).top_k;
  return n;
}

namespace detail {

inline std::size_t reference_evals(const Model& model) { return model.config.top_k * model.moe_layers().size(); }

inline void unfreeze_dataset(Model& model, int dataset_id) {
  for (auto* layer : model.moe_layers()) layer->router(dataset_id).w_g.frozen = false;
  model.heads.at(dataset_id).linear.set_frozen(false);
}

/// Pool positions ordered by frequency (ascending or descending), ties by
/// lowest expert id.
inline std::vector<std::size_t> rank_by_usage(const LayerUsage& u, bool ascending) {
  std::vector<std::size_t> idx(u.frequency.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (u.frequency[a] != u.frequency[b]) return ascending ? u.frequency[a] < u.frequency[b] : u.frequency[a] > u.frequency[b];
    return u.expert_ids[a] < u.expert_ids[b];
  });
  return idx;
}

inline std::vector<int> select_experts(const LayerUsage& u, std::size_t k, SelectionPolicy policy, Rng& rng) {
  std::vector<std::size_t> order;
  if (policy == SelectionPolicy::Random) {
    order.resize(u.expert_ids.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(order));
  } else {
    order = rank_by_usage(u, policy == SelectionPolicy::LeastUsed);
  }
  std::vector<int> ids;
  for (std::size_t i = 0; i < k; ++i) ids.push_back(u.expert_ids[order[i]]);
  std::sort(ids.begin(), ids.end());
  return ids;
}

/// Experts to remove in every layer under a policy, validated against every
/// router's top_k before anything is modified.
inline std::vector<std::set<int>> plan_pruning(const Model& model, const UsageFrequency& usage,
                                               const PrunePolicy& policy) {
  const auto layers = model.moe_layers();
  std::vector<std::set<int>> plan(layers.size());
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const LayerUsage& u = usage.at(l);
    if (policy.kind == PrunePolicy::Kind::Fraction) {
      if (!(policy.value >= 0.0 && policy.value < 1.0)) throw StructuralError("prune fraction must lie in [0, 1)");
      const auto count = static_cast<std::size_t>(std::llround(policy.value * static_cast<double>(u.expert_ids.size())));
      const auto order = rank_by_usage(u, true);
      for (std::size_t i = 0; i < count; ++i) plan[l].insert(u.expert_ids[order[i]]);
    } else {
      for (std::size_t p = 0; p < u.expert_ids.size(); ++p) {
        if (u.frequency[p] < policy.value) plan[l].insert(u.expert_ids[p]);
      }
    }
    for (const auto& [ds, r] : layers[l]->routers) {
      std::size_t left = 0;
      for (int id : r.expert_ids) left += plan[l].count(id) ? 0 : 1;
      if (left < r.top_k) {
        throw StructuralError("pruning would leave router for dataset " + std::to_string(ds) + " in moe layer " +
                              std::to_string(l) + " with " + std::to_string(left) + " experts, below top_k " +
                              std::to_string(r.top_k));
      }
    }
  }
  return plan;
}

inline void run_training(Model& model, const Dataset& ds, TrainState& state, const TrainConfig& cfg, std::size_t until) {
  const Dataset* active[] = {&ds};
  TrainConfig c = cfg;
  validate(c);
  while (state.iter < std::min(until, c.total_iters)) train_step(model, active, state, c);
}

inline AdaptReport begin_report(std::string mode, Model& model, const Dataset& ds) {
  AdaptReport rep;
  rep.mode = std::move(mode);
  rep.dataset_id = ds.spec.dataset_id;
  rep.reference_evals_per_sample = reference_evals(model);
  rep.metrics_before = evaluate(model, ds, Split::Test);
  return rep;
}

inline void finish_report(AdaptReport& rep, Model& model, const Dataset& ds) {
  rep.model_params = param_count(model, ParamSelector::All);
  rep.expert_evals_per_sample = expert_evals_per_sample(model, ds.spec.dataset_id);
  rep.metrics_after = evaluate(model, ds, Split::Test);
  rep.per_layer_usage = rep.metrics_after.usage;
}

/// Average selection frequency of the pool under the routers of every
/// registered dataset except `exclude`, each on its own training split. This
/// is how often the pretrained routers choose each expert.
inline UsageFrequency pretrain_usage(Model& model, int exclude) {
  UsageFrequency total;
  std::size_t count = 0;
  for (const auto& [id, spec] : model.datasets) {
    if (id == exclude) continue;
    const UsageFrequency u = measure_usage(model, make_dataset(spec), Split::Train);
    if (total.empty()) {
      total = u;
    } else {
      for (std::size_t l = 0; l < u.size(); ++l) {
        for (std::size_t p = 0; p < u[l].frequency.size(); ++p) total[l].frequency[p] += u[l].frequency[p];
      }
    }
    ++count;
  }
  if (count == 0) throw MissingEntityError("no pretraining dataset to measure expert usage on");
  for (auto& layer : total) {
    for (auto& f : layer.frequency) f /= static_cast<double>(count);
  }
  return total;
}

/// Per layer, `k` experts chosen by `policy`. Random selection is seeded by
/// the budget seed; the usage-based policies rank experts by how often the
/// pretrained routers select them.
inline std::vector<std::vector<int>> choose_experts(Model& model, int target, std::size_t k, SelectionPolicy policy,
                                                    std::uint64_t seed) {
  std::vector<std::vector<int>> chosen;
  if (k == 0) return chosen;
  Rng rng(mix_seed(seed, 0x5E1EC7, target));
  const auto layers = model.moe_layers();
  UsageFrequency usage;
  if (policy != SelectionPolicy::Random) {
    usage = pretrain_usage(model, target);
  } else {
    for (const auto* layer : layers) usage.push_back({layer->expert_ids(), std::vector<double>(layer->n_experts(), 0.0)});
  }
  for (std::size_t l = 0; l < layers.size(); ++l) chosen.push_back(select_experts(usage[l], k, policy, rng));
  return chosen;
}

}  // namespace detail

/// Learns new routers and a head for an unseen dataset; all other
/// parameters stay frozen.
inline AdaptReport adapt_router_only(Model& model, const Dataset& ds, const Budget& budget) {
  register_dataset(model, ds.spec);
  set_all_frozen(model, true);
  detail::unfreeze_dataset(model, ds.spec.dataset_id);
  AdaptReport rep = detail::begin_report("router_only", model, ds);
  rep.trainable_params = trainable_param_count(model);
  TrainState state = make_train_state(budget.train.seed);
  detail::run_training(model, ds, state, budget.train, budget.train.total_iters);
  detail::finish_report(rep, model, ds);
  return rep;
}

/// New routers plus `k_experts` fine-tuned experts per layer, all trained
/// together from the first step.
inline AdaptReport adapt_router_plus(Model& model, const Dataset& ds, std::size_t k_experts, SelectionPolicy selection,
                                     const Budget& budget) {
  for (const auto* layer : model.moe_layers()) {
    if (k_experts > layer->n_experts()) {
      throw StructuralError("router_plus: k_experts " + std::to_string(k_experts) + " exceeds pool of " +
                            std::to_string(layer->n_experts()));
    }
  }
  register_dataset(model, ds.spec);
  set_all_frozen(model, true);
  detail::unfreeze_dataset(model, ds.spec.dataset_id);
  AdaptReport rep = detail::begin_report("router_plus", model, ds);
  rep.tuned_experts =
      detail::choose_experts(model, ds.spec.dataset_id, k_experts, selection, budget.train.seed);
  auto layers = model.moe_layers();
  for (std::size_t l = 0; l < rep.tuned_experts.size(); ++l) set_experts_frozen(*layers[l], rep.tuned_experts[l], false);
  TrainState state = make_train_state(budget.train.seed);
  detail::run_training(model, ds, state, budget.train, budget.train.total_iters);
  rep.trainable_params = trainable_param_count(model);
  detail::finish_report(rep, model, ds);
  return rep;
}

/// Registers a new dataset and fine-tunes every parameter (the full
/// fine-tuning reference point).
inline AdaptReport adapt_full(Model& model, const Dataset& ds, const Budget& budget) {
  register_dataset(model, ds.spec);
  set_all_frozen(model, false);
  AdaptReport rep = detail::begin_report("full_finetune", model, ds);
  rep.trainable_params = trainable_param_count(model);
  TrainState state = make_train_state(budget.train.seed);
  detail::run_training(model, ds, state, budget.train, budget.train.total_iters);
  detail::finish_report(rep, model, ds);
  return rep;
}

/// Removes rarely used experts (measured on the target's training split) and
/// fine-tunes the whole remaining model on the target dataset.
inline AdaptReport prune_then_finetune(Model& model, const Dataset& ds, const PrunePolicy& policy, const Budget& budget) {
  const int id = ds.spec.dataset_id;
  if (!model.knows(id)) throw MissingEntityError("prune: dataset " + std::to_string(id) + " is not registered");
  AdaptReport rep = detail::begin_report(policy.kind == PrunePolicy::Kind::Fraction ? "prune_fraction" : "prune_threshold",
                                         model, ds);
  const UsageFrequency usage = measure_usage(model, ds, Split::Train);
  const auto plan = detail::plan_pruning(model, usage, policy);
  auto layers = model.moe_layers();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    remove_experts(*layers[l], plan[l]);
    rep.removed_experts.emplace_back(plan[l].begin(), plan[l].end());
  }
  set_all_frozen(model, false);
  rep.trainable_params = trainable_param_count(model);
  TrainState state = make_train_state(budget.train.seed);
  detail::run_training(model, ds, state, budget.train, budget.train.total_iters);
  detail::finish_report(rep, model, ds);
  return rep;
}

/// Relearns the dataset's routers from scratch with a smaller top_k while
/// everything except routers and head stays frozen.
inline AdaptReport topk_reduce(Model& model, const Dataset& ds, std::size_t new_k, const Budget& budget) {
  const int id = ds.spec.dataset_id;
  if (new_k == 0) throw ConfigError("topk_reduce: new_k must be at least 1");
  if (!model.knows(id)) throw MissingEntityError("topk_reduce: dataset " + std::to_string(id) + " is not registered");
  for (const auto* layer : model.moe_layers()) {
    if (new_k >= layer->router(id).top_k) {
      throw StructuralError("topk_reduce: new_k " + std::to_string(new_k) + " is not below current top_k " +
                            std::to_string(layer->router(id).top_k));
    }
  }
  AdaptReport rep = detail::begin_report("topk_reduce", model, ds);
  reinit_routers(model, id, new_k, 0x70CC + new_k);
  set_all_frozen(model, true);
  detail::unfreeze_dataset(model, id);
  rep.trainable_params = trainable_param_count(model);
  TrainState state = make_train_state(budget.train.seed);
  detail::run_training(model, ds, state, budget.train, budget.train.total_iters);
  detail::finish_report(rep, model, ds);
  return rep;
}

struct HybridRecipe {
  std::string name;
  std::size_t k_experts = 1;
  double prune_fraction = 2.0 / 3.0;
  std::size_t new_k = 2;

  /// Router + 1 expert, prune 2/3, Top-K 2.
  static HybridRecipe a() { return {"A", 1, 2.0 / 3.0, 2}; }
  /// Router + 2 experts, prune 2/3, Top-K 3.
  static HybridRecipe b() { return {"B", 2, 2.0 / 3.0, 3}; }
};

/// Register with the reduced top_k, learn routers, prune by usage, then
/// fine-tune routers together with k experts per layer.
inline AdaptReport hybrid(Model& model, const Dataset& ds, const HybridRecipe& recipe, const Budget& budget) {
  for (const auto* layer : model.moe_layers()) {
    const auto survivors = layer->n_experts() -
                           static_cast<std::size_t>(std::llround(recipe.prune_fraction * static_cast<double>(layer->n_experts())));
    if (recipe.k_experts > survivors || recipe.new_k > survivors) {
      throw StructuralError("hybrid " + recipe.name + ": recipe needs more experts than survive pruning");
    }
  }
  register_dataset(model, ds.spec, recipe.new_k);
  set_all_frozen(model, true);
  detail::unfreeze_dataset(model, ds.spec.dataset_id);
  AdaptReport rep = detail::begin_report("hybrid_" + recipe.name, model, ds);
  TrainState state = make_train_state(budget.train.seed);
  const auto warm = static_cast<std::size_t>(budget.router_warmup_frac * static_cast<double>(budget.train.total_iters));
  detail::run_training(model, ds, state, budget.train, warm);
  const UsageFrequency usage = measure_usage(model, ds, Split::Train);
  const auto plan = detail::plan_pruning(model, usage, PrunePolicy::fraction(recipe.prune_fraction));
  auto layers = model.moe_layers();
  Rng rng(mix_seed(budget.train.seed, 0x5E1EC7, ds.spec.dataset_id));
  for (std::size_t l = 0; l < layers.size(); ++l) {
    remove_experts(*layers[l], plan[l]);
    rep.removed_experts.emplace_back(plan[l].begin(), plan[l].end());
    LayerUsage left;
    for (std::size_t p = 0; p < usage[l].expert_ids.size(); ++p) {
      if (plan[l].count(usage[l].expert_ids[p])) continue;
      left.expert_ids.push_back(usage[l].expert_ids[p]);
      left.frequency.push_back(usage[l].frequency[p]);
    }
    rep.tuned_experts.push_back(detail::select_experts(left, recipe.k_experts, SelectionPolicy::Random, rng));
    set_experts_frozen(*layers[l], rep.tuned_experts.back(), false);
  }
  rep.trainable_params = trainable_param_count(model);
  detail::run_training(model, ds, state, budget.train, budget.train.total_iters);
  detail::finish_report(rep, model, ds);
  return rep;
}

/// Adds `c_new_experts` experts per layer plus routers and a head for a new
/// dataset and trains only those. Routers of earlier datasets have no
/// columns for the new experts, so earlier outputs cannot change.
inline AdaptReport continual_step(Model& model, const Dataset& ds, std::size_t c_new_experts, const Budget& budget) {
  if (model.knows(ds.spec.dataset_id)) {
    throw StructuralError("continual_step: dataset " + std::to_string(ds.spec.dataset_id) + " is already registered");
  }
  std::vector<std::vector<int>> added;
  if (c_new_experts > 0) {
    for (auto* layer : model.moe_layers()) {
      added.push_back(add_experts(*layer, c_new_experts, mix_seed(model.config.init_seed, 0xADD, ds.spec.dataset_id)));
    }
  }
  register_dataset(model, ds.spec);
  set_all_frozen(model, true);
  detail::unfreeze_dataset(model, ds.spec.dataset_id);
  auto layers = model.moe_layers();
  for (std::size_t l = 0; l < added.size(); ++l) set_experts_frozen(*layers[l], added[l], false);
  AdaptReport rep = detail::begin_report("continual", model, ds);
  rep.added_experts = added;
  rep.trainable_params = trainable_param_count(model);
  TrainState state = make_train_state(budget.train.seed);
  detail::run_training(model, ds, state, budget.train, budget.train.total_iters);
  detail::finish_report(rep, model, ds);
  return rep;
}

}  // namespace hetmoe
