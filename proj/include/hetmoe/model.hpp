#pragma once

// Shared residual backbone (dense blocks, MoE blocks) with one head per
// dataset; forward dispatch by dataset id and parameter accounting.

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hetmoe/error.hpp"
#include "hetmoe/moe.hpp"
#include "hetmoe/synthdata.hpp"

namespace hetmoe {

struct ModelConfig {
  std::size_t input_dim = 16;
  std::size_t d = 64;
  std::size_t n_blocks = 4;
  /// Block b carries an MoE layer when (b + 1) % moe_every == 0.
  std::size_t moe_every = 1;
  std::size_t n_experts = 12;
  std::size_t top_k = 4;
  /// Per-forward hidden budget; expert width is hidden_budget / top_k when
  /// flops_matched is set.
  std::size_t hidden_budget = 256;
  bool flops_matched = true;
  /// Expert width when flops_matched is off.
  std::size_t expert_hidden = 64;
  std::uint64_t init_seed = 1;

  std::size_t expert_width() const { return flops_matched ? hidden_budget / top_k : expert_hidden; }
  bool has_moe(std::size_t block) const { return (block + 1) % moe_every == 0; }
};

inline void validate(const ModelConfig& c) {
  if (c.input_dim < 1 || c.d < 1) throw ConfigError("model: widths must be positive");
  if (c.n_blocks < 1) throw ConfigError("model: n_blocks must be positive");
  if (c.moe_every < 1) throw ConfigError("model: moe_every must be positive");
  if (c.top_k < 1 || c.top_k > c.n_experts) {
    throw ConfigError("model: need n_experts >= top_k >= 1, got n_experts=" + std::to_string(c.n_experts) +
                      " top_k=" + std::to_string(c.top_k));
  }
  if (c.flops_matched && (c.hidden_budget % c.top_k != 0 || c.hidden_budget < c.top_k)) {
    throw ConfigError("model: hidden_budget " + std::to_string(c.hidden_budget) + " is not divisible by top_k " +
                      std::to_string(c.top_k));
  }
  if (!c.flops_matched && c.expert_hidden < 1) throw ConfigError("model: expert_hidden must be positive");
}

struct Linear {
  Parameter weight;
  Parameter bias;

  std::size_t param_count() const { return weight.size() + bias.size(); }
  void set_frozen(bool flag) { weight.frozen = bias.frozen = flag; }
};

inline Linear make_linear(std::size_t in, std::size_t out, std::uint64_t seed) {
  Rng rng(seed);
  Linear l;
  l.weight = Parameter(uniform_init({in, out}, in, rng));
  l.bias = Parameter(uniform_init({out}, in, rng));
  return l;
}

inline Var linear_forward(Tape& tape, Linear& l, Var x) {
  return ndgrad::add_bias(ndgrad::matmul(x, tape.param(l.weight)), tape.param(l.bias));
}

struct Block {
  Linear dense;
  std::optional<MoELayer> moe;
};

struct Head {
  TaskKind kind = TaskKind::Classification;
  Linear linear;
};

struct Model {
  ModelConfig config;
  Linear embed;
  std::vector<Block> blocks;
  std::map<int, Head> heads;
  /// Specs of every registered dataset, used to regenerate data.
  std::map<int, DatasetSpec> datasets;

  Model() = default;

  explicit Model(const ModelConfig& cfg) : config(cfg) {
    validate(cfg);
    embed = make_linear(cfg.input_dim, cfg.d, mix_seed(cfg.init_seed, 0xE3B));
    int layer_id = 0;
    for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
      Block blk;
      blk.dense = make_linear(cfg.d, cfg.d, mix_seed(cfg.init_seed, 0xDE5, b));
      if (cfg.has_moe(b)) blk.moe.emplace(layer_id++, cfg.d, cfg.expert_width(), cfg.n_experts, cfg.init_seed);
      blocks.push_back(std::move(blk));
    }
  }

  std::vector<MoELayer*> moe_layers() {
    std::vector<MoELayer*> out;
    for (auto& b : blocks) {
      if (b.moe) out.push_back(&*b.moe);
    }
    return out;
  }

  std::vector<const MoELayer*> moe_layers() const {
    std::vector<const MoELayer*> out;
    for (const auto& b : blocks) {
      if (b.moe) out.push_back(&*b.moe);
    }
    return out;
  }

  bool knows(int dataset_id) const { return heads.count(dataset_id) > 0; }

  const DatasetSpec& spec(int dataset_id) const {
    const auto it = datasets.find(dataset_id);
    if (it == datasets.end()) throw MissingEntityError("model has no dataset " + std::to_string(dataset_id));
    return it->second;
  }
};

struct ForwardResult {
  Var output;
  /// One entry per MoE layer, in depth order.
  std::vector<MoEOutput> moe;
  /// Output of every block, for diagnostics.
  std::vector<Var> block_outputs;
};

/// embed -> blocks (x + tanh(dense(x)), or x + moe(tanh(dense(x)))) -> head.
inline ForwardResult forward(Tape& tape, Model& model, const Tensor& x, int dataset_id) {
  const auto head_it = model.heads.find(dataset_id);
  if (head_it == model.heads.end()) {
    throw MissingEntityError("forward: no head registered for dataset " + std::to_string(dataset_id));
  }
  if (x.rank() != 2 || x.cols() != model.config.input_dim) {
    throw DimensionError("forward: input " + ndgrad::shape_str(x.shape()) + " does not have width " +
                         std::to_string(model.config.input_dim));
  }
  ForwardResult res;
  Var h = linear_forward(tape, model.embed, tape.constant(x));
  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    auto& blk = model.blocks[b];
    try {
      const Var a = ndgrad::tanh(linear_forward(tape, blk.dense, h));
      if (blk.moe) {
        res.moe.push_back(moe_forward(tape, *blk.moe, a, dataset_id));
        h = ndgrad::add(h, res.moe.back().output);
      } else {
        h = ndgrad::add(h, a);
      }
    } catch (const NumericError& e) {
      throw NumericError("block " + std::to_string(b) +
                         (blk.moe ? " (moe layer " + std::to_string(blk.moe->layer_id) + ")" : std::string()) + ": " +
                         e.what());
    }
    res.block_outputs.push_back(h);
  }
  res.output = linear_forward(tape, head_it->second.linear, h);
  return res;
}

inline ForwardResult forward(Tape& tape, Model& model, const Batch& batch) {
  return forward(tape, model, batch.x, batch.dataset_id);
}

enum class ParamSelector { All, Backbone, Routers, Experts, Heads };

/// Exact parameter counts. Backbone covers everything except routers and
/// heads (embedding, dense layers and experts), so
/// All = Backbone + Routers + Heads.
inline std::size_t param_count(const Model& m, ParamSelector sel) {
  std::size_t embed_dense = m.embed.param_count();
  std::size_t experts = 0, routers = 0, heads = 0;
  for (const auto& b : m.blocks) {
    embed_dense += b.dense.param_count();
    if (!b.moe) continue;
    for (const auto& e : b.moe->experts) experts += e.param_count();
    for (const auto& [ds, r] : b.moe->routers) routers += r.w_g.size();
  }
  for (const auto& [ds, h] : m.heads) heads += h.linear.param_count();
  switch (sel) {
    case ParamSelector::All: return embed_dense + experts + routers + heads;
    case ParamSelector::Backbone: return embed_dense + experts;
    case ParamSelector::Routers: return routers;
    case ParamSelector::Experts: return experts;
    case ParamSelector::Heads: return heads;
  }
  return 0;
}

struct NamedParam {
  std::string name;
  Parameter* param = nullptr;
};

/// Every parameter with a stable name, in a fixed traversal order.
inline std::vector<NamedParam> parameters(Model& m) {
  std::vector<NamedParam> out;
  out.push_back({"embed.weight", &m.embed.weight});
  out.push_back({"embed.bias", &m.embed.bias});
  for (std::size_t b = 0; b < m.blocks.size(); ++b) {
    auto& blk = m.blocks[b];
    const std::string pre = "block" + std::to_string(b);
    out.push_back({pre + ".dense.weight", &blk.dense.weight});
    out.push_back({pre + ".dense.bias", &blk.dense.bias});
    if (!blk.moe) continue;
    for (auto& e : blk.moe->experts) {
      const std::string ep = pre + ".expert" + std::to_string(e.id);
      out.push_back({ep + ".w1", &e.w1});
      out.push_back({ep + ".b1", &e.b1});
      out.push_back({ep + ".w2", &e.w2});
      out.push_back({ep + ".b2", &e.b2});
    }
    for (auto& [ds, r] : blk.moe->routers) out.push_back({pre + ".router" + std::to_string(ds) + ".w_g", &r.w_g});
  }
  for (auto& [ds, h] : m.heads) {
    out.push_back({"head" + std::to_string(ds) + ".weight", &h.linear.weight});
    out.push_back({"head" + std::to_string(ds) + ".bias", &h.linear.bias});
  }
  return out;
}

inline std::size_t trainable_param_count(Model& m) {
  std::size_t n = 0;
  for (const auto& p : parameters(m)) n += p.param->frozen ? 0 : p.param->size();
  return n;
}

inline void set_all_frozen(Model& m, bool flag) {
  for (auto& p : parameters(m)) p.param->frozen = flag;
}

/// Adds one router per MoE layer (over the current pool) and one head for a
/// new dataset, and a buffer row in every layer.
inline void register_dataset(Model& m, const DatasetSpec& spec, std::optional<std::size_t> top_k_override = {},
                             std::uint64_t salt = 0) {
  if (m.knows(spec.dataset_id)) {
    throw StructuralError("dataset " + std::to_string(spec.dataset_id) + " is already registered");
  }
  validate(spec);
  if (spec.input_dim != m.config.input_dim) {
    throw ConfigError("dataset " + std::to_string(spec.dataset_id) + " has input_dim " +
                      std::to_string(spec.input_dim) + ", model expects " + std::to_string(m.config.input_dim));
  }
  const std::size_t k = top_k_override.value_or(m.config.top_k);
  for (auto* layer : m.moe_layers()) {
    if (k < 1 || k > layer->n_experts()) {
      throw StructuralError("top_k " + std::to_string(k) + " is not admissible for a pool of " +
                            std::to_string(layer->n_experts()) + " experts");
    }
  }
  const std::uint64_t seed = mix_seed(m.config.init_seed, 0x2017E2, salt);
  for (auto* layer : m.moe_layers()) add_router(*layer, spec.dataset_id, k, seed);
  Head h;
  h.kind = spec.task;
  h.linear = make_linear(m.config.d, spec.head_width(), mix_seed(m.config.init_seed, 0x4EAD, spec.dataset_id, salt));
  m.heads.emplace(spec.dataset_id, std::move(h));
  m.datasets[spec.dataset_id] = spec;
}

/// Replaces a dataset's routers with freshly initialised ones using `top_k`.
/// The head and buffer rows are kept.
inline void reinit_routers(Model& m, int dataset_id, std::size_t top_k, std::uint64_t salt) {
  if (!m.knows(dataset_id)) throw MissingEntityError("no dataset " + std::to_string(dataset_id));
  const std::uint64_t seed = mix_seed(m.config.init_seed, 0x2017E2, salt);
  for (auto* layer : m.moe_layers()) {
    if (top_k < 1 || top_k > layer->n_experts()) {
      throw StructuralError("top_k " + std::to_string(top_k) + " is not admissible for a pool of " +
                            std::to_string(layer->n_experts()) + " experts");
    }
  }
  for (auto* layer : m.moe_layers()) {
    layer->routers.erase(dataset_id);
    add_router(*layer, dataset_id, top_k, seed);
  }
}

}  // namespace hetmoe
