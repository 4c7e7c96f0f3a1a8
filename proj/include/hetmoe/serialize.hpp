#pragma once

// JSON run configuration (strict schema), checkpoints, metrics records and
// adaptation reports.

#include <concepts>
#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "hetmoe/adapt.hpp"
#include "hetmoe/error.hpp"
#include "hetmoe/model.hpp"
#include "hetmoe/synthdata.hpp"
#include "hetmoe/trainer.hpp"

namespace hetmoe {

using json = nlohmann::json;

inline constexpr int kSchemaVersion = 1;

// ---------------------------------------------------------------------------
// Strict object reader

/// Reads keys from a JSON object and remembers which were consumed, so that
/// finish() can reject anything left over (typo safety). Error messages
/// carry a JSONPath-like location such as `$.datasets[1].noise`.
class StrictObject {
 public:
  StrictObject(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  const std::string& path() const { return path_; }
  std::string at(const std::string& key) const { return path_ + "." + key; }
  bool has(const std::string& key) const { return j_.contains(key); }

  const json& raw(const std::string& key) {
    if (!j_.contains(key)) throw ConfigError(at(key) + ": required key is missing");
    seen_.insert(key);
    return j_.at(key);
  }

  const json* optional(const std::string& key) {
    if (!j_.contains(key)) return nullptr;
    seen_.insert(key);
    return &j_.at(key);
  }

  template <std::unsigned_integral T>
    requires(!std::same_as<T, bool>)
  void read(const std::string& key, T& out) {
    if (const json* v = optional(key)) {
      if (!v->is_number_integer() || (!v->is_number_unsigned() && v->get<std::int64_t>() < 0)) {
        throw ConfigError(at(key) + ": expected a non-negative integer");
      }
      out = v->get<T>();
    }
  }
  void read(const std::string& key, int& out) {
    if (const json* v = optional(key)) {
      if (!v->is_number_integer()) throw ConfigError(at(key) + ": expected an integer");
      out = v->get<int>();
    }
  }
  void read(const std::string& key, double& out) {
    if (const json* v = optional(key)) {
      if (!v->is_number()) throw ConfigError(at(key) + ": expected a number");
      out = v->get<double>();
    }
  }
  void read(const std::string& key, bool& out) {
    if (const json* v = optional(key)) {
      if (!v->is_boolean()) throw ConfigError(at(key) + ": expected true or false");
      out = v->get<bool>();
    }
  }
  void read(const std::string& key, std::string& out) {
    if (const json* v = optional(key)) {
      if (!v->is_string()) throw ConfigError(at(key) + ": expected a string");
      out = v->get<std::string>();
    }
  }

  /// Reads a string key and converts it with `parse`, re-labelling parse
  /// errors with the key path.
  template <class T, class Parse>
  void read_enum(const std::string& key, T& out, Parse parse) {
    std::string s;
    read(key, s);
    if (!has(key)) return;
    try {
      out = parse(s);
    } catch (const ConfigError& e) {
      throw ConfigError(at(key) + ": " + e.what());
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(at(it.key()) + ": unknown key");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <class Fn>
auto with_path(const std::string& path, Fn fn) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Run configuration

struct AdaptPlan {
  /// router_only | router_plus | full_finetune | prune | topk_reduce | hybrid
  std::string mode = "router_only";
  /// New dataset for modes that register one.
  std::optional<DatasetSpec> dataset;
  /// Registered target for prune and topk_reduce.
  int dataset_id = 0;
  std::size_t k_experts = 1;
  SelectionPolicy selection = SelectionPolicy::Random;
  PrunePolicy prune = PrunePolicy::fraction(0.5);
  std::size_t new_k = 2;
  HybridRecipe recipe = HybridRecipe::a();
  Budget budget;
};

struct ExpandPlan {
  DatasetSpec dataset;
  std::size_t c = 2;
  Budget budget;
};

struct RunConfig {
  int version = kSchemaVersion;
  ModelConfig model;
  std::vector<DatasetSpec> datasets;
  TrainConfig train;
  std::optional<AdaptPlan> adapt;
  std::optional<ExpandPlan> expand;
};

inline ModelConfig parse_model_config(const json& j, const std::string& path) {
  StrictObject o(j, path);
  ModelConfig c;
  o.read("input_dim", c.input_dim);
  o.read("d", c.d);
  o.read("n_blocks", c.n_blocks);
  o.read("moe_every", c.moe_every);
  o.read("n_experts", c.n_experts);
  o.read("top_k", c.top_k);
  o.read("hidden_budget", c.hidden_budget);
  o.read("flops_matched", c.flops_matched);
  o.read("expert_hidden", c.expert_hidden);
  o.read("init_seed", c.init_seed);
  o.finish();
  with_path(path, [&] { validate(c); });
  return c;
}

inline DatasetSpec parse_dataset_spec(const json& j, const std::string& path) {
  StrictObject o(j, path);
  DatasetSpec s;
  o.raw("dataset_id");
  o.read("dataset_id", s.dataset_id);
  o.read("name", s.name);
  o.read_enum("generator", s.generator, parse_generator);
  s.task = s.generator == GeneratorKind::SineRegression ? TaskKind::Regression : TaskKind::Classification;
  o.read_enum("task", s.task, parse_task_kind);
  o.read("input_dim", s.input_dim);
  o.read("classes", s.classes);
  o.read("output_dim", s.output_dim);
  o.read("noise", s.noise);
  o.read("seed", s.seed);
  o.read("transform_seed", s.transform_seed);
  o.read("radius_offset", s.radius_offset);
  o.read("n_train", s.n_train);
  o.read("n_test", s.n_test);
  o.read("w_sample", s.w_sample);
  o.read("w_loss", s.w_loss);
  o.read("batch_size", s.batch_size);
  o.finish();
  with_path(path, [&] { validate(s); });
  return s;
}

inline void read_train_keys(StrictObject& o, TrainConfig& c) {
  o.read("total_iters", c.total_iters);
  o.read("peak_lr", c.peak_lr);
  o.read("warmup_frac", c.warmup_frac);
  o.read("clip_norm", c.clip_norm);
  o.read("lambda_mi", c.lambda_mi);
  o.read_enum("optimizer", c.optimizer, parse_optimizer);
  o.read("momentum", c.momentum);
  o.read("beta1", c.beta1);
  o.read("beta2", c.beta2);
  o.read("eps", c.eps);
  o.read("seed", c.seed);
}

inline TrainConfig parse_train_config(const json& j, const std::string& path) {
  StrictObject o(j, path);
  TrainConfig c;
  read_train_keys(o, c);
  o.finish();
  with_path(path, [&] { validate(c); });
  return c;
}

inline Budget parse_budget(const json& j, const std::string& path) {
  StrictObject o(j, path);
  Budget b;
  read_train_keys(o, b.train);
  o.read("router_warmup_frac", b.router_warmup_frac);
  o.finish();
  with_path(path, [&] { validate(b.train); });
  if (!(b.router_warmup_frac >= 0.0 && b.router_warmup_frac < 1.0)) {
    throw ConfigError(o.at("router_warmup_frac") + ": must lie in [0, 1)");
  }
  return b;
}

inline PrunePolicy parse_prune_policy(const json& j, const std::string& path) {
  StrictObject o(j, path);
  std::string kind = "fraction";
  o.read("kind", kind);
  PrunePolicy p;
  if (kind == "fraction") {
    p.kind = PrunePolicy::Kind::Fraction;
  } else if (kind == "threshold") {
    p.kind = PrunePolicy::Kind::Threshold;
  } else {
    throw ConfigError(o.at("kind") + ": expected 'fraction' or 'threshold', got '" + kind + "'");
  }
  o.raw("value");
  o.read("value", p.value);
  o.finish();
  return p;
}

inline HybridRecipe parse_recipe(const json& j, const std::string& path) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "A") return HybridRecipe::a();
    if (s == "B") return HybridRecipe::b();
    throw ConfigError(path + ": unknown hybrid recipe '" + s + "' (expected A, B or an object)");
  }
  StrictObject o(j, path);
  HybridRecipe r;
  r.name = "custom";
  o.read("name", r.name);
  o.read("k_experts", r.k_experts);
  o.read("prune_fraction", r.prune_fraction);
  o.read("new_k", r.new_k);
  o.finish();
  return r;
}

inline const std::set<std::string>& adapt_modes() {
  static const std::set<std::string> modes = {"router_only", "router_plus", "full_finetune",
                                              "prune",       "topk_reduce", "hybrid"};
  return modes;
}

inline bool mode_registers_dataset(const std::string& mode) { return mode != "prune" && mode != "topk_reduce"; }

inline AdaptPlan parse_adapt_plan(const json& j, const std::string& path) {
  StrictObject o(j, path);
  AdaptPlan p;
  o.raw("mode");
  o.read("mode", p.mode);
  if (!adapt_modes().count(p.mode)) throw ConfigError(o.at("mode") + ": unknown adaptation mode '" + p.mode + "'");
  if (mode_registers_dataset(p.mode)) {
    p.dataset = parse_dataset_spec(o.raw("dataset"), o.at("dataset"));
    p.dataset_id = p.dataset->dataset_id;
  } else {
    o.raw("dataset_id");
    o.read("dataset_id", p.dataset_id);
  }
  o.read("k_experts", p.k_experts);
  o.read_enum("selection", p.selection, parse_selection);
  if (const json* v = o.optional("prune")) p.prune = parse_prune_policy(*v, o.at("prune"));
  o.read("new_k", p.new_k);
  if (const json* v = o.optional("recipe")) p.recipe = parse_recipe(*v, o.at("recipe"));
  if (const json* v = o.optional("budget")) p.budget = parse_budget(*v, o.at("budget"));
  o.finish();
  return p;
}

inline ExpandPlan parse_expand_plan(const json& j, const std::string& path) {
  StrictObject o(j, path);
  ExpandPlan p;
  p.dataset = parse_dataset_spec(o.raw("dataset"), o.at("dataset"));
  o.read("c", p.c);
  if (const json* v = o.optional("budget")) p.budget = parse_budget(*v, o.at("budget"));
  o.finish();
  return p;
}

inline RunConfig parse_run_config(const json& j) {
  StrictObject o(j, "$");
  RunConfig rc;
  const json& v = o.raw("version");
  if (!v.is_number_integer() || v.get<int>() != kSchemaVersion) {
    throw ConfigError("$.version: unsupported schema version " + v.dump() + " (expected 1)");
  }
  if (const json* m = o.optional("model")) rc.model = parse_model_config(*m, "$.model");
  if (const json* ds = o.optional("datasets")) {
    if (!ds->is_array()) throw ConfigError("$.datasets: expected an array");
    std::set<int> ids;
    for (std::size_t i = 0; i < ds->size(); ++i) {
      const std::string p = "$.datasets[" + std::to_string(i) + "]";
      rc.datasets.push_back(parse_dataset_spec((*ds)[i], p));
      if (!ids.insert(rc.datasets.back().dataset_id).second) {
        throw ConfigError(p + ".dataset_id: duplicate dataset id " + std::to_string(rc.datasets.back().dataset_id));
      }
    }
  }
  if (const json* t = o.optional("train")) rc.train = parse_train_config(*t, "$.train");
  if (const json* a = o.optional("adapt")) rc.adapt = parse_adapt_plan(*a, "$.adapt");
  if (const json* e = o.optional("expand")) rc.expand = parse_expand_plan(*e, "$.expand");
  o.finish();
  for (std::size_t i = 0; i < rc.datasets.size(); ++i) {
    if (rc.datasets[i].input_dim != rc.model.input_dim) {
      throw ConfigError("$.datasets[" + std::to_string(i) + "].input_dim: " + std::to_string(rc.datasets[i].input_dim) +
                        " does not match $.model.input_dim " + std::to_string(rc.model.input_dim));
    }
  }
  return rc;
}

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("'" + path + "' is not valid JSON: " + e.what());
  }
}

inline RunConfig load_run_config(const std::string& path) {
  return with_path(path, [&] { return parse_run_config(read_json_file(path)); });
}

// ---------------------------------------------------------------------------
// Canonical JSON forms

inline json to_json(const ModelConfig& c) {
  return {{"input_dim", c.input_dim},         {"d", c.d},
          {"n_blocks", c.n_blocks},           {"moe_every", c.moe_every},
          {"n_experts", c.n_experts},         {"top_k", c.top_k},
          {"hidden_budget", c.hidden_budget}, {"flops_matched", c.flops_matched},
          {"expert_hidden", c.expert_hidden}, {"init_seed", c.init_seed}};
}

inline json to_json(const DatasetSpec& s) {
  return {{"dataset_id", s.dataset_id},
          {"name", s.name},
          {"task", to_string(s.task)},
          {"generator", to_string(s.generator)},
          {"input_dim", s.input_dim},
          {"classes", s.classes},
          {"output_dim", s.output_dim},
          {"noise", s.noise},
          {"seed", s.seed},
          {"transform_seed", s.transform_seed},
          {"radius_offset", s.radius_offset},
          {"n_train", s.n_train},
          {"n_test", s.n_test},
          {"w_sample", s.w_sample},
          {"w_loss", s.w_loss},
          {"batch_size", s.batch_size}};
}

inline void write_train_keys(json& j, const TrainConfig& c) {
  j["total_iters"] = c.total_iters;
  j["peak_lr"] = c.peak_lr;
  j["warmup_frac"] = c.warmup_frac;
  j["clip_norm"] = c.clip_norm;
  j["lambda_mi"] = c.lambda_mi;
  j["optimizer"] = to_string(c.optimizer);
  j["momentum"] = c.momentum;
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["eps"] = c.eps;
  j["seed"] = c.seed;
}

inline json to_json(const TrainConfig& c) {
  json j = json::object();
  write_train_keys(j, c);
  return j;
}

inline json to_json(const Budget& b) {
  json j = json::object();
  write_train_keys(j, b.train);
  j["router_warmup_frac"] = b.router_warmup_frac;
  return j;
}

inline json to_json(const AdaptPlan& p) {
  json j = {{"mode", p.mode}, {"budget", to_json(p.budget)}};
  if (p.dataset) {
    j["dataset"] = to_json(*p.dataset);
  } else {
    j["dataset_id"] = p.dataset_id;
  }
  j["k_experts"] = p.k_experts;
  j["selection"] = to_string(p.selection);
  j["prune"] = {{"kind", p.prune.kind == PrunePolicy::Kind::Fraction ? "fraction" : "threshold"},
                {"value", p.prune.value}};
  j["new_k"] = p.new_k;
  j["recipe"] = {{"name", p.recipe.name},
                 {"k_experts", p.recipe.k_experts},
                 {"prune_fraction", p.recipe.prune_fraction},
                 {"new_k", p.recipe.new_k}};
  return j;
}

inline json to_json(const RunConfig& rc) {
  json j = {{"version", rc.version}, {"model", to_json(rc.model)}, {"train", to_json(rc.train)}};
  j["datasets"] = json::array();
  for (const auto& s : rc.datasets) j["datasets"].push_back(to_json(s));
  if (rc.adapt) j["adapt"] = to_json(*rc.adapt);
  if (rc.expand) {
    j["expand"] = {{"dataset", to_json(rc.expand->dataset)}, {"c", rc.expand->c}, {"budget", to_json(rc.expand->budget)}};
  }
  return j;
}

inline json to_json(const LayerUsage& u) { return {{"expert_ids", u.expert_ids}, {"frequency", u.frequency}}; }

inline json to_json(const std::vector<LayerUsage>& usage) {
  json j = json::array();
  for (const auto& u : usage) j.push_back(to_json(u));
  return j;
}

inline json to_json(const Metrics& m) {
  json j = {{"dataset_id", m.dataset_id}, {"task", to_string(m.kind)}, {"n", m.n}, {"score", m.score()}};
  if (m.kind == TaskKind::Classification) {
    j["accuracy"] = m.accuracy;
  } else {
    j["mse"] = m.mse;
    j["r2"] = m.r2;
  }
  j["usage"] = to_json(m.usage);
  return j;
}

/// One NDJSON metrics record per training step.
inline json to_json(const StepReport& r) {
  return {{"iter", r.iter},   {"dataset_id", r.dataset_id}, {"task_loss", r.task_loss}, {"mi_loss", r.mi_loss},
          {"lr", r.lr},       {"grad_norm", r.grad_norm},   {"clipped_norm", r.clipped_norm},
          {"usage", r.usage}};
}

inline json to_json(const AdaptReport& r) {
  return {{"mode", r.mode},
          {"dataset_id", r.dataset_id},
          {"trainable_params", r.trainable_params},
          {"model_params", r.model_params},
          {"expert_evals_per_sample", r.expert_evals_per_sample},
          {"reference_evals_per_sample", r.reference_evals_per_sample},
          {"metrics_before", to_json(r.metrics_before)},
          {"metrics_after", to_json(r.metrics_after)},
          {"per_layer_usage", to_json(r.per_layer_usage)},
          {"tuned_experts", r.tuned_experts},
          {"removed_experts", r.removed_experts},
          {"added_experts", r.added_experts}};
}

// ---------------------------------------------------------------------------
// Checkpoints

struct Checkpoint {
  RunConfig config;
  Model model;
  TrainState state;
};

namespace ckpt {

inline json tensor(const Tensor& t) { return {{"shape", t.shape()}, {"data", t.storage()}}; }

inline Tensor tensor(const json& j) {
  Shape shape = j.at("shape").get<Shape>();
  std::vector<double> data = j.at("data").get<std::vector<double>>();
  return Tensor(std::move(shape), std::move(data));
}

inline json param(const Parameter& p) {
  return {{"value", tensor(p.value)},
          {"moment1", p.moment1.storage()},
          {"moment2", p.moment2.storage()},
          {"steps", p.steps},
          {"frozen", p.frozen}};
}

inline Parameter param(const json& j) {
  Parameter p(tensor(j.at("value")));
  p.moment1 = Tensor(p.value.shape(), j.at("moment1").get<std::vector<double>>());
  p.moment2 = Tensor(p.value.shape(), j.at("moment2").get<std::vector<double>>());
  p.steps = j.at("steps").get<std::size_t>();
  p.frozen = j.at("frozen").get<bool>();
  return p;
}

inline json linear(const Linear& l) { return {{"weight", param(l.weight)}, {"bias", param(l.bias)}}; }

inline Linear linear(const json& j) {
  Linear l;
  l.weight = param(j.at("weight"));
  l.bias = param(j.at("bias"));
  return l;
}

inline json layer(const MoELayer& m) {
  json experts = json::array();
  for (const auto& e : m.experts) {
    experts.push_back({{"id", e.id}, {"w1", param(e.w1)}, {"b1", param(e.b1)}, {"w2", param(e.w2)}, {"b2", param(e.b2)}});
  }
  json routers = json::array();
  for (const auto& [ds, r] : m.routers) {
    routers.push_back({{"dataset_id", r.dataset_id},
                       {"top_k", r.top_k},
                       {"n_experts_at_creation", r.n_experts_at_creation},
                       {"expert_ids", r.expert_ids},
                       {"w_g", param(r.w_g)}});
  }
  std::vector<int> init(m.buffer.initialized.begin(), m.buffer.initialized.end());
  json buffer = {{"momentum", m.buffer.momentum},
                 {"dataset_ids", m.buffer.dataset_ids},
                 {"expert_ids", m.buffer.expert_ids},
                 {"rows", m.buffer.rows},
                 {"initialized", init}};
  return {{"layer_id", m.layer_id}, {"d", m.d},           {"hidden", m.hidden},   {"init_seed", m.init_seed},
          {"next_expert_id", m.next_expert_id}, {"experts", experts}, {"routers", routers}, {"buffer", buffer}};
}

inline MoELayer layer(const json& j) {
  MoELayer m;
  m.layer_id = j.at("layer_id").get<int>();
  m.d = j.at("d").get<std::size_t>();
  m.hidden = j.at("hidden").get<std::size_t>();
  m.init_seed = j.at("init_seed").get<std::uint64_t>();
  m.next_expert_id = j.at("next_expert_id").get<int>();
  for (const auto& e : j.at("experts")) {
    Expert x;
    x.id = e.at("id").get<int>();
    x.w1 = param(e.at("w1"));
    x.b1 = param(e.at("b1"));
    x.w2 = param(e.at("w2"));
    x.b2 = param(e.at("b2"));
    m.experts.push_back(std::move(x));
  }
  for (const auto& r : j.at("routers")) {
    Router x;
    x.dataset_id = r.at("dataset_id").get<int>();
    x.top_k = r.at("top_k").get<std::size_t>();
    x.n_experts_at_creation = r.at("n_experts_at_creation").get<std::size_t>();
    x.expert_ids = r.at("expert_ids").get<std::vector<int>>();
    x.w_g = param(r.at("w_g"));
    m.routers.emplace(x.dataset_id, std::move(x));
  }
  const json& b = j.at("buffer");
  m.buffer.momentum = b.at("momentum").get<double>();
  m.buffer.dataset_ids = b.at("dataset_ids").get<std::vector<int>>();
  m.buffer.expert_ids = b.at("expert_ids").get<std::vector<int>>();
  m.buffer.rows = b.at("rows").get<std::vector<std::vector<double>>>();
  for (int f : b.at("initialized").get<std::vector<int>>()) m.buffer.initialized.push_back(f != 0);
  return m;
}

}  // namespace ckpt

inline json model_to_json(const Model& m) {
  json blocks = json::array();
  for (const auto& b : m.blocks) {
    blocks.push_back({{"dense", ckpt::linear(b.dense)}, {"moe", b.moe ? ckpt::layer(*b.moe) : json(nullptr)}});
  }
  json heads = json::array();
  for (const auto& [ds, h] : m.heads) {
    heads.push_back({{"dataset_id", ds}, {"task", to_string(h.kind)}, {"linear", ckpt::linear(h.linear)}});
  }
  json specs = json::array();
  for (const auto& [ds, s] : m.datasets) specs.push_back(to_json(s));
  return {{"config", to_json(m.config)}, {"embed", ckpt::linear(m.embed)}, {"blocks", blocks},
          {"heads", heads},              {"datasets", specs}};
}

inline Model model_from_json(const json& j) {
  Model m;
  m.config = parse_model_config(j.at("config"), "$.model.config");
  m.embed = ckpt::linear(j.at("embed"));
  for (const auto& b : j.at("blocks")) {
    Block blk;
    blk.dense = ckpt::linear(b.at("dense"));
    if (!b.at("moe").is_null()) blk.moe = ckpt::layer(b.at("moe"));
    m.blocks.push_back(std::move(blk));
  }
  for (const auto& h : j.at("heads")) {
    Head head;
    head.kind = parse_task_kind(h.at("task").get<std::string>());
    head.linear = ckpt::linear(h.at("linear"));
    m.heads.emplace(h.at("dataset_id").get<int>(), std::move(head));
  }
  for (const auto& s : j.at("datasets")) {
    DatasetSpec spec = parse_dataset_spec(s, "$.model.datasets");
    m.datasets.emplace(spec.dataset_id, spec);
  }
  return m;
}

inline json state_to_json(const TrainState& s) {
  json cursors = json::array();
  for (const auto& [ds, c] : s.cursors) {
    cursors.push_back({{"dataset_id", ds}, {"seed", c.seed}, {"epoch", c.epoch}, {"position", c.position}});
  }
  const auto& r = s.rng.state();
  return {{"iter", s.iter},
          {"optimizer_steps", s.optimizer_steps},
          {"rng", std::vector<std::uint64_t>(r.begin(), r.end())},
          {"cursors", cursors}};
}

inline TrainState state_from_json(const json& j) {
  TrainState s;
  s.iter = j.at("iter").get<std::size_t>();
  s.optimizer_steps = j.at("optimizer_steps").get<std::size_t>();
  const auto r = j.at("rng").get<std::vector<std::uint64_t>>();
  if (r.size() != 4) throw ConfigError("checkpoint: rng state must have 4 words");
  s.rng.set_state({r[0], r[1], r[2], r[3]});
  // The permutation of each cursor is a pure function of (seed, epoch) and
  // is rebuilt on the next draw.
  for (const auto& c : j.at("cursors")) {
    BatchCursor cur;
    cur.seed = c.at("seed").get<std::uint64_t>();
    cur.epoch = c.at("epoch").get<std::size_t>();
    cur.position = c.at("position").get<std::size_t>();
    s.cursors.emplace(c.at("dataset_id").get<int>(), std::move(cur));
  }
  return s;
}

inline json checkpoint_to_json(const Checkpoint& c) {
  return {{"format", "hetmoe-checkpoint"},
          {"version", kSchemaVersion},
          {"run_config", to_json(c.config)},
          {"model", model_to_json(c.model)},
          {"train_state", state_to_json(c.state)}};
}

inline Checkpoint checkpoint_from_json(const json& j) {
  try {
    if (j.value("format", std::string{}) != "hetmoe-checkpoint") throw ConfigError("not a hetmoe checkpoint");
    if (j.at("version").get<int>() != kSchemaVersion) throw ConfigError("unsupported checkpoint version");
    Checkpoint c;
    c.config = parse_run_config(j.at("run_config"));
    c.model = model_from_json(j.at("model"));
    c.state = state_from_json(j.at("train_state"));
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed checkpoint: ") + e.what());
  }
}

/// Serialized checkpoint text. Doubles are written in the shortest form that
/// parses back to the same bits.
inline std::string checkpoint_text(const Checkpoint& c) { return checkpoint_to_json(c).dump() + "\n"; }

inline void save_checkpoint(const Checkpoint& c, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write checkpoint '" + path + "'");
  out << checkpoint_text(c);
  if (!out) throw ConfigError("failed writing checkpoint '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  return with_path(path, [&] { return checkpoint_from_json(read_json_file(path)); });
}

/// FNV-1a over bytes, for quick checkpoint digests.
inline std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace hetmoe
