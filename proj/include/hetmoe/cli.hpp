#pragma once

// Command implementations behind the `hetmoe` executable. Each command
// returns a process exit status; errors are mapped to codes by
// exit_code_for.

#include <cstdint>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "hetmoe/adapt.hpp"
#include "hetmoe/error.hpp"
#include "hetmoe/gradcheck.hpp"
#include "hetmoe/serialize.hpp"
#include "hetmoe/trainer.hpp"

namespace hetmoe::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kConfig = 2,
  kNumeric = 3,
  kPlan = 4,
  kMissing = 5,
};

inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const DataError*>(&e) ||
      dynamic_cast<const DimensionError*>(&e)) {
    return kConfig;
  }
  if (dynamic_cast<const NumericError*>(&e) || dynamic_cast<const DomainError*>(&e)) return kNumeric;
  if (dynamic_cast<const StructuralError*>(&e)) return kPlan;
  if (dynamic_cast<const MissingEntityError*>(&e)) return kMissing;
  return kFailure;
}

inline const char* exit_label(int code) {
  switch (code) {
    case kConfig: return "config error";
    case kNumeric: return "numeric error";
    case kPlan: return "inadmissible plan";
    case kMissing: return "missing entity";
    default: return "error";
  }
}

/// Runs `fn`, printing a diagnostic to `err` and converting exceptions to
/// exit codes.
template <class Fn>
int guarded(std::ostream& err, Fn fn) {
  try {
    return fn();
  } catch (const std::exception& e) {
    const int code = exit_code_for(e);
    err << "hetmoe: " << exit_label(code) << ": " << e.what() << "\n";
    return code;
  }
}

/// Worker count for data generation, from HETMOE_THREADS (default 1).
inline std::size_t data_threads() {
  const char* env = std::getenv("HETMOE_THREADS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 1) throw ConfigError("HETMOE_THREADS must be a positive integer, got '" + std::string(env) + "'");
  return static_cast<std::size_t>(v);
}

struct TrainArgs {
  std::optional<std::string> config;
  std::optional<std::string> checkpoint;
  std::string out;
  std::optional<std::string> metrics;
  std::optional<std::uint64_t> seed;
};

/// Applies a --seed override to both model initialisation and training.
inline void apply_seed(RunConfig& rc, std::optional<std::uint64_t> seed) {
  if (!seed) return;
  rc.model.init_seed = *seed;
  rc.train.seed = *seed;
}

class NdjsonWriter {
 public:
  explicit NdjsonWriter(const std::optional<std::string>& path) {
    if (!path) return;
    out_.open(*path, std::ios::binary);
    if (!out_) throw ConfigError("cannot write metrics file '" + *path + "'");
  }
  void write(const json& record) {
    if (out_.is_open()) out_ << record.dump() << "\n";
  }

 private:
  std::ofstream out_;
};

inline std::vector<const Dataset*> pointers(const std::vector<Dataset>& ds) {
  std::vector<const Dataset*> out;
  for (const auto& d : ds) out.push_back(&d);
  return out;
}

/// Heterogeneous pretraining from a config, or resumption from a
/// checkpoint (continuing to the checkpoint's total_iters).
inline int cmd_train(const TrainArgs& a, std::ostream& out) {
  if (a.config.has_value() == a.checkpoint.has_value()) {
    throw ConfigError("train: give exactly one of --config or --checkpoint");
  }
  Checkpoint ck;
  if (a.config) {
    ck.config = load_run_config(*a.config);
    apply_seed(ck.config, a.seed);
    if (ck.config.datasets.empty()) throw ConfigError("$.datasets: at least one dataset is required for training");
    ck.model = Model(ck.config.model);
    for (const auto& s : ck.config.datasets) register_dataset(ck.model, s);
    ck.state = make_train_state(ck.config.train.seed);
  } else {
    if (a.seed) throw ConfigError("train: --seed cannot override a resumed checkpoint");
    ck = load_checkpoint(*a.checkpoint);
  }
  const auto data = make_datasets(ck.config.datasets, data_threads());
  const auto active = pointers(data);
  NdjsonWriter metrics(a.metrics);
  train(ck.model, active, ck.state, ck.config.train, [&](const StepReport& r) { metrics.write(to_json(r)); });
  save_checkpoint(ck, a.out);
  json summary = json::array();
  for (const auto& d : data) summary.push_back(to_json(evaluate(ck.model, d, Split::Test)));
  out << summary.dump(2) << "\n";
  return kOk;
}

struct AdaptArgs {
  std::string checkpoint;
  std::string config;
  std::string out;
  std::optional<std::string> report;
  std::optional<std::uint64_t> seed;
};

inline AdaptReport execute_plan(Model& model, const AdaptPlan& plan, const Dataset& ds) {
  if (plan.mode == "router_only") return adapt_router_only(model, ds, plan.budget);
  if (plan.mode == "router_plus") return adapt_router_plus(model, ds, plan.k_experts, plan.selection, plan.budget);
  if (plan.mode == "full_finetune") return adapt_full(model, ds, plan.budget);
  if (plan.mode == "prune") return prune_then_finetune(model, ds, plan.prune, plan.budget);
  if (plan.mode == "topk_reduce") return topk_reduce(model, ds, plan.new_k, plan.budget);
  if (plan.mode == "hybrid") return hybrid(model, ds, plan.recipe, plan.budget);
  throw ConfigError("unknown adaptation mode '" + plan.mode + "'");
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write '" + path + "'");
  f << text;
}

inline int cmd_adapt(const AdaptArgs& a, std::ostream& out) {
  Checkpoint ck = load_checkpoint(a.checkpoint);
  const RunConfig rc = load_run_config(a.config);
  if (!rc.adapt) throw ConfigError("$.adapt: required for the adapt command");
  AdaptPlan plan = *rc.adapt;
  if (a.seed) plan.budget.train.seed = *a.seed;
  const DatasetSpec spec = plan.dataset ? *plan.dataset : ck.model.spec(plan.dataset_id);
  if (spec.input_dim != ck.model.config.input_dim) {
    throw ConfigError("$.adapt.dataset.input_dim: does not match the checkpoint's input_dim");
  }
  const Dataset ds = make_dataset(spec);
  const AdaptReport rep = execute_plan(ck.model, plan, ds);
  save_checkpoint(ck, a.out);
  const std::string text = to_json(rep).dump(2) + "\n";
  if (a.report) write_text(*a.report, text);
  out << text;
  return kOk;
}

struct ExpandArgs {
  std::string checkpoint;
  std::string config;
  std::string out;
  std::optional<std::string> report;
  std::optional<std::size_t> experts;
  std::optional<std::uint64_t> seed;
};

inline std::vector<Metrics> evaluate_all(Model& model, const std::vector<Dataset>& data) {
  std::vector<Metrics> m;
  for (const auto& d : data) m.push_back(evaluate(model, d, Split::Test));
  return m;
}

inline json metrics_array(const std::vector<Metrics>& ms) {
  json j = json::array();
  for (const auto& m : ms) j.push_back(to_json(m));
  return j;
}

inline std::vector<DatasetSpec> registered_specs(const Model& m) {
  std::vector<DatasetSpec> out;
  for (const auto& [id, s] : m.datasets) out.push_back(s);
  return out;
}

/// Continual expansion: grows every MoE layer, learns the new dataset and
/// reports metrics of every earlier dataset before and after.
inline int cmd_expand(const ExpandArgs& a, std::ostream& out) {
  Checkpoint ck = load_checkpoint(a.checkpoint);
  const RunConfig rc = load_run_config(a.config);
  if (!rc.expand) throw ConfigError("$.expand: required for the expand command");
  ExpandPlan plan = *rc.expand;
  if (a.experts) plan.c = *a.experts;
  if (a.seed) plan.budget.train.seed = *a.seed;
  const auto old = make_datasets(registered_specs(ck.model), data_threads());
  const auto before = evaluate_all(ck.model, old);
  const Dataset ds = make_dataset(plan.dataset);
  const AdaptReport rep = continual_step(ck.model, ds, plan.c, plan.budget);
  const auto after = evaluate_all(ck.model, old);
  save_checkpoint(ck, a.out);
  json j = {{"report", to_json(rep)}, {"old_before", metrics_array(before)}, {"old_after", metrics_array(after)}};
  const std::string text = j.dump(2) + "\n";
  if (a.report) write_text(*a.report, text);
  out << text;
  return kOk;
}

struct EvalArgs {
  std::string checkpoint;
  std::optional<std::string> datasets;
  std::string split = "test";
};

inline std::vector<int> parse_selector(const std::string& s) {
  std::vector<int> ids;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    try {
      std::size_t used = 0;
      ids.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::logic_error&) {
      throw ConfigError("--datasets: '" + item + "' is not a dataset id");
    }
  }
  if (ids.empty()) throw ConfigError("--datasets: empty selector");
  return ids;
}

/// Prints Metrics JSON for the selected (default: all) datasets. Never
/// writes to the checkpoint.
inline int cmd_eval(const EvalArgs& a, std::ostream& out) {
  Checkpoint ck = load_checkpoint(a.checkpoint);
  Split split = Split::Test;
  if (a.split == "train") {
    split = Split::Train;
  } else if (a.split != "test") {
    throw ConfigError("--split must be 'train' or 'test'");
  }
  std::vector<DatasetSpec> specs;
  if (a.datasets) {
    for (int id : parse_selector(*a.datasets)) specs.push_back(ck.model.spec(id));
  } else {
    specs = registered_specs(ck.model);
  }
  const auto data = make_datasets(specs, data_threads());
  json j = json::array();
  for (const auto& d : data) j.push_back(to_json(evaluate(ck.model, d, split)));
  out << j.dump(2) << "\n";
  return kOk;
}

struct GradcheckArgs {
  std::uint64_t seed = 1;
  std::size_t points = 20;
};

inline int cmd_gradcheck(const GradcheckArgs& a, std::ostream& out) {
  GradCheckOptions opt;
  opt.seed = a.seed;
  opt.points = a.points;
  bool ok = true;
  for (const auto& r : run_gradcheck(opt)) {
    out << (r.passed ? "ok   " : "FAIL ") << r.name << " points=" << r.points << " coords=" << r.coordinates
        << " skipped=" << r.skipped << " max_rel_err=" << r.max_rel_error << "\n";
    ok = ok && r.passed;
  }
  return ok ? kOk : kNumeric;
}

}  // namespace hetmoe::cli
