#pragma once

// Central finite-difference battery: every differentiable op plus an
// end-to-end 2-block MoE model (task loss and MI surrogate together).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "hetmoe/model.hpp"
#include "hetmoe/objectives.hpp"
#include "hetmoe/trainer.hpp"

namespace hetmoe {

struct GradCheckOptions {
  std::size_t points = 20;
  double tolerance = 1e-4;
  double step = 1e-5;
  std::uint64_t seed = 1;
};

struct GradCheckResult {
  std::string name;
  std::size_t points = 0;
  std::size_t coordinates = 0;
  /// Coordinates skipped because the perturbation changed a Top-K set
  /// (the loss is only piecewise smooth across selection boundaries).
  std::size_t skipped = 0;
  double max_rel_error = 0.0;
  bool passed = false;
};

/// |a - n| / max(|a|, |n|, 1e-3). The floor keeps near-zero gradients from
/// turning finite-difference round-off into large ratios.
inline double gradcheck_rel_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-3});
  return std::abs(analytic - numeric) / denom;
}

namespace detail {

enum class Domain { Any, Positive, Probability };

struct OpCase {
  std::string name;
  std::vector<Shape> shapes;
  Domain domain = Domain::Any;
  /// Builds the op's output from leaf inputs; case-specific constants are
  /// drawn from the rng passed at construction time of each point.
  std::function<Var(Tape&, const std::vector<Var>&)> build;
};

inline Tensor random_tensor(const Shape& s, Domain dom, Rng& rng) {
  Tensor t(s);
  for (auto& v : t.storage()) {
    switch (dom) {
      case Domain::Any: v = rng.uniform(-1.0, 1.0); break;
      case Domain::Positive: v = rng.uniform(0.5, 2.0); break;
      case Domain::Probability: v = rng.uniform(0.05, 1.0); break;
    }
  }
  if (dom == Domain::Probability) {
    double total = 0.0;
    for (double v : t.data()) total += v;
    for (auto& v : t.storage()) v /= total;
  }
  return t;
}

/// Contracts an op's output with fixed random weights so that every output
/// element gets a distinct upstream gradient.
inline double contract(const Tensor& y, const Tensor& r) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * r[i];
  return s;
}

inline GradCheckResult check_op(const OpCase& op, const GradCheckOptions& opt, Rng& rng) {
  GradCheckResult res;
  res.name = op.name;
  for (std::size_t point = 0; point < opt.points; ++point) {
    std::vector<Tensor> inputs;
    for (const auto& s : op.shapes) inputs.push_back(random_tensor(s, op.domain, rng));

    Tensor r;
    std::vector<Tensor> analytic;
    {
      Tape tape;
      std::vector<Var> vars;
      for (const auto& t : inputs) vars.push_back(tape.leaf(t));
      const Var y = op.build(tape, vars);
      r = random_tensor(y.value().shape(), Domain::Any, rng);
      const Var loss = ndgrad::sum(ndgrad::mul(y, tape.constant(r)));
      tape.backward(loss);
      for (const Var& v : vars) analytic.push_back(tape.grad(v));
    }

    auto eval = [&](const std::vector<Tensor>& in) {
      Tape tape;
      std::vector<Var> vars;
      for (const auto& t : in) vars.push_back(tape.constant(t));
      return contract(op.build(tape, vars).value(), r);
    };

    for (std::size_t i = 0; i < inputs.size(); ++i) {
      for (std::size_t c = 0; c < inputs[i].size(); ++c) {
        const double orig = inputs[i][c];
        inputs[i][c] = orig + opt.step;
        const double fp = eval(inputs);
        inputs[i][c] = orig - opt.step;
        const double fm = eval(inputs);
        inputs[i][c] = orig;
        const double numeric = (fp - fm) / (2.0 * opt.step);
        res.max_rel_error = std::max(res.max_rel_error, gradcheck_rel_error(analytic[i][c], numeric));
        ++res.coordinates;
      }
    }
    ++res.points;
  }
  res.passed = res.max_rel_error < opt.tolerance;
  return res;
}

inline std::vector<OpCase> op_cases(Rng& rng) {
  using namespace ndgrad;
  std::vector<OpCase> cases;
  auto two = [](auto f) { return [f](Tape&, const std::vector<Var>& v) { return f(v[0], v[1]); }; };
  auto one = [](auto f) { return [f](Tape&, const std::vector<Var>& v) { return f(v[0]); }; };

  cases.push_back({"matmul", {{3, 4}, {4, 2}}, Domain::Any, two([](Var a, Var b) { return matmul(a, b); })});
  cases.push_back({"add", {{3, 4}, {3, 4}}, Domain::Any, two([](Var a, Var b) { return add(a, b); })});
  cases.push_back({"add_scalar", {{3, 4}, {}}, Domain::Any, two([](Var a, Var b) { return add(a, b); })});
  cases.push_back({"add_bias", {{3, 4}, {4}}, Domain::Any, two([](Var a, Var b) { return add_bias(a, b); })});
  cases.push_back({"scale", {{3, 4}}, Domain::Any, one([](Var a) { return scale(a, -1.7); })});
  cases.push_back({"sub", {{3, 4}, {3, 4}}, Domain::Any, two([](Var a, Var b) { return sub(a, b); })});
  cases.push_back({"mul", {{3, 4}, {3, 4}}, Domain::Any, two([](Var a, Var b) { return mul(a, b); })});
  cases.push_back({"tanh", {{3, 4}}, Domain::Any, one([](Var a) { return ndgrad::tanh(a); })});
  cases.push_back({"exp", {{3, 4}}, Domain::Any, one([](Var a) { return ndgrad::exp(a); })});
  cases.push_back({"log", {{3, 4}}, Domain::Positive, one([](Var a) { return ndgrad::log(a); })});
  cases.push_back({"softmax_rows", {{3, 5}}, Domain::Any, one([](Var a) { return softmax(a, 1); })});
  cases.push_back({"softmax_cols", {{3, 5}}, Domain::Any, one([](Var a) { return softmax(a, 0); })});
  cases.push_back({"softmax_vector", {{6}}, Domain::Any, one([](Var a) { return softmax(a, 0); })});
  cases.push_back({"sum", {{3, 4}}, Domain::Any, one([](Var a) { return sum(a); })});
  cases.push_back({"mean", {{3, 4}}, Domain::Any, one([](Var a) { return mean(a); })});
  cases.push_back({"sum_rows", {{3, 4}}, Domain::Any, one([](Var a) { return sum_rows(a); })});
  cases.push_back({"mean_rows", {{3, 4}}, Domain::Any, one([](Var a) { return mean_rows(a); })});
  cases.push_back({"mse", {{3, 4}, {3, 4}}, Domain::Any, two([](Var a, Var b) { return mse(a, b); })});
  {
    std::vector<int> labels;
    for (int i = 0; i < 5; ++i) labels.push_back(static_cast<int>(rng.below(4)));
    cases.push_back({"cross_entropy", {{5, 4}}, Domain::Any,
                     [labels](Tape&, const std::vector<Var>& v) { return cross_entropy(v[0], labels); }});
  }
  cases.push_back({"l2_norm", {{3, 4}}, Domain::Any, one([](Var a) { return l2_norm(a); })});
  cases.push_back({"gather_rows", {{4, 3}}, Domain::Any,
                   [](Tape&, const std::vector<Var>& v) { return gather_rows(v[0], {2, 0, 2, 3}); }});
  cases.push_back({"take_cols", {{3, 5}}, Domain::Any, [](Tape&, const std::vector<Var>& v) {
                     return take_cols(v[0], {{4, 1}, {0, 2}, {3, 3}});
                   }});
  cases.push_back({"embed", {{5}}, Domain::Any,
                   [](Tape&, const std::vector<Var>& v) { return embed(v[0], Shape{3, 4}, {1, 4, 6, 9, 11}); }});
  cases.push_back({"mixture_combine", {{2, 3}, {3, 3}, {4, 2}}, Domain::Any, [](Tape&, const std::vector<Var>& v) {
                     const std::vector<Var> parts = {v[0], v[1]};
                     std::vector<std::vector<Slot>> slots = {{{0, 0}, {1, 2}}, {{1, 0}, {0, 1}}, {{1, 1}, {0, 0}},
                                                             {{0, 1}, {1, 1}}};
                     return mixture_combine(parts, v[2], std::move(slots));
                   }});
  {
    Tensor b = random_tensor({2, 3}, Domain::Probability, rng);
    cases.push_back({"mi_loss_surrogate", {{2, 3}}, Domain::Probability,
                     [b](Tape&, const std::vector<Var>& v) { return mi_loss_surrogate(v[0], b); }});
  }
  cases.push_back({"expert_mlp_chain", {{4, 3}, {3, 5}, {5}, {5, 3}}, Domain::Any,
                   [](Tape&, const std::vector<Var>& v) {
                     const Var h = ndgrad::tanh(add_bias(matmul(v[0], v[1]), v[2]));
                     return softmax(matmul(h, v[3]), 1);
                   }});
  return cases;
}

inline std::vector<std::vector<std::vector<int>>> selections(const ForwardResult& fwd) {
  std::vector<std::vector<std::vector<int>>> out;
  for (const auto& m : fwd.moe) out.push_back(m.gate.selected);
  return out;
}

}  // namespace detail

/// Small model used by the end-to-end check: two blocks, both with MoE.
inline ModelConfig gradcheck_model_config(std::uint64_t seed) {
  ModelConfig c;
  c.input_dim = 3;
  c.d = 4;
  c.n_blocks = 2;
  c.moe_every = 1;
  c.n_experts = 4;
  c.top_k = 2;
  c.hidden_budget = 6;
  c.init_seed = seed;
  return c;
}

/// Loss (task + lambda * sum of per-layer MI surrogates) of a 2-block MoE
/// model against central differences over every parameter.
inline GradCheckResult check_model(TaskKind kind, const GradCheckOptions& opt) {
  GradCheckResult res;
  res.name = kind == TaskKind::Classification ? "moe_model_classification" : "moe_model_regression";
  const double lambda = 0.5;
  const std::size_t batch = 6;
  for (std::size_t point = 0; point < opt.points; ++point) {
    const std::uint64_t seed = mix_seed(opt.seed, 0x6C7, point, static_cast<std::uint64_t>(kind));
    Model model(gradcheck_model_config(seed));
    DatasetSpec spec;
    spec.dataset_id = 0;
    spec.input_dim = 3;
    spec.task = kind;
    spec.generator = kind == TaskKind::Classification ? GeneratorKind::Blobs : GeneratorKind::SineRegression;
    spec.classes = 3;
    spec.output_dim = 2;
    register_dataset(model, spec);
    DatasetSpec other = spec;
    other.dataset_id = 1;
    register_dataset(model, other);

    Rng rng(mix_seed(seed, 0xDA7A));
    const Tensor x = detail::random_tensor({batch, 3}, detail::Domain::Any, rng);
    Targets y;
    if (kind == TaskKind::Classification) {
      for (std::size_t i = 0; i < batch; ++i) y.labels.push_back(static_cast<int>(rng.below(3)));
    } else {
      y.values = detail::random_tensor({batch, 2}, detail::Domain::Any, rng);
    }
    // A non-trivial constant buffer: dataset 1's row is random, dataset 0's
    // row is filled from the first forward pass.
    for (auto* layer : model.moe_layers()) {
      auto& row = layer->buffer.rows[layer->buffer.row_of(1)];
      for (auto& v : row) v = rng.uniform(0.02, 0.3);
      layer->buffer.initialized[layer->buffer.row_of(1)] = true;
    }

    auto build = [&](Tape& tape, ForwardResult& fwd) {
      fwd = forward(tape, model, x, 0);
      Var total = task_loss(fwd.output, y, kind);
      auto layers = model.moe_layers();
      for (std::size_t l = 0; l < layers.size(); ++l) {
        const UsageSnapshot snap = batch_usage(fwd.moe[l].gate, layers[l]->buffer, 0);
        if (!layers[l]->buffer.initialized[snap.row]) buffer_initialize(layers[l]->buffer, snap.p_joint.value(), 0);
        total = ndgrad::add(total, ndgrad::scale(mi_loss_surrogate(snap, layers[l]->buffer), lambda));
      }
      return total;
    };

    auto params = parameters(model);
    for (auto& p : params) p.param->zero_grad();
    ForwardResult base;
    std::vector<std::vector<std::vector<int>>> base_sel;
    {
      Tape tape;
      const Var loss = build(tape, base);
      base_sel = detail::selections(base);
      tape.backward(loss);
    }
    for (auto& p : params) {
      Tensor& v = p.param->value;
      for (std::size_t c = 0; c < v.size(); ++c) {
        const double orig = v[c];
        double f[2];
        bool same = true;
        for (int s = 0; s < 2; ++s) {
          v[c] = orig + (s == 0 ? opt.step : -opt.step);
          Tape tape;
          ForwardResult fwd;
          f[s] = build(tape, fwd).value().item();
          same = same && detail::selections(fwd) == base_sel;
        }
        v[c] = orig;
        if (!same) {
          ++res.skipped;
          continue;
        }
        const double numeric = (f[0] - f[1]) / (2.0 * opt.step);
        res.max_rel_error = std::max(res.max_rel_error, gradcheck_rel_error(p.param->grad[c], numeric));
        ++res.coordinates;
      }
    }
    ++res.points;
  }
  res.passed = res.max_rel_error < opt.tolerance && res.coordinates > 0;
  return res;
}

/// The full battery: every op case, then the end-to-end model for both task
/// kinds.
inline std::vector<GradCheckResult> run_gradcheck(const GradCheckOptions& opt = {}) {
  Rng rng(mix_seed(opt.seed, 0x6C));
  std::vector<GradCheckResult> out;
  for (const auto& op : detail::op_cases(rng)) out.push_back(detail::check_op(op, opt, rng));
  out.push_back(check_model(TaskKind::Classification, opt));
  out.push_back(check_model(TaskKind::Regression, opt));
  return out;
}

}  // namespace hetmoe
