#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "hetmoe/hetmoe.hpp"

namespace hetmoe::test {

using ndgrad::Tensor;

inline Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(shape);
  for (auto& v : t.storage()) v = rng.uniform(lo, hi);
  return t;
}

/// Central finite-difference gradient of a scalar function of one tensor.
inline Tensor numeric_grad(const std::function<double(const Tensor&)>& f, Tensor x, double h) {
  Tensor g(x.shape(), 0.0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double fp = f(x);
    x[i] = orig - h;
    const double fm = f(x);
    x[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

inline double max_rel_error(const Tensor& a, const Tensor& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, gradcheck_rel_error(a[i], b[i]));
  return worst;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

/// A small but complete model: 2 MoE blocks, 12 experts, top-4.
inline ModelConfig small_config(std::uint64_t seed = 1) {
  ModelConfig c;
  c.input_dim = 8;
  c.d = 8;
  c.n_blocks = 2;
  c.n_experts = 12;
  c.top_k = 4;
  c.hidden_budget = 8;
  c.init_seed = seed;
  return c;
}

inline DatasetSpec blobs_spec(int id, std::size_t classes = 4, std::uint64_t seed = 3, std::size_t input_dim = 8) {
  DatasetSpec s;
  s.dataset_id = id;
  s.name = "blobs";
  s.generator = GeneratorKind::Blobs;
  s.task = TaskKind::Classification;
  s.input_dim = input_dim;
  s.classes = classes;
  s.noise = 0.5;
  s.seed = seed;
  s.n_train = 512;
  s.n_test = 256;
  s.batch_size = 32;
  return s;
}

inline DatasetSpec rings_spec(int id, std::size_t classes = 3, std::uint64_t seed = 5, std::size_t input_dim = 8) {
  DatasetSpec s = blobs_spec(id, classes, seed, input_dim);
  s.name = "rings";
  s.generator = GeneratorKind::Rings;
  s.noise = 0.1;
  return s;
}

inline DatasetSpec sine_spec(int id, std::size_t out = 2, std::uint64_t seed = 7, std::size_t input_dim = 8) {
  DatasetSpec s = blobs_spec(id, 2, seed, input_dim);
  s.name = "sine";
  s.generator = GeneratorKind::SineRegression;
  s.task = TaskKind::Regression;
  s.output_dim = out;
  s.noise = 0.05;
  return s;
}

inline std::vector<const Dataset*> pointers(const std::vector<Dataset>& ds) {
  std::vector<const Dataset*> out;
  for (const auto& d : ds) out.push_back(&d);
  return out;
}

/// Byte snapshot of every parameter value, keyed by traversal order.
inline std::vector<Tensor> snapshot(Model& m) {
  std::vector<Tensor> out;
  for (const auto& p : parameters(m)) out.push_back(p.param->value);
  return out;
}

}  // namespace hetmoe::test
