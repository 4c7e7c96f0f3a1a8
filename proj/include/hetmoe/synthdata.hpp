#pragma once

// Seeded synthetic datasets with heterogeneous tasks, and the two-step
// sampler (weighted dataset choice, then a batch from that dataset).

#include <algorithm>
#include <atomic>
#include <exception>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "hetmoe/error.hpp"
#include "hetmoe/ndgrad/tensor.hpp"
#include "hetmoe/rng.hpp"
#include "hetmoe/task.hpp"

namespace hetmoe {

using ndgrad::Shape;
using ndgrad::Tensor;

enum class GeneratorKind { Blobs, Rings, SineRegression };

inline std::string to_string(GeneratorKind g) {
  switch (g) {
    case GeneratorKind::Blobs: return "blobs";
    case GeneratorKind::Rings: return "rings";
    case GeneratorKind::SineRegression: return "sine-regression";
  }
  return "?";
}

inline GeneratorKind parse_generator(std::string_view s) {
  if (s == "blobs") return GeneratorKind::Blobs;
  if (s == "rings") return GeneratorKind::Rings;
  if (s == "sine-regression") return GeneratorKind::SineRegression;
  throw ConfigError("unknown generator '" + std::string(s) + "'");
}

struct DatasetSpec {
  int dataset_id = 0;
  std::string name;
  TaskKind task = TaskKind::Classification;
  GeneratorKind generator = GeneratorKind::Blobs;
  std::size_t input_dim = 16;
  /// Class count for classification generators.
  std::size_t classes = 2;
  /// Target width for regression.
  std::size_t output_dim = 1;
  double noise = 0.0;
  /// Seeds the generator structure (centres, frequencies) and per-sample noise.
  std::uint64_t seed = 1;
  /// Seeds a random rotation of the feature space; 0 means none.
  std::uint64_t transform_seed = 0;
  /// Added to every ring radius.
  double radius_offset = 0.0;
  std::size_t n_train = 1024;
  std::size_t n_test = 256;
  double w_sample = 1.0;
  double w_loss = 1.0;
  std::size_t batch_size = 64;

  /// Width of the head this dataset needs.
  std::size_t head_width() const { return task == TaskKind::Classification ? classes : output_dim; }
};

inline void validate(const DatasetSpec& s) {
  const std::string where = "dataset " + std::to_string(s.dataset_id) + ": ";
  if (s.input_dim < 1) throw ConfigError(where + "input_dim must be at least 1");
  const bool classif = s.generator != GeneratorKind::SineRegression;
  if (classif != (s.task == TaskKind::Classification)) {
    throw ConfigError(where + "generator " + to_string(s.generator) + " does not produce a " + to_string(s.task) + " task");
  }
  if (classif && s.classes < 2) throw ConfigError(where + "classes must be at least 2");
  if (!classif && s.output_dim < 1) throw ConfigError(where + "output_dim must be at least 1");
  if (s.noise < 0.0) throw ConfigError(where + "noise must be non-negative");
  if (s.n_train < 1 || s.n_test < 1) throw ConfigError(where + "splits must be non-empty");
  if (!(s.w_sample > 0.0) || !(s.w_loss > 0.0)) throw ConfigError(where + "weights must be positive");
  if (s.batch_size < 1) throw ConfigError(where + "batch_size must be positive");
  if (s.batch_size > s.n_train) throw ConfigError(where + "batch_size exceeds the training split");
}

enum class Split { Train, Test };

struct SplitData {
  Tensor x;
  Targets targets;
  std::size_t size() const { return x.shape()[0]; }
};

struct Dataset {
  DatasetSpec spec;
  SplitData train;
  SplitData test;

  const SplitData& split(Split s) const { return s == Split::Train ? train : test; }
};

namespace detail {

/// Structure shared by every sample of a generator.
struct GeneratorParams {
  std::vector<double> centers;    // blobs: classes x d
  std::vector<double> freq;       // sine: k x d
  std::vector<double> mix;        // sine: k x out
  std::vector<double> rotation;   // d x d, empty when no transform
  std::size_t k = 0;
};

inline std::vector<double> random_rotation(std::size_t d, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x207A7E));
  std::vector<double> q(d * d);
  for (auto& v : q) v = rng.normal();
  // Modified Gram-Schmidt over rows.
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      double dot = 0.0;
      for (std::size_t c = 0; c < d; ++c) dot += q[i * d + c] * q[j * d + c];
      for (std::size_t c = 0; c < d; ++c) q[i * d + c] -= dot * q[j * d + c];
    }
    double nrm = 0.0;
    for (std::size_t c = 0; c < d; ++c) nrm += q[i * d + c] * q[i * d + c];
    nrm = std::sqrt(nrm);
    for (std::size_t c = 0; c < d; ++c) q[i * d + c] /= nrm;
  }
  return q;
}

inline GeneratorParams make_params(const DatasetSpec& s) {
  GeneratorParams p;
  const std::size_t d = s.input_dim;
  Rng rng(mix_seed(s.seed, 0x57C));
  if (s.generator == GeneratorKind::Blobs) {
    p.centers.resize(s.classes * d);
    for (auto& v : p.centers) v = rng.normal();
  } else if (s.generator == GeneratorKind::SineRegression) {
    p.k = 8;
    p.freq.resize(p.k * d);
    p.mix.resize(p.k * s.output_dim);
    const double fscale = 2.0 / std::sqrt(static_cast<double>(d));
    for (auto& v : p.freq) v = fscale * rng.normal();
    const double mscale = 1.0 / std::sqrt(static_cast<double>(p.k));
    for (auto& v : p.mix) v = mscale * rng.normal();
  }
  if (s.transform_seed != 0) p.rotation = random_rotation(d, s.transform_seed);
  return p;
}

/// Raw (unstandardised) sample `index`; a pure function of (spec, index).
inline void raw_sample(const DatasetSpec& s, const GeneratorParams& p, std::size_t index, std::span<double> x,
                       int& label, std::span<double> y) {
  const std::size_t d = s.input_dim;
  Rng rng(mix_seed(s.seed, index, 0x5A));
  std::vector<double> v(d);
  switch (s.generator) {
    case GeneratorKind::Blobs: {
      const std::size_t c = index % s.classes;
      label = static_cast<int>(c);
      for (std::size_t j = 0; j < d; ++j) v[j] = p.centers[c * d + j] + s.noise * rng.normal();
      break;
    }
    case GeneratorKind::Rings: {
      const std::size_t c = index % s.classes;
      label = static_cast<int>(c);
      double nrm = 0.0;
      for (auto& e : v) {
        e = rng.normal();
        nrm += e * e;
      }
      nrm = std::sqrt(nrm);
      const double radius = static_cast<double>(c + 1) + s.radius_offset + s.noise * rng.normal();
      for (auto& e : v) e *= radius / nrm;
      break;
    }
    case GeneratorKind::SineRegression: {
      label = -1;
      for (auto& e : v) e = rng.normal();
      for (std::size_t o = 0; o < s.output_dim; ++o) y[o] = 0.0;
      for (std::size_t r = 0; r < p.k; ++r) {
        double a = 0.0;
        for (std::size_t j = 0; j < d; ++j) a += p.freq[r * d + j] * v[j];
        const double sa = std::sin(a);
        for (std::size_t o = 0; o < s.output_dim; ++o) y[o] += sa * p.mix[r * s.output_dim + o];
      }
      for (std::size_t o = 0; o < s.output_dim; ++o) y[o] += s.noise * rng.normal();
      break;
    }
  }
  if (!p.rotation.empty()) {
    for (std::size_t i = 0; i < d; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < d; ++j) acc += p.rotation[i * d + j] * v[j];
      x[i] = acc;
    }
  } else {
    std::copy(v.begin(), v.end(), x.begin());
  }
}

inline SplitData raw_split(const DatasetSpec& s, const GeneratorParams& p, std::size_t first, std::size_t count) {
  SplitData out;
  out.x = Tensor(Shape{count, s.input_dim});
  const bool classif = s.task == TaskKind::Classification;
  if (classif) {
    out.targets.labels.resize(count);
  } else {
    out.targets.values = Tensor(Shape{count, s.output_dim});
  }
  std::vector<double> y(s.output_dim);
  for (std::size_t i = 0; i < count; ++i) {
    int label = -1;
    raw_sample(s, p, first + i, std::span<double>(&out.x[i * s.input_dim], s.input_dim), label, y);
    if (classif) {
      out.targets.labels[i] = label;
    } else {
      std::copy(y.begin(), y.end(), &out.targets.values[i * s.output_dim]);
    }
  }
  return out;
}

inline void standardize(Tensor& x, const std::vector<double>& mean, const std::vector<double>& sd) {
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) x[i * d + j] = (x[i * d + j] - mean[j]) / sd[j];
  }
}

}  // namespace detail

/// Builds both splits. Training samples use indices [0, n_train), test
/// samples [n_train, n_train + n_test). Features are standardised per
/// dimension with statistics of the training split.
inline Dataset make_dataset(const DatasetSpec& spec) {
  validate(spec);
  const auto params = detail::make_params(spec);
  Dataset ds;
  ds.spec = spec;
  ds.train = detail::raw_split(spec, params, 0, spec.n_train);
  ds.test = detail::raw_split(spec, params, spec.n_train, spec.n_test);
  const std::size_t d = spec.input_dim, n = spec.n_train;
  std::vector<double> mean(d, 0.0), sd(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) mean[j] += ds.train.x[i * d + j];
  }
  for (auto& m : mean) m /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      const double c = ds.train.x[i * d + j] - mean[j];
      sd[j] += c * c;
    }
  }
  for (auto& s : sd) s = std::max(std::sqrt(s / static_cast<double>(n)), 1e-12);
  detail::standardize(ds.train.x, mean, sd);
  detail::standardize(ds.test.x, mean, sd);
  return ds;
}

inline SplitData generate(const DatasetSpec& spec, Split split) {
  auto ds = make_dataset(spec);
  return split == Split::Train ? std::move(ds.train) : std::move(ds.test);
}

/// Generates several datasets, using up to `threads` worker threads. Output
/// does not depend on the thread count.
inline std::vector<Dataset> make_datasets(const std::vector<DatasetSpec>& specs, std::size_t threads = 1) {
  std::vector<Dataset> out(specs.size());
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(specs.size(), 1));
  if (threads == 1) {
    for (std::size_t i = 0; i < specs.size(); ++i) out[i] = make_dataset(specs[i]);
    return out;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(specs.size());
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < specs.size(); i = next++) {
        try {
          out[i] = make_dataset(specs[i]);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

/// Weighted choice of a dataset: P(i) = w_sample_i / sum w_sample.
inline int sample_dataset(std::span<const DatasetSpec> specs, Rng& rng) {
  if (specs.empty()) throw ConfigError("sample_dataset: no datasets");
  double total = 0.0;
  for (const auto& s : specs) {
    if (!(s.w_sample > 0.0)) throw ConfigError("sample_dataset: non-positive sampling weight");
    total += s.w_sample;
  }
  const double u = rng.uniform() * total;
  double acc = 0.0;
  for (const auto& s : specs) {
    acc += s.w_sample;
    if (u < acc) return s.dataset_id;
  }
  return specs.back().dataset_id;
}

struct Batch {
  int dataset_id = 0;
  Tensor x;
  Targets y;
  std::size_t size() const { return x.shape()[0]; }
};

/// Shuffled-epoch cursor over a training split. The permutation of epoch e
/// is a function of (seed, e), so (seed, epoch, position) is the full state.
struct BatchCursor {
  std::uint64_t seed = 0;
  std::size_t epoch = 0;
  std::size_t position = 0;
  std::vector<std::size_t> order;

  void build_order(std::size_t n) {
    order.resize(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(mix_seed(seed, epoch, 0xB47C));
    rng.shuffle(std::span<std::size_t>(order));
  }
};

inline Batch take_rows(const Dataset& ds, const SplitData& split, std::span<const std::size_t> idx) {
  const auto& s = ds.spec;
  Batch b;
  b.dataset_id = s.dataset_id;
  b.x = Tensor(Shape{idx.size(), s.input_dim});
  const bool classif = s.task == TaskKind::Classification;
  if (!classif) b.y.values = Tensor(Shape{idx.size(), s.output_dim});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    std::copy_n(&split.x[idx[r] * s.input_dim], s.input_dim, &b.x[r * s.input_dim]);
    if (classif) {
      b.y.labels.push_back(split.targets.labels[idx[r]]);
    } else {
      std::copy_n(&split.targets.values[idx[r] * s.output_dim], s.output_dim, &b.y.values[r * s.output_dim]);
    }
  }
  return b;
}

/// Next training batch of exactly batch_size samples; a partial tail is
/// dropped and a new epoch begins with a fresh permutation.
inline Batch next_batch(const Dataset& ds, BatchCursor& cursor) {
  const std::size_t n = ds.train.size();
  const std::size_t bs = ds.spec.batch_size;
  if (n < bs) throw ConfigError("next_batch: split smaller than batch size");
  if (cursor.order.size() != n) cursor.build_order(n);
  if (cursor.position + bs > n) {
    ++cursor.epoch;
    cursor.position = 0;
    cursor.build_order(n);
  }
  const std::span<const std::size_t> idx(&cursor.order[cursor.position], bs);
  cursor.position += bs;
  return take_rows(ds, ds.train, idx);
}

/// Contiguous rows [first, first + count) of a split, for evaluation.
inline Batch slice(const Dataset& ds, Split split, std::size_t first, std::size_t count) {
  std::vector<std::size_t> idx(count);
  std::iota(idx.begin(), idx.end(), first);
  return take_rows(ds, ds.split(split), idx);
}

}  // namespace hetmoe
