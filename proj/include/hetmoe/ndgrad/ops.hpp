#pragma once

// Tape-tracked tensor operations. Each function computes the forward value
// eagerly and records a closure that adds its contribution to the parents'
// gradients during the reverse sweep.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "hetmoe/ndgrad/tape.hpp"

namespace hetmoe::ndgrad {

namespace detail {

inline void require_same_tape(Var a, Var b) {
  if (a.tape != b.tape || a.tape == nullptr) throw TapeError("operands recorded on different tapes");
}

inline void require_rank(Var a, std::size_t rank, const char* op) {
  if (a.value().rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                         shape_str(a.shape()));
  }
}

inline void require_same_shape(Var a, Var b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

template <typename F, typename DF>
Var unary(Var x, F f, DF df) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  const std::size_t xi = x.id;
  const std::size_t oi = x.tape->size();
  return x.tape->record(std::move(out), {xi}, [xi, oi, df](Tape& t, const Tensor& g) {
    const Tensor& xv = t.value(xi);
    const Tensor& yv = t.value(oi);
    Tensor& gx = t.grad_slot(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xv[i], yv[i]);
  });
}

inline void check_finite(const Tensor& t, const char* op) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite input");
  }
}

}  // namespace detail

/// C = A·B for A [m×k], B [k×n]. Each output element accumulates over k in
/// ascending order, so a column of C depends only on the same column of B.
inline Var matmul(Var a, Var b) {
  detail::require_same_tape(a, b);
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const std::size_t m = av.shape()[0], k = av.shape()[1], n = bv.shape()[1];
  if (bv.shape()[0] != k) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(av.shape()) + " x " +
                         shape_str(bv.shape()));
  }
  Tensor out(Shape{m, n}, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* row = &out[i * n];
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      const double* brow = &bv[p * n];
      for (std::size_t j = 0; j < n; ++j) row[j] += aip * brow[j];
    }
  }
  const std::size_t ai = a.id, bi = b.id;
  return a.tape->record(std::move(out), {ai, bi}, [ai, bi, m, k, n](Tape& t, const Tensor& g) {
    if (t.requires_grad(ai)) {
      const Tensor& bv = t.value(bi);
      Tensor& ga = t.grad_slot(ai);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bv[p * n + j];
          ga[i * k + p] += acc;
        }
      }
    }
    if (t.requires_grad(bi)) {
      const Tensor& av = t.value(ai);
      Tensor& gb = t.grad_slot(bi);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = av[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
        }
      }
    }
  });
}

/// Elementwise sum; `b` may also be a single-element tensor (scalar case).
inline Var add(Var a, Var b) {
  detail::require_same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const bool scalar_b = bv.size() == 1 && av.size() != 1;
  if (!scalar_b) detail::require_same_shape(a, b, "add");
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + (scalar_b ? bv[0] : bv[i]);
  const std::size_t ai = a.id, bi = b.id;
  return a.tape->record(std::move(out), {ai, bi}, [ai, bi, scalar_b](Tape& t, const Tensor& g) {
    if (t.requires_grad(ai)) {
      Tensor& ga = t.grad_slot(ai);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(bi)) {
      Tensor& gb = t.grad_slot(bi);
      if (scalar_b) {
        double s = 0.0;
        for (double v : g.data()) s += v;
        gb[0] += s;
      } else {
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    }
  });
}

/// a [m×n] + bias [n] broadcast over rows.
inline Var add_bias(Var a, Var bias) {
  detail::require_same_tape(a, bias);
  detail::require_rank(a, 2, "add_bias");
  const Tensor& av = a.value();
  const Tensor& bv = bias.value();
  const std::size_t m = av.shape()[0], n = av.shape()[1];
  if (bv.size() != n) {
    throw DimensionError("add_bias: bias " + shape_str(bv.shape()) + " does not match " + shape_str(av.shape()));
  }
  Tensor out(av.shape());
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = av[i * n + j] + bv[j];
  }
  const std::size_t ai = a.id, bi = bias.id;
  return a.tape->record(std::move(out), {ai, bi}, [ai, bi, m, n](Tape& t, const Tensor& g) {
    if (t.requires_grad(ai)) {
      Tensor& ga = t.grad_slot(ai);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(bi)) {
      Tensor& gb = t.grad_slot(bi);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
      }
    }
  });
}

inline Var scale(Var a, double s) {
  return detail::unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

inline Var sub(Var a, Var b) { return add(a, scale(b, -1.0)); }

inline Var mul(Var a, Var b) {
  detail::require_same_tape(a, b);
  detail::require_same_shape(a, b, "mul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  const std::size_t ai = a.id, bi = b.id;
  return a.tape->record(std::move(out), {ai, bi}, [ai, bi](Tape& t, const Tensor& g) {
    if (t.requires_grad(ai)) {
      const Tensor& bv = t.value(bi);
      Tensor& ga = t.grad_slot(ai);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(bi)) {
      const Tensor& av = t.value(ai);
      Tensor& gb = t.grad_slot(bi);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

inline Var tanh(Var x) {
  return detail::unary(x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

inline Var exp(Var x) {
  return detail::unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

/// Natural log; every input must be strictly positive.
inline Var log(Var x) {
  for (double v : x.value().data()) {
    if (!(v > 0.0)) throw DomainError("log: non-positive input " + std::to_string(v));
  }
  return detail::unary(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

/// Softmax along `axis` of a rank-1 or rank-2 tensor, max-subtracted.
inline Var softmax(Var x, std::size_t axis) {
  const Tensor& xv = x.value();
  if (xv.rank() < 1 || xv.rank() > 2 || axis >= xv.rank()) {
    throw DimensionError("softmax: unsupported axis " + std::to_string(axis) + " for shape " + shape_str(xv.shape()));
  }
  detail::check_finite(xv, "softmax");
  const std::size_t rows = xv.rank() == 2 ? xv.shape()[0] : 1;
  const std::size_t cols = xv.shape().back();
  // Lines run along `axis`: `count` lines of `len` elements spaced `stride`.
  const bool along_cols = axis == xv.rank() - 1;
  const std::size_t count = along_cols ? rows : cols;
  const std::size_t len = along_cols ? cols : rows;
  const std::size_t stride = along_cols ? 1 : cols;
  const std::size_t step = along_cols ? cols : 1;
  Tensor out(xv.shape());
  for (std::size_t l = 0; l < count; ++l) {
    const std::size_t base = l * step;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < len; ++i) mx = std::max(mx, xv[base + i * stride]);
    double denom = 0.0;
    for (std::size_t i = 0; i < len; ++i) {
      const double e = std::exp(xv[base + i * stride] - mx);
      out[base + i * stride] = e;
      denom += e;
    }
    for (std::size_t i = 0; i < len; ++i) out[base + i * stride] /= denom;
  }
  const std::size_t xi = x.id;
  const std::size_t oi = x.tape->size();
  return x.tape->record(std::move(out), {xi}, [=](Tape& t, const Tensor& g) {
    const Tensor& y = t.value(oi);
    Tensor& gx = t.grad_slot(xi);
    for (std::size_t l = 0; l < count; ++l) {
      const std::size_t base = l * step;
      double dot = 0.0;
      for (std::size_t i = 0; i < len; ++i) dot += g[base + i * stride] * y[base + i * stride];
      for (std::size_t i = 0; i < len; ++i) {
        const std::size_t idx = base + i * stride;
        gx[idx] += y[idx] * (g[idx] - dot);
      }
    }
  });
}

inline Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const std::size_t xi = x.id;
  return x.tape->record(Tensor::scalar(s), {xi}, [xi](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_slot(xi);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[0];
  });
}

inline Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

/// Column sums of a matrix: [m×n] -> [n].
inline Var sum_rows(Var x) {
  detail::require_rank(x, 2, "sum_rows");
  const Tensor& xv = x.value();
  const std::size_t m = xv.shape()[0], n = xv.shape()[1];
  Tensor out(Shape{n}, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[j] += xv[i * n + j];
  }
  const std::size_t xi = x.id;
  return x.tape->record(std::move(out), {xi}, [xi, m, n](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_slot(xi);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[j];
    }
  });
}

/// Mean over rows: [m×n] -> [n].
inline Var mean_rows(Var x) {
  detail::require_rank(x, 2, "mean_rows");
  return scale(sum_rows(x), 1.0 / static_cast<double>(x.shape()[0]));
}

/// Mean squared error over all elements.
inline Var mse(Var a, Var b) {
  detail::require_same_shape(a, b, "mse");
  const Var d = sub(a, b);
  return mean(mul(d, d));
}

/// Mean over the batch of -log softmax(logits)[label].
inline Var cross_entropy(Var logits, std::span<const int> labels) {
  detail::require_rank(logits, 2, "cross_entropy");
  const Tensor& lv = logits.value();
  const std::size_t m = lv.shape()[0], c = lv.shape()[1];
  if (labels.size() != m) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(m) +
                         " rows");
  }
  detail::check_finite(lv, "cross_entropy");
  Tensor probs(lv.shape());
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const int label = labels[i];
    if (label < 0 || static_cast<std::size_t>(label) >= c) {
      throw DataError("cross_entropy: label " + std::to_string(label) + " outside [0, " + std::to_string(c) + ")");
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, lv[i * c + j]);
    double denom = 0.0;
    for (std::size_t j = 0; j < c; ++j) denom += std::exp(lv[i * c + j] - mx);
    const double lse = mx + std::log(denom);
    total += lse - lv[i * c + static_cast<std::size_t>(label)];
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] = std::exp(lv[i * c + j] - lse);
  }
  std::vector<int> lab(labels.begin(), labels.end());
  const std::size_t li = logits.id;
  return logits.tape->record(Tensor::scalar(total / static_cast<double>(m)), {li},
                             [li, m, c, probs = std::move(probs), lab = std::move(lab)](Tape& t, const Tensor& g) {
                               Tensor& gl = t.grad_slot(li);
                               const double s = g[0] / static_cast<double>(m);
                               for (std::size_t i = 0; i < m; ++i) {
                                 for (std::size_t j = 0; j < c; ++j) {
                                   const double onehot = static_cast<std::size_t>(lab[i]) == j ? 1.0 : 0.0;
                                   gl[i * c + j] += s * (probs[i * c + j] - onehot);
                                 }
                               }
                             });
}

/// Euclidean norm of all elements.
inline Var l2_norm(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v * v;
  const double nrm = std::sqrt(s);
  const std::size_t xi = x.id;
  return x.tape->record(Tensor::scalar(nrm), {xi}, [xi, nrm](Tape& t, const Tensor& g) {
    if (nrm == 0.0) return;
    const Tensor& xv = t.value(xi);
    Tensor& gx = t.grad_slot(xi);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[0] * xv[i] / nrm;
  });
}

/// Selects rows of a matrix: out[r] = x[rows[r]].
inline Var gather_rows(Var x, std::vector<std::size_t> rows) {
  detail::require_rank(x, 2, "gather_rows");
  const Tensor& xv = x.value();
  const std::size_t n = xv.shape()[1];
  Tensor out(Shape{rows.size(), n});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= xv.shape()[0]) throw DimensionError("gather_rows: row index out of range");
    std::copy_n(&xv[rows[r] * n], n, &out[r * n]);
  }
  const std::size_t xi = x.id;
  return x.tape->record(std::move(out), {xi}, [xi, n, rows = std::move(rows)](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_slot(xi);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      for (std::size_t j = 0; j < n; ++j) gx[rows[r] * n + j] += g[r * n + j];
    }
  });
}

/// Per-row column selection: out[i][k] = x[i][cols[i][k]]. Every row must
/// select the same number of columns.
inline Var take_cols(Var x, std::vector<std::vector<std::size_t>> cols) {
  detail::require_rank(x, 2, "take_cols");
  const Tensor& xv = x.value();
  const std::size_t m = xv.shape()[0], n = xv.shape()[1];
  if (cols.size() != m || m == 0) throw DimensionError("take_cols: one column list per row required");
  const std::size_t k = cols[0].size();
  Tensor out(Shape{m, k});
  for (std::size_t i = 0; i < m; ++i) {
    if (cols[i].size() != k) throw DimensionError("take_cols: ragged selection");
    for (std::size_t j = 0; j < k; ++j) {
      if (cols[i][j] >= n) throw DimensionError("take_cols: column index out of range");
      out[i * k + j] = xv[i * n + cols[i][j]];
    }
  }
  const std::size_t xi = x.id;
  return x.tape->record(std::move(out), {xi}, [xi, m, n, k, cols = std::move(cols)](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_slot(xi);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < k; ++j) gx[i * n + cols[i][j]] += g[i * k + j];
    }
  });
}

/// Zero tensor of `shape` with x's elements written at flat `positions`.
inline Var embed(Var x, Shape shape, std::vector<std::size_t> positions) {
  const Tensor& xv = x.value();
  if (positions.size() != xv.size()) throw DimensionError("embed: one position per element required");
  Tensor out(std::move(shape), 0.0);
  for (std::size_t i = 0; i < positions.size(); ++i) {
    if (positions[i] >= out.size()) throw DimensionError("embed: position out of range");
    out[positions[i]] = xv[i];
  }
  const std::size_t xi = x.id;
  return x.tape->record(std::move(out), {xi}, [xi, positions = std::move(positions)](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_slot(xi);
    for (std::size_t i = 0; i < positions.size(); ++i) gx[i] += g[positions[i]];
  });
}

/// Location of one routed contribution: row `row` of `parts[part]`.
struct Slot {
  std::size_t part = 0;
  std::size_t row = 0;
};

/// Weighted mixture of gathered part outputs:
///   out[b] = sum_k weights[b][k] * parts[slots[b][k].part][slots[b][k].row]
/// summed in ascending k.
inline Var mixture_combine(std::span<const Var> parts, Var weights, std::vector<std::vector<Slot>> slots) {
  detail::require_rank(weights, 2, "mixture_combine");
  const Tensor& wv = weights.value();
  const std::size_t batch = wv.shape()[0], k = wv.shape()[1];
  if (slots.size() != batch || parts.empty()) throw DimensionError("mixture_combine: slot table does not match batch");
  const std::size_t d = parts[0].value().cols();
  std::vector<std::size_t> part_ids;
  part_ids.reserve(parts.size());
  for (const Var& p : parts) {
    detail::require_same_tape(p, weights);
    detail::require_rank(p, 2, "mixture_combine");
    if (p.value().cols() != d) throw DimensionError("mixture_combine: parts differ in width");
    part_ids.push_back(p.id);
  }
  Tensor out(Shape{batch, d}, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    if (slots[b].size() != k) throw DimensionError("mixture_combine: slot count differs from top_k");
    double* o = &out[b * d];
    for (std::size_t j = 0; j < k; ++j) {
      const Slot s = slots[b][j];
      const Tensor& pv = parts[s.part].value();
      const double w = wv[b * k + j];
      const double* src = &pv[s.row * d];
      for (std::size_t c = 0; c < d; ++c) o[c] += w * src[c];
    }
  }
  std::vector<std::size_t> parents = part_ids;
  parents.push_back(weights.id);
  const std::size_t wi = weights.id;
  return weights.tape->record(
      std::move(out), std::move(parents),
      [wi, batch, k, d, part_ids = std::move(part_ids), slots = std::move(slots)](Tape& t, const Tensor& g) {
        const Tensor& wv = t.value(wi);
        const bool w_grad = t.requires_grad(wi);
        for (std::size_t b = 0; b < batch; ++b) {
          const double* gb = &g[b * d];
          for (std::size_t j = 0; j < k; ++j) {
            const Slot s = slots[b][j];
            const std::size_t pid = part_ids[s.part];
            if (w_grad) {
              const Tensor& pv = t.value(pid);
              double acc = 0.0;
              for (std::size_t c = 0; c < d; ++c) acc += gb[c] * pv[s.row * d + c];
              t.grad_slot(wi)[b * k + j] += acc;
            }
            if (t.requires_grad(pid)) {
              Tensor& gp = t.grad_slot(pid);
              const double w = wv[b * k + j];
              for (std::size_t c = 0; c < d; ++c) gp[s.row * d + c] += w * gb[c];
            }
          }
        }
      });
}

/// Global L2 norm across a set of gradients.
inline double global_norm(std::span<const Tensor* const> grads) {
  double s = 0.0;
  for (const Tensor* g : grads) {
    for (double v : g->data()) s += v * v;
  }
  return std::sqrt(s);
}

/// Scales every gradient by max_norm/g when the global norm g exceeds
/// max_norm. Returns the norm before clipping.
inline double clip_global_norm(std::span<Tensor* const> grads, double max_norm) {
  if (!(max_norm > 0.0)) throw ConfigError("clip_global_norm: max_norm must be positive");
  std::vector<const Tensor*> view(grads.begin(), grads.end());
  const double norm = global_norm(view);
  if (norm > max_norm) {
    const double factor = max_norm / norm;
    for (Tensor* g : grads) {
      for (double& v : g->data()) v *= factor;
    }
  }
  return norm;
}

/// Value-semantics variant: returns the clipped copies.
inline std::vector<Tensor> clip_global_norm(std::vector<Tensor> grads, double max_norm) {
  std::vector<Tensor*> ptrs;
  for (auto& g : grads) ptrs.push_back(&g);
  clip_global_norm(std::span<Tensor* const>(ptrs), max_norm);
  return grads;
}

}  // namespace hetmoe::ndgrad
