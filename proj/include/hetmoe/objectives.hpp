#pragma once

// Task losses, the dataset/expert mutual-information loss, its buffered
// surrogate, and momentum maintenance of the joint-usage buffer.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "hetmoe/error.hpp"
#include "hetmoe/joint_buffer.hpp"
#include "hetmoe/moe.hpp"
#include "hetmoe/ndgrad/ops.hpp"
#include "hetmoe/task.hpp"

namespace hetmoe {

/// Floor applied to buffer entries before taking logs.
inline constexpr double kBufferFloor = 1e-8;

/// Per-batch usage estimate. p_joint is [M x N] with only the sampled
/// dataset's row populated; p_expert holds its column sums.
struct UsageSnapshot {
  int dataset_id = 0;
  std::size_t row = 0;
  Var p_joint;
  Var p_expert;
};

/// P(E|D_i) is the batch mean of the full softmax probabilities (so it is a
/// distribution), P(D_i) = 1/M, and the row is placed at the buffer's
/// position for the dataset. Experts the router cannot address get zero.
inline UsageSnapshot batch_usage(const GateDecision& decision, const JointBuffer& buffer, int dataset_id) {
  const std::size_t m = buffer.n_datasets();
  const std::size_t n = buffer.n_experts();
  UsageSnapshot s;
  s.dataset_id = dataset_id;
  s.row = buffer.row_of(dataset_id);
  const Var conditional = ndgrad::mean_rows(decision.probs);
  const Var joint_row = ndgrad::scale(conditional, 1.0 / static_cast<double>(m));
  std::vector<std::size_t> positions;
  positions.reserve(decision.column_experts.size());
  for (int eid : decision.column_experts) positions.push_back(s.row * n + buffer.col_of(eid));
  s.p_joint = ndgrad::embed(joint_row, Shape{m, n}, std::move(positions));
  s.p_expert = ndgrad::sum_rows(s.p_joint);
  return s;
}

/// H(D,E) - H(D) - H(E) = -I(D;E) for a joint distribution, with marginals
/// taken from the matrix and 0·log 0 = 0.
inline double mi_loss_exact(const Tensor& p_joint) {
  if (p_joint.rank() != 2) throw DimensionError("mi_loss_exact: expected a matrix, got " + ndgrad::shape_str(p_joint.shape()));
  const std::size_t m = p_joint.shape()[0], n = p_joint.shape()[1];
  std::vector<double> pd(m, 0.0), pe(n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double p = p_joint.at(i, j);
      if (p < 0.0 || !std::isfinite(p)) throw DomainError("mi_loss_exact: invalid probability " + std::to_string(p));
      pd[i] += p;
      pe[j] += p;
    }
  }
  double info = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double p = p_joint.at(i, j);
      if (p > 0.0) info += p * std::log(p / (pd[i] * pe[j]));
    }
  }
  return -info;
}

namespace detail {

inline void check_buffer_values(const Tensor& b) {
  for (double v : b.data()) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw DomainError("mi_loss_surrogate: invalid buffer entry " + std::to_string(v));
  }
}

}  // namespace detail

/// Buffered surrogate of the MI loss:
///   L = -sum_ij (1 + log B_ij) P_ij + sum_j (1 + log sum_i B_ij) P_j
/// with B a constant. Its gradient in P equals that of the exact loss (with
/// P(D) fixed) whenever B = P.
inline Var mi_loss_surrogate(Var p_joint, const Tensor& b, double floor = kBufferFloor) {
  if (p_joint.shape() != b.shape() || b.rank() != 2) {
    throw DimensionError("mi_loss_surrogate: snapshot " + ndgrad::shape_str(p_joint.shape()) + " vs buffer " +
                         ndgrad::shape_str(b.shape()));
  }
  detail::check_buffer_values(b);
  const std::size_t m = b.shape()[0], n = b.shape()[1];
  Tensor joint_coef(b.shape());
  Tensor expert_coef(Shape{n}, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    double col = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      joint_coef.at(i, j) = 1.0 + std::log(std::max(b.at(i, j), floor));
      col += b.at(i, j);
    }
    expert_coef[j] = 1.0 + std::log(std::max(col, floor));
  }
  Tape& tape = *p_joint.tape;
  const Var p_expert = ndgrad::sum_rows(p_joint);
  const Var joint_term = ndgrad::sum(ndgrad::mul(tape.constant(std::move(joint_coef)), p_joint));
  const Var expert_term = ndgrad::sum(ndgrad::mul(tape.constant(std::move(expert_coef)), p_expert));
  return ndgrad::sub(expert_term, joint_term);
}

/// Training-path variant. Every dataset with mass in the snapshot must have
/// an initialised buffer row.
inline Var mi_loss_surrogate(const UsageSnapshot& snapshot, const JointBuffer& buffer) {
  const Tensor& p = snapshot.p_joint.value();
  const std::size_t n = buffer.n_experts();
  for (std::size_t r = 0; r < buffer.n_datasets(); ++r) {
    bool mass = false;
    for (std::size_t j = 0; j < n; ++j) mass = mass || p[r * n + j] != 0.0;
    if (mass && !buffer.initialized[r]) {
      throw DomainError("mi_loss_surrogate: buffer row for dataset " + std::to_string(buffer.dataset_ids[r]) +
                        " is not initialised");
    }
  }
  return mi_loss_surrogate(snapshot.p_joint, buffer.matrix());
}

/// Sets the dataset's row to the batch estimate the first time it is seen.
inline void buffer_initialize(JointBuffer& buffer, const Tensor& p_joint, int dataset_id) {
  const std::size_t r = buffer.row_of(dataset_id);
  if (buffer.initialized[r]) return;
  const std::size_t n = buffer.n_experts();
  for (std::size_t j = 0; j < n; ++j) buffer.rows[r][j] = p_joint[r * n + j];
  buffer.initialized[r] = true;
}

/// B[i,:] <- momentum·B[i,:] + (1 - momentum)·P[i,:] for the sampled row.
inline void buffer_update(JointBuffer& buffer, const Tensor& p_joint, int dataset_id) {
  const std::size_t r = buffer.row_of(dataset_id);
  const std::size_t n = buffer.n_experts();
  if (p_joint.size() != buffer.n_datasets() * n) throw DimensionError("buffer_update: snapshot does not match buffer");
  const double mu = buffer.momentum;
  for (std::size_t j = 0; j < n; ++j) buffer.rows[r][j] = mu * buffer.rows[r][j] + (1.0 - mu) * p_joint[r * n + j];
  buffer.initialized[r] = true;
}

/// Cross-entropy for classification, mean squared error for regression.
inline Var task_loss(Var output, const Targets& target, TaskKind kind) {
  if (kind == TaskKind::Classification) return ndgrad::cross_entropy(output, target.labels);
  if (target.values.shape() != output.shape()) {
    throw DimensionError("task_loss: regression target " + ndgrad::shape_str(target.values.shape()) +
                         " vs output " + ndgrad::shape_str(output.shape()));
  }
  return ndgrad::mse(output, output.tape->constant(target.values));
}

}  // namespace hetmoe
