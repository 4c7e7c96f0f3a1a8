#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "support.hpp"

using namespace hetmoe;
using hetmoe::test::numeric_grad;
using hetmoe::test::random_tensor;

namespace {

/// Gate decision over `probs` with the given column experts; only the fields
/// batch_usage reads are filled.
GateDecision decision_from(Tape& tape, const Tensor& probs, std::vector<int> experts) {
  GateDecision g;
  g.column_experts = std::move(experts);
  g.probs = tape.leaf(probs);
  g.selected.resize(probs.shape()[0]);
  return g;
}

JointBuffer buffer_for(std::size_t m, std::size_t n) {
  JointBuffer b;
  for (std::size_t j = 0; j < n; ++j) b.expert_ids.push_back(static_cast<int>(j));
  for (std::size_t i = 0; i < m; ++i) b.add_dataset(static_cast<int>(i));
  return b;
}

double entropy(const std::vector<double>& p) {
  double h = 0.0;
  for (double v : p) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

/// H(D,E) - H(D) - H(E) via three independent entropy sums.
double brute_force_mi_loss(const Tensor& p) {
  const std::size_t m = p.shape()[0], n = p.shape()[1];
  std::vector<double> joint(p.storage()), pd(m, 0.0), pe(n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      pd[i] += p.at(i, j);
      pe[j] += p.at(i, j);
    }
  }
  return entropy(joint) - entropy(pd) - entropy(pe);
}

/// Calls fn on every composition of `total` units into `cells` parts.
void compositions(std::size_t cells, int total, std::vector<int>& acc, const std::function<void(const std::vector<int>&)>& fn) {
  if (acc.size() + 1 == cells) {
    acc.push_back(total);
    fn(acc);
    acc.pop_back();
    return;
  }
  for (int k = 0; k <= total; ++k) {
    acc.push_back(k);
    compositions(cells, total - k, acc, fn);
    acc.pop_back();
  }
}

Tensor random_joint(std::size_t m, std::size_t n, Rng& rng) {
  Tensor p = random_tensor({m, n}, rng, 0.05, 1.0);
  double s = 0.0;
  for (double v : p.data()) s += v;
  for (auto& v : p.storage()) v /= s;
  return p;
}

}  // namespace

TEST(BatchUsage, DeterministicRouting) {
  Tape tape;
  Tensor probs(Shape{5, 3}, 0.0);
  for (std::size_t b = 0; b < 5; ++b) probs.at(b, 0) = 1.0;
  const JointBuffer buf = buffer_for(2, 3);
  const UsageSnapshot s = batch_usage(decision_from(tape, probs, {0, 1, 2}), buf, 1);
  const Tensor& p = s.p_joint.value();
  EXPECT_EQ(p, Tensor::matrix({{0, 0, 0}, {0.5, 0, 0}}));
  EXPECT_EQ(s.p_expert.value(), Tensor::vector({0.5, 0, 0}));
}

TEST(BatchUsage, UniformRouting) {
  Tape tape;
  const Tensor probs(Shape{7, 4}, 0.25);
  const JointBuffer buf = buffer_for(1, 4);
  const UsageSnapshot s = batch_usage(decision_from(tape, probs, {0, 1, 2, 3}), buf, 0);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_DOUBLE_EQ(s.p_joint.value()[j], 0.25);
}

TEST(BatchUsage, RandomProbsMatchBruteForceAverage) {
  Rng rng(4);
  Tape tape;
  Tensor logits = random_tensor({4, 3}, rng, -2.0, 2.0);
  const Tensor probs = ndgrad::softmax(tape.constant(logits), 1).value();
  const JointBuffer buf = buffer_for(3, 3);
  const UsageSnapshot s = batch_usage(decision_from(tape, probs, {0, 1, 2}), buf, 2);
  double row_sum = 0.0;
  for (std::size_t j = 0; j < 3; ++j) {
    double brute = 0.0;
    for (std::size_t b = 0; b < 4; ++b) brute += probs.at(b, j);
    brute /= 4.0;
    EXPECT_NEAR(s.p_joint.value().at(2, j) * 3.0, brute, 1e-15);
    EXPECT_EQ(s.p_joint.value().at(0, j), 0.0);
    EXPECT_EQ(s.p_joint.value().at(1, j), 0.0);
    row_sum += s.p_joint.value().at(2, j) * 3.0;
  }
  EXPECT_NEAR(row_sum, 1.0, 1e-10);
}

TEST(BatchUsage, ColumnsFollowBufferExpertOrder) {
  // A router created before an expert was added addresses only a subset.
  Tape tape;
  JointBuffer buf = buffer_for(1, 3);
  buf.add_experts({7});
  const Tensor probs = Tensor::matrix({{0.2, 0.8}});
  const UsageSnapshot s = batch_usage(decision_from(tape, probs, {7, 1}), buf, 0);
  EXPECT_EQ(s.p_joint.value(), Tensor::matrix({{0, 0.8, 0, 0.2}}));
}

TEST(MiLossExact, IndependenceGivesZero) {
  const Tensor p(Shape{3, 4}, 1.0 / 12.0);
  EXPECT_EQ(mi_loss_exact(p), 0.0);
}

TEST(MiLossExact, PermutationGivesMinusLn2) {
  EXPECT_EQ(mi_loss_exact(Tensor::matrix({{0.5, 0}, {0, 0.5}})), -std::numbers::ln2);
}

TEST(MiLossExact, NegativeEntryIsDomainError) {
  EXPECT_THROW(mi_loss_exact(Tensor::matrix({{0.6, -0.1}, {0, 0.5}})), DomainError);
}

TEST(MiLossExact, AgreesWithEntropyRoutineOnRationalGrid) {
  std::size_t checked = 0;
  const auto check = [&](std::size_t m, std::size_t n, int denom) {
    std::vector<int> acc;
    compositions(m * n, denom, acc, [&](const std::vector<int>& parts) {
      Tensor p(Shape{m, n});
      for (std::size_t i = 0; i < parts.size(); ++i) p[i] = static_cast<double>(parts[i]) / denom;
      EXPECT_NEAR(mi_loss_exact(p), brute_force_mi_loss(p), 1e-12);
      ++checked;
    });
  };
  check(2, 2, 8);
  check(3, 3, 4);
  EXPECT_EQ(checked, 165u + 495u);
}

TEST(MiLossExact, StaysWithinInformationBounds) {
  Rng rng(17);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t m = 1 + rng.below(5), n = 1 + rng.below(6);
    Tensor p = random_tensor({m, n}, rng, 0.0, 1.0);
    // Sparsify some entries so the 0·log 0 path is exercised.
    for (auto& v : p.storage()) {
      if (rng.uniform() < 0.3) v = 0.0;
    }
    double s = 0.0;
    for (double v : p.data()) s += v;
    if (s == 0.0) continue;
    for (auto& v : p.storage()) v /= s;
    const double l = mi_loss_exact(p);
    EXPECT_LE(l, 1e-15);
    EXPECT_GE(l, -std::min(std::log(double(m)), std::log(double(n))) - 1e-12);
  }
}

// With B = P the surrogate's gradient is exactly the gradient of the MI loss
// with P(D) held fixed: -(1 + log P_ij) + (1 + log P_j).
TEST(MiSurrogate, GradientMatchesExactLossWhenBufferEqualsP) {
  Rng rng(23);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t m = 2 + rng.below(2), n = 2 + rng.below(3);
    const Tensor p = random_joint(m, n, rng);
    Tape tape;
    const Var pv = tape.leaf(p);
    tape.backward(mi_loss_surrogate(pv, p));
    const auto exact_fixed_pd = [m, n](const Tensor& q) {
      std::vector<double> pe(n, 0.0);
      double h_joint = 0.0;
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          h_joint -= q.at(i, j) * std::log(q.at(i, j));
          pe[j] += q.at(i, j);
        }
      }
      return h_joint - entropy(pe);
    };
    const Tensor fd = numeric_grad(exact_fixed_pd, p, 1e-6);
    const Tensor& g = tape.grad(pv);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        double pj = 0.0;
        for (std::size_t r = 0; r < m; ++r) pj += p.at(r, j);
        EXPECT_NEAR(g.at(i, j), -(1.0 + std::log(p.at(i, j))) + (1.0 + std::log(pj)), 1e-12);
        EXPECT_NEAR(g.at(i, j), fd.at(i, j), 1e-8);
      }
    }
  }
}

TEST(MiSurrogate, SingleDatasetIsIdenticallyZero) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor p = random_joint(1, 5, rng);
    const Tensor b = random_joint(1, 5, rng);
    Tape tape;
    const Var pv = tape.leaf(p);
    const Var loss = mi_loss_surrogate(pv, b);
    EXPECT_NEAR(loss.value().item(), 0.0, 1e-15);
    tape.backward(loss);
    const Tensor g = tape.grad(pv);
    for (double v : g.data()) EXPECT_NEAR(v, 0.0, 1e-15);
  }
}

TEST(MiSurrogate, BufferNeverReceivesGradient) {
  Rng rng(6);
  const Tensor p = random_joint(2, 3, rng);
  const Tensor b = random_joint(2, 3, rng);
  Tape tape;
  const Var pv = tape.leaf(p);
  tape.backward(mi_loss_surrogate(pv, b));
  std::size_t grad_leaves = 0;
  for (std::size_t i = 0; i < tape.size(); ++i) {
    if (tape.parents(i).empty() && tape.requires_grad(i)) ++grad_leaves;
  }
  EXPECT_EQ(grad_leaves, 1u);  // only the snapshot
}

TEST(MiSurrogate, InvalidBufferIsDomainError) {
  Tape tape;
  const Var pv = tape.leaf(Tensor::matrix({{0.25, 0.25}, {0.25, 0.25}}));
  EXPECT_THROW(mi_loss_surrogate(pv, Tensor::matrix({{0.5, -0.1}, {0.3, 0.3}})), DomainError);
  EXPECT_THROW(mi_loss_surrogate(pv, Tensor::matrix({{0.5, 0.1, 0.1}})), DimensionError);
}

TEST(MiSurrogate, UninitialisedRowIsDomainError) {
  Tape tape;
  const JointBuffer buf = buffer_for(2, 2);
  const UsageSnapshot s = batch_usage(decision_from(tape, Tensor::matrix({{0.3, 0.7}}), {0, 1}), buf, 0);
  EXPECT_THROW(mi_loss_surrogate(s, buf), DomainError);
}

TEST(Buffer, SingleMomentumStep) {
  JointBuffer buf = buffer_for(1, 1);
  buf.rows[0][0] = 0.5;
  buf.initialized[0] = true;
  buffer_update(buf, Tensor::matrix({{0.25}}), 0);
  EXPECT_DOUBLE_EQ(buf.rows[0][0], 0.495);
  EXPECT_EQ(JointBuffer::kDefaultMomentum, 0.98);
}

TEST(Buffer, GeometricDecayTowardsStationaryEstimate) {
  JointBuffer buf = buffer_for(2, 3);
  buffer_initialize(buf, Tensor::matrix({{0.4, 0.1, 0.0}, {0, 0, 0}}), 0);
  const Tensor target = Tensor::matrix({{0.1, 0.2, 0.2}, {0, 0, 0}});
  std::vector<double> gap(3);
  for (std::size_t j = 0; j < 3; ++j) gap[j] = std::abs(buf.rows[0][j] - target.at(0, j));
  for (int step = 1; step <= 200; ++step) {
    buffer_update(buf, target, 0);
    for (std::size_t j = 0; j < 3; ++j) {
      EXPECT_NEAR(std::abs(buf.rows[0][j] - target.at(0, j)), gap[j] * std::pow(0.98, step), 1e-14);
    }
  }
  EXPECT_FALSE(buf.initialized[1]);
  EXPECT_EQ(buf.rows[1], (std::vector<double>{0, 0, 0}));
}

TEST(Buffer, LazyInitialisationHappensOnce) {
  JointBuffer buf = buffer_for(2, 2);
  buffer_initialize(buf, Tensor::matrix({{0, 0}, {0.2, 0.3}}), 1);
  EXPECT_TRUE(buf.initialized[1]);
  EXPECT_EQ(buf.rows[1], (std::vector<double>{0.2, 0.3}));
  buffer_initialize(buf, Tensor::matrix({{0, 0}, {0.4, 0.1}}), 1);
  EXPECT_EQ(buf.rows[1], (std::vector<double>{0.2, 0.3}));
  EXPECT_THROW(buffer_initialize(buf, Tensor::matrix({{0, 0}, {0, 0}}), 9), MissingEntityError);
}

TEST(TaskLoss, UniformLogitsAnyLabel) {
  for (int label = 0; label < 3; ++label) {
    Tape tape;
    Targets t;
    t.labels = {label};
    const double l = task_loss(tape.constant(Tensor::matrix({{2, 2, 2}})), t, TaskKind::Classification).value().item();
    EXPECT_NEAR(l, std::log(3.0), 1e-15);
  }
}

TEST(TaskLoss, PerfectRegressionIsZero) {
  Tape tape;
  Targets t;
  t.values = Tensor::matrix({{1, 2}, {3, 4}});
  EXPECT_EQ(task_loss(tape.constant(t.values), t, TaskKind::Regression).value().item(), 0.0);
  t.values = Tensor::matrix({{1, 2, 3}});
  EXPECT_THROW(task_loss(tape.constant(Tensor::matrix({{1, 2}})), t, TaskKind::Regression), DimensionError);
}

TEST(TaskLoss, LabelOutOfRangeIsDataError) {
  Tape tape;
  Targets t;
  t.labels = {-1};
  EXPECT_THROW(task_loss(tape.constant(Tensor::matrix({{0, 0}})), t, TaskKind::Classification), DataError);
}

// Free conditional rows, uniform P(D): descending the MI loss pushes the
// datasets onto distinct experts.
TEST(MiOptimisation, ReachesNearPermutation) {
  for (std::size_t m : {2u, 3u, 4u}) {
    Rng rng(40 + m);
    Tensor logits = random_tensor({m, m}, rng, -0.1, 0.1);
    for (int step = 0; step < 3000; ++step) {
      Tape tape;
      const Var lv = tape.leaf(logits);
      const Var p = ndgrad::scale(ndgrad::softmax(lv, 1), 1.0 / double(m));
      tape.backward(mi_loss_surrogate(p, p.value()));
      const Tensor& g = tape.grad(lv);
      for (std::size_t i = 0; i < logits.size(); ++i) logits[i] -= 2.0 * double(m) * g[i];
    }
    Tape tape;
    const Tensor p = ndgrad::scale(ndgrad::softmax(tape.constant(logits), 1), 1.0 / double(m)).value();
    EXPECT_GE(-mi_loss_exact(p), 0.95 * std::log(double(m))) << "M=" << m;
  }
}
