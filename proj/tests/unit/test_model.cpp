#include <gtest/gtest.h>

#include "support.hpp"

using namespace hetmoe;
using hetmoe::test::blobs_spec;
using hetmoe::test::random_tensor;
using hetmoe::test::sine_spec;
using hetmoe::test::small_config;

namespace {

Tensor run(Model& m, const Tensor& x, int ds) {
  Tape tape;
  return forward(tape, m, x, ds).output.value();
}

std::size_t linear_count(std::size_t in, std::size_t out) { return in * out + out; }

}  // namespace

TEST(Forward, SingleExpertModelEqualsDenseNetwork) {
  ModelConfig c = small_config();
  c.n_experts = 1;
  c.top_k = 1;
  c.hidden_budget = 16;
  Model m(c);
  register_dataset(m, blobs_spec(0));
  Rng rng(3);
  const Tensor x = random_tensor({64, 8}, rng, -2.0, 2.0);

  // The same network written out without routing.
  Tape tape;
  Var h = linear_forward(tape, m.embed, tape.constant(x));
  for (auto& blk : m.blocks) {
    const Var a = ndgrad::tanh(linear_forward(tape, blk.dense, h));
    h = ndgrad::add(h, expert_forward(tape, blk.moe->experts[0], a));
  }
  const Tensor dense = linear_forward(tape, m.heads.at(0).linear, h).value();
  EXPECT_EQ(hetmoe::test::max_abs_diff(run(m, x, 0), dense), 0.0);
}

TEST(Forward, DefaultsAreTwelveExpertsTopFour) {
  const ModelConfig c;
  EXPECT_EQ(c.n_experts, 12u);
  EXPECT_EQ(c.top_k, 4u);
  EXPECT_EQ(c.d, 64u);
  EXPECT_EQ(c.n_blocks, 4u);
  EXPECT_EQ(c.moe_every, 1u);
  EXPECT_EQ(c.hidden_budget, 256u);
}

TEST(Forward, IsPureAndRepeatable) {
  Model m(small_config());
  register_dataset(m, blobs_spec(0));
  Rng rng(4);
  const Tensor x = random_tensor({32, 8}, rng);
  const auto before = hetmoe::test::snapshot(m);
  const auto buffer = m.moe_layers()[0]->buffer.rows;
  EXPECT_EQ(run(m, x, 0), run(m, x, 0));
  EXPECT_EQ(hetmoe::test::snapshot(m), before);
  EXPECT_EQ(m.moe_layers()[0]->buffer.rows, buffer);
}

TEST(Forward, UnknownDatasetAndWrongWidth) {
  Model m(small_config());
  register_dataset(m, blobs_spec(0));
  Tape tape;
  EXPECT_THROW(forward(tape, m, Tensor(Shape{2, 8}), 5), MissingEntityError);
  EXPECT_THROW(forward(tape, m, Tensor(Shape{2, 7}), 0), DimensionError);
}

TEST(Forward, MoeEveryControlsWhichBlocksRoute) {
  ModelConfig c = small_config();
  c.n_blocks = 4;
  c.moe_every = 2;
  Model m(c);
  ASSERT_EQ(m.moe_layers().size(), 2u);
  EXPECT_FALSE(m.blocks[0].moe.has_value());
  EXPECT_TRUE(m.blocks[1].moe.has_value());
  EXPECT_FALSE(m.blocks[2].moe.has_value());
  EXPECT_TRUE(m.blocks[3].moe.has_value());
  register_dataset(m, blobs_spec(0));
  Tape tape;
  EXPECT_EQ(forward(tape, m, Tensor(Shape{3, 8}, 0.1), 0).moe.size(), 2u);
}

// Task loss of a 2-block, 3-expert model against central differences.
TEST(Forward, EndToEndGradientThreeExperts) {
  ModelConfig c = small_config(9);
  c.input_dim = 3;
  c.d = 4;
  c.n_experts = 3;
  c.top_k = 2;
  c.hidden_budget = 6;
  Model m(c);
  register_dataset(m, blobs_spec(0, 3, 3, 3));
  Rng rng(10);
  const Tensor x = random_tensor({5, 3}, rng);
  Targets y;
  y.labels = {0, 2, 1, 1, 0};
  auto loss_and_sel = [&](std::vector<std::vector<std::vector<int>>>* sel) {
    Tape tape;
    const ForwardResult f = forward(tape, m, x, 0);
    if (sel) {
      sel->clear();
      for (const auto& l : f.moe) sel->push_back(l.gate.selected);
    }
    return task_loss(f.output, y, TaskKind::Classification).value().item();
  };
  auto params = parameters(m);
  for (auto& p : params) p.param->zero_grad();
  std::vector<std::vector<std::vector<int>>> base;
  {
    Tape tape;
    const ForwardResult f = forward(tape, m, x, 0);
    for (const auto& l : f.moe) base.push_back(l.gate.selected);
    tape.backward(task_loss(f.output, y, TaskKind::Classification));
  }
  double worst = 0.0;
  std::size_t checked = 0;
  for (auto& p : params) {
    for (std::size_t i = 0; i < p.param->size(); ++i) {
      const double orig = p.param->value[i];
      std::vector<std::vector<std::vector<int>>> sp, sm;
      p.param->value[i] = orig + 1e-5;
      const double fp = loss_and_sel(&sp);
      p.param->value[i] = orig - 1e-5;
      const double fm = loss_and_sel(&sm);
      p.param->value[i] = orig;
      if (sp != base || sm != base) continue;
      worst = std::max(worst, gradcheck_rel_error(p.param->grad[i], (fp - fm) / 2e-5));
      ++checked;
    }
  }
  EXPECT_GT(checked, 100u);
  EXPECT_LT(worst, 1e-4);
}

TEST(ParamCount, MatchesEnumeration) {
  ModelConfig c = small_config();
  c.moe_every = 2;
  Model m(c);
  register_dataset(m, blobs_spec(0, 5));
  register_dataset(m, sine_spec(1, 3), 2);
  std::size_t enumerated = 0;
  for (const auto& p : parameters(m)) enumerated += p.param->size();
  EXPECT_EQ(param_count(m, ParamSelector::All), enumerated);
  EXPECT_EQ(param_count(m, ParamSelector::All), param_count(m, ParamSelector::Backbone) +
                                                    param_count(m, ParamSelector::Routers) +
                                                    param_count(m, ParamSelector::Heads));

  const std::size_t d = c.d, n = c.n_experts, h = c.expert_width(), layers = 1;
  EXPECT_EQ(param_count(m, ParamSelector::Routers), 2 * layers * d * n);
  EXPECT_EQ(param_count(m, ParamSelector::Heads), linear_count(d, 5) + linear_count(d, 3));
  EXPECT_EQ(param_count(m, ParamSelector::Experts), layers * n * (linear_count(d, h) + linear_count(h, d)));
  EXPECT_EQ(param_count(m, ParamSelector::Backbone),
            linear_count(8, d) + c.n_blocks * linear_count(d, d) + param_count(m, ParamSelector::Experts));
}

// Expert width is hidden_budget / K, so the width of the active computation
// (K experts of width h) is the same for every K.
TEST(ParamCount, FlopsMatchedWidths) {
  ModelConfig c;
  c.hidden_budget = 1536;
  std::vector<std::size_t> active;
  for (auto [k, h] : {std::pair<std::size_t, std::size_t>{2, 768}, {4, 384}, {6, 256}}) {
    c.top_k = k;
    EXPECT_EQ(c.expert_width(), h);
    Model m(c);
    const MoELayer& layer = *m.moe_layers()[0];
    EXPECT_EQ(layer.experts[0].hidden(), h);
    active.push_back(k * layer.experts[0].param_count());
  }
  // Active expert parameters per sample differ only by the K·d output biases.
  EXPECT_EQ(active[0] - 2 * c.d, active[1] - 4 * c.d);
  EXPECT_EQ(active[1] - 4 * c.d, active[2] - 6 * c.d);
}

TEST(ParamCount, UnevenBudgetIsConfigError) {
  ModelConfig c;
  c.hidden_budget = 250;
  EXPECT_THROW(Model{c}, ConfigError);
  c = ModelConfig{};
  c.top_k = 13;
  EXPECT_THROW(Model{c}, ConfigError);
}

TEST(Register, AddsRoutersHeadAndBufferRows) {
  Model m(small_config());
  register_dataset(m, blobs_spec(0));
  register_dataset(m, sine_spec(3), 2);
  for (const auto* layer : m.moe_layers()) {
    EXPECT_EQ(layer->routers.size(), 2u);
    EXPECT_EQ(layer->router(3).top_k, 2u);
    EXPECT_EQ(layer->router(0).top_k, 4u);
    EXPECT_EQ(layer->router(3).w_g.value.shape(), (Shape{8, 12}));
    EXPECT_EQ(layer->buffer.dataset_ids, (std::vector<int>{0, 3}));
  }
  EXPECT_EQ(m.heads.at(3).linear.bias.size(), 2u);
  EXPECT_EQ(m.heads.at(3).kind, TaskKind::Regression);
}

TEST(Register, DuplicateIsStructuralErrorAndBadTopKRejected) {
  Model m(small_config());
  register_dataset(m, blobs_spec(0));
  EXPECT_THROW(register_dataset(m, blobs_spec(0)), StructuralError);
  EXPECT_THROW(register_dataset(m, blobs_spec(1), 13), StructuralError);
  EXPECT_THROW(register_dataset(m, blobs_spec(2, 4, 3, 5)), ConfigError);
  EXPECT_FALSE(m.knows(1));
  EXPECT_FALSE(m.knows(2));
}

TEST(Register, OldOutputsUnchanged) {
  Model m(small_config());
  register_dataset(m, blobs_spec(0));
  Rng rng(6);
  const Tensor x = random_tensor({40, 8}, rng);
  const Tensor before = run(m, x, 0);
  register_dataset(m, sine_spec(1), 2);
  EXPECT_EQ(run(m, x, 0), before);
}

TEST(Register, FreezeAllButNewRoutersAndHead) {
  Model m(small_config());
  register_dataset(m, blobs_spec(0));
  register_dataset(m, blobs_spec(1, 3, 8));
  set_all_frozen(m, true);
  for (auto* layer : m.moe_layers()) set_routers_frozen(*layer, {1}, false);
  m.heads.at(1).linear.set_frozen(false);
  EXPECT_EQ(trainable_param_count(m), 2 * 8 * 12 + linear_count(8, 3));
}
