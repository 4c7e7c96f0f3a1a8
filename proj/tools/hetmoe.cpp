#include <iostream>

#include "CLI11.hpp"

#include "hetmoe/cli.hpp"

namespace cli = hetmoe::cli;

int main(int argc, char** argv) {
  CLI::App app{"Multi-dataset mixture-of-experts training and modular adaptation"};
  app.require_subcommand(1);

  cli::TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "heterogeneous pretraining (or resume from a checkpoint)");
  train_cmd->add_option("--config", train.config, "run configuration JSON");
  train_cmd->add_option("--checkpoint", train.checkpoint, "checkpoint to resume from");
  train_cmd->add_option("--out", train.out, "checkpoint to write")->required();
  train_cmd->add_option("--metrics", train.metrics, "per-step NDJSON metrics file");
  train_cmd->add_option("--seed", train.seed, "override model and training seeds");

  cli::AdaptArgs adapt;
  auto* adapt_cmd = app.add_subcommand("adapt", "adapt a checkpoint to a dataset following an adaptation plan");
  adapt_cmd->add_option("--checkpoint", adapt.checkpoint, "input checkpoint")->required();
  adapt_cmd->add_option("--config", adapt.config, "JSON document with an \"adapt\" section")->required();
  adapt_cmd->add_option("--out", adapt.out, "adapted checkpoint to write")->required();
  adapt_cmd->add_option("--report", adapt.report, "also write the report JSON here");
  adapt_cmd->add_option("--seed", adapt.seed, "override the fine-tuning seed");

  cli::ExpandArgs expand;
  auto* expand_cmd = app.add_subcommand("expand", "continual learning step: add experts and a new dataset");
  expand_cmd->add_option("--checkpoint", expand.checkpoint, "input checkpoint")->required();
  expand_cmd->add_option("--config", expand.config, "JSON document with an \"expand\" section")->required();
  expand_cmd->add_option("--out", expand.out, "expanded checkpoint to write")->required();
  expand_cmd->add_option("--report", expand.report, "also write the report JSON here");
  expand_cmd->add_option("--experts", expand.experts, "experts to add per MoE layer (overrides the config)");
  expand_cmd->add_option("--seed", expand.seed, "override the fine-tuning seed");

  cli::EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "print metrics JSON for registered datasets");
  eval_cmd->add_option("--checkpoint", eval.checkpoint, "checkpoint")->required();
  eval_cmd->add_option("--datasets", eval.datasets, "comma-separated dataset ids (default: all)");
  eval_cmd->add_option("--split", eval.split, "train or test")->capture_default_str();

  cli::GradcheckArgs grad;
  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient battery");
  grad_cmd->add_option("--seed", grad.seed, "seed for random points")->capture_default_str();
  grad_cmd->add_option("--points", grad.points, "random points per check")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : cli::kConfig;
  }

  return cli::guarded(std::cerr, [&] {
    if (*train_cmd) return cli::cmd_train(train, std::cout);
    if (*adapt_cmd) return cli::cmd_adapt(adapt, std::cout);
    if (*expand_cmd) return cli::cmd_expand(expand, std::cout);
    if (*eval_cmd) return cli::cmd_eval(eval, std::cout);
    return cli::cmd_gradcheck(grad, std::cout);
  });
}
