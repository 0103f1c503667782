#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mabn/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{"normalization-layer laboratory"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_flag;
  app.add_option("-c,--config", config_path, "JSON config file");
  app.add_option("-o,--out", out_flag,
                 "output directory (default: $MABN_OUT_DIR or ./out)");

  std::vector<std::uint64_t> seeds;
  std::string resume, checkpoint_out;
  std::size_t stop_at = 0;
  auto* train = app.add_subcommand("train", "train on the synthetic task");
  train->add_option("--seeds", seeds, "run one training per seed, report medians");
  train->add_option("--resume", resume, "checkpoint to resume from");
  train->add_option("--checkpoint-out", checkpoint_out, "checkpoint path");
  train->add_option("--stop-at", stop_at, "stop after this iteration");

  std::string eval_ckpt;
  auto* evaluate = app.add_subcommand("evaluate", "top-1 error of a checkpoint");
  evaluate->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();

  std::string gc_layer = "bn";
  std::size_t gc_batch = 4, gc_channels = 3;
  std::uint64_t gc_seed = 1;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check");
  gradcheck->add_option("--layer", gc_layer,
                        "bn|modified|conv|affine|relu|softmax");
  gradcheck->add_option("--batch", gc_batch, "batch size");
  gradcheck->add_option("--channels", gc_channels, "channel count");
  gradcheck->add_option("--seed", gc_seed, "rng seed");

  std::string which;
  std::size_t trials = 0;
  double alpha = 0.0;
  auto* verify = app.add_subcommand("verify-theorem", "Monte-Carlo checks");
  verify->add_option("--which", which, "ema|sma|gap");
  verify->add_option("--trials", trials, "MC trials");
  verify->add_option("--alpha", alpha, "EMA momentum");

  app.add_subcommand("bench", "inference throughput of folded vs instance norm");
  app.add_subcommand("stats-trace", "emit statistic-norm traces for a run");
  app.add_subcommand("fold", "fold a random conv stack and verify equivalence");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    mabn::RunConfig cfg = config_path.empty()
                              ? mabn::parse_config(nlohmann::json::object())
                              : mabn::load_config(config_path);
    const auto out_dir = mabn::resolve_out_dir(out_flag);

    if (train->parsed())
      return mabn::cmd_train(cfg, seeds, out_dir, resume, checkpoint_out,
                             stop_at);
    if (evaluate->parsed()) return mabn::cmd_evaluate(cfg, eval_ckpt, out_dir);
    if (gradcheck->parsed()) {
      double err = 0.0;
      const int rc =
          mabn::cmd_gradcheck(gc_layer, gc_batch, gc_channels, gc_seed, err);
      std::cout << "max relative error " << err << "\n";
      return rc;
    }
    if (verify->parsed()) {
      if (!which.empty()) cfg.theorem_which = which;
      if (trials > 0) cfg.theorem.trials = trials;
      if (alpha > 0.0) cfg.theorem.alpha = alpha;
      return mabn::cmd_verify_theorem(cfg, out_dir);
    }
    if (app.get_subcommand("bench")->parsed())
      return mabn::cmd_bench(cfg, out_dir);
    if (app.get_subcommand("stats-trace")->parsed())
      return mabn::cmd_stats_trace(cfg, out_dir);
    if (app.get_subcommand("fold")->parsed())
      return mabn::cmd_fold_check(cfg, out_dir);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
