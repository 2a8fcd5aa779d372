#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "physfed/app/commands.hpp"
#include "physfed/app/config.hpp"
#include "physfed/error.hpp"

using namespace physfed;
using namespace physfed::app;

int main(int argc, char** argv) {
  CLI::App app{"physfed: dual-level personalized federated CT reconstruction"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::string preset;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  unsigned threads = 0;
  CommandOptions opts;
  bool generic = false;

  app.add_option("--config", config_path, "Experiment config (YAML)");
  app.add_option("--preset", preset, "Builtin preset: desk4 or paper8");
  app.add_option("--seed", seed, "Override the global seed");
  app.add_option("--threads", threads, "Worker thread cap (1 = bit-reproducible mode)");
  app.add_option("--out", out, "Override the output directory");
  app.add_flag("--dump-images", opts.dump_images, "eval: write prediction/input/reference PGMs");
  app.add_option("--checkpoint", opts.checkpoint, "Checkpoint to load instead of the run's final one");
  app.add_option("--clients", opts.clients, "eval: restrict to these client ids");
  app.add_flag("--generic", generic, "train the image-only baseline: shared decoder, no hypernetworks");
  app.add_flag("--inject-fault", opts.inject_fault, "gradcheck: plant a known backward bug")->group("");

  auto* simulate = app.add_subcommand("simulate", "Simulate per-client low-dose datasets");
  auto* train = app.add_subcommand("train", "Run federated training");
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on every client's test split");
  auto* unseen = app.add_subcommand("infer-unseen", "Route unseen protocols through the codebook and evaluate");
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every operator and the model path");
  auto* dump = app.add_subcommand("dump-codebook", "Print the protocol codebook of a checkpoint");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  opts.threads = threads;
  try {
    if (gradcheck->parsed()) {
      std::optional<std::filesystem::path> dir;
      if (out) dir = *out;
      return cmd_gradcheck(opts, dir);
    }
    if (!config_path.empty() && !preset.empty()) throw Error(ErrorCode::Config, "give either --config or --preset, not both");
    if (config_path.empty() && preset.empty()) throw Error(ErrorCode::Config, "a --config or --preset is required");
    Overrides ov;
    ov.seed = seed;
    if (out) ov.output_dir = *out;
    ov.generic = generic;
    const auto cfg = config_path.empty() ? preset_config(preset, ov) : load_config(config_path, ov);

    if (simulate->parsed()) return cmd_simulate(cfg, opts);
    if (train->parsed()) return cmd_train(cfg, opts);
    if (eval->parsed()) return cmd_eval(cfg, opts);
    if (unseen->parsed()) return cmd_infer_unseen(cfg, opts);
    if (dump->parsed()) return cmd_dump_codebook(cfg, opts);
  } catch (const Error& e) {
    std::cerr << "error [" << to_string(e.code()) << "]: " << e.what() << '\n';
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitConfig;
}
