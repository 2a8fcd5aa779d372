#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "physfed/app/config.hpp"
#include "physfed/error.hpp"
#include "physfed/federation.hpp"
#include "physfed/pvqs.hpp"

namespace physfed::app {

/// Stable process exit codes.
enum ExitCode : int { kExitOk = 0, kExitConfig = 1, kExitRuntime = 2 };

/// Maps an error to kExitConfig for validation problems, kExitRuntime otherwise.
int exit_code_for(ErrorCode code);

struct CommandOptions {
  unsigned threads = 0;  // 0 = all hardware threads
  bool dump_images = false;
  std::optional<std::filesystem::path> checkpoint;
  std::vector<int> clients;  // empty = every configured client
  bool inject_fault = false;
  std::ostream* out = nullptr;  // progress and reports; defaults to std::cout
};

struct RunPaths {
  std::filesystem::path root;
  std::filesystem::path data() const { return root / "data"; }
  std::filesystem::path client_data(int client_id) const;
  std::filesystem::path train() const { return root / "train"; }
  std::filesystem::path eval() const { return root / "eval"; }
  std::filesystem::path unseen() const { return root / "unseen"; }
  std::filesystem::path codebook() const { return root / "codebook"; }
  std::filesystem::path final_checkpoint() const { return train() / "checkpoint_final.pfm"; }
  std::filesystem::path init_checkpoint() const { return train() / "checkpoint_init.pfm"; }
};

RunPaths paths_for(const ExperimentConfig& cfg);

/// git-describe style build identifier.
std::string version_string();

/// Writes resolved_config.yaml and run_manifest.txt into `dir`.
void write_run_echo(const std::filesystem::path& dir, const ExperimentConfig& cfg, const std::string& command,
                    unsigned threads);

/// Loads every configured client's dataset and computes its report features.
std::vector<ClientState> load_clients(const ExperimentConfig& cfg, const ReportProvider& provider);

/// Rebuilds the trained state a checkpoint describes for this config.
TrainedState trained_from_checkpoint(const Checkpoint& ckpt, const ExperimentConfig& cfg);

/// Raw Table entry perturbed by +5% / -5% alternately across the seven
/// parameters; integer fields are rounded.
Protocol perturb_protocol(const Protocol& p, double fraction);

int cmd_simulate(const ExperimentConfig& cfg, const CommandOptions& opts);
int cmd_train(const ExperimentConfig& cfg, const CommandOptions& opts);
int cmd_eval(const ExperimentConfig& cfg, const CommandOptions& opts);
int cmd_infer_unseen(const ExperimentConfig& cfg, const CommandOptions& opts);
int cmd_dump_codebook(const ExperimentConfig& cfg, const CommandOptions& opts);
/// Runs without a config; writes gradcheck_report.txt into `out_dir` when given.
int cmd_gradcheck(const CommandOptions& opts, const std::optional<std::filesystem::path>& out_dir = std::nullopt);

inline constexpr const char* kUnseenReportHeader =
    "unseen_index,nv,ndb,pl,dbl,dsr,ddr,pn,matched_client,distance,psnr_mean,ssim_mean,input_psnr_mean,n_samples";

}  // namespace physfed::app
