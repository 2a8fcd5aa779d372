#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "physfed/federation.hpp"
#include "physfed/model.hpp"
#include "physfed/protocol.hpp"
#include "physfed/reportfeat.hpp"

namespace YAML {
class Node;
}

namespace physfed::app {

struct ClientEntry {
  int client_id = 0;
  Protocol protocol;
  std::optional<int> builtin;  // 1-based Table A index when taken from the builtin list
  std::vector<std::uint64_t> train_seeds;
  std::vector<std::uint64_t> test_seeds;
  std::uint64_t noise_seed = 0;
  int train_slices = 8;
  int test_slices = 4;
};

struct DatasetConfig {
  int image_size = 64;
  double electronic_variance = 10.0;
  std::vector<ClientEntry> clients;
};

struct UnseenEntry {
  Protocol protocol;
  std::optional<int> builtin;  // 1-based Table B index
  std::vector<std::uint64_t> test_seeds;
  std::uint64_t noise_seed = 0;
  int slices = 4;
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "runs/experiment";
  DatasetConfig dataset;
  ModelConfig model;
  FederationConfig federation;
  /// Write a checkpoint every k rounds; 0 keeps only the initial and final ones.
  int checkpoint_every = 0;
  ProviderConfig provider;
  std::vector<UnseenEntry> unseen;

  std::vector<Protocol> known_protocols() const;
  std::vector<int> client_ids() const;
};

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> output_dir;
  bool generic = false;
};

/// Parses and resolves a config: derived seeds are made explicit, sizes shared
/// between blocks are reconciled, everything is validated. Throws
/// Error(ErrorCode::Config) on any problem.
ExperimentConfig parse_config(const YAML::Node& root, const Overrides& overrides = {});
ExperimentConfig load_config(const std::filesystem::path& path, const Overrides& overrides = {});
ExperimentConfig parse_config_text(const std::string& text, const Overrides& overrides = {});

std::vector<std::string> preset_names();
/// YAML text of a builtin preset; throws Config for unknown names.
std::string preset_text(const std::string& name);
ExperimentConfig preset_config(const std::string& name, const Overrides& overrides = {});

/// Fully resolved YAML that parses back to the same config.
std::string emit_config(const ExperimentConfig& cfg);

}  // namespace physfed::app
