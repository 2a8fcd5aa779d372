#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "physfed/model.hpp"
#include "physfed/objective.hpp"
#include "physfed/phantom.hpp"
#include "physfed/protocol.hpp"
#include "physfed/reportfeat.hpp"

namespace physfed {

struct AdamConfig {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct FederationConfig {
  int rounds = 30;
  int local_epochs = 1;
  int batch_size = 4;
  AdamConfig adam;
  LossConfig loss;
  AblationFlags ablation;
  bool disable_orth = false;
  /// Clear each client's Adam moments at the start of every round.
  bool reset_moments = false;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Parameters aggregated by the server. In the generic paradigm the single
/// decoder travels with them.
struct SharedPartition {
  ParamSet encoder;
  ParamSet hs;
  ParamSet ha;
  std::optional<ParamSet> decoder;

  bool operator==(const SharedPartition&) const = default;
};

/// Per-parameter first and second moments plus the step count.
struct AdamState {
  std::map<std::string, ad::Tensor> m;
  std::map<std::string, ad::Tensor> v;
  long long step = 0;

  void clear();
};

struct ClientState {
  int client_id = 0;
  ClientDataset dataset;
  NormalizedProtocol g_hat;
  /// One report feature per dataset sample, same order.
  std::vector<std::vector<double>> features;
  ParamSet decoder;
  AdamState adam;
  SharedPartition shared;
};

/// Computes report features for every sample from the normalized low-dose
/// image and its anatomy metadata.
ClientState make_client_state(ClientDataset dataset, const MinMaxStats& stats, const ReportProvider& provider);

/// p_0 + sum_k w_k / W (p_k - p_0), summed in list order; exact fixed point
/// for identical snapshots.
SharedPartition aggregate(std::span<const SharedPartition> snapshots, std::span<const double> weights);

/// One Adam update of `params` given gradients, keyed by `prefix + name`.
void adam_step(ParamSet& params, const std::map<std::string, ad::Tensor>& grads, const std::string& prefix,
               AdamState& state, const AdamConfig& cfg);

struct LocalResult {
  SharedPartition shared;
  double mean_loss = 0.0;
  int steps = 0;
};

/// E epochs of mini-batch Adam on {encoder, H_s, H_a, own decoder}. The
/// client's decoder and moments are updated in place. `all_g` holds every
/// known client's normalized protocol; `self` is this client's position in it.
LocalResult local_train(const SharedPartition& shared, ClientState& client, const FederationConfig& cfg,
                        const ModelConfig& model, std::span<const NormalizedProtocol> all_g, std::size_t self,
                        int round);

/// Combined view for inference: shared partition plus decoders.
ModelParameters assemble(const SharedPartition& shared, std::span<const ClientState> clients);

MetricRecord evaluate_client(const ModelParameters& params, const ModelConfig& model, const AblationFlags& flags,
                             const ClientState& client, Split split, int round);

/// Metrics of the un-processed normalized low-dose inputs.
MetricRecord evaluate_inputs(const ClientState& client, Split split);

double max_abs_pairwise_cosine(std::span<const ad::Tensor> codes);

struct TrainedState {
  ModelConfig model;
  AblationFlags flags;
  ModelParameters params;
  std::vector<int> client_ids;
  std::vector<NormalizedProtocol> g_hats;
  std::map<int, ad::Tensor> codes;
  std::vector<MetricRecord> history;
  /// Index 0 is the initial model, index r the state after round r.
  std::vector<double> max_code_cosine;
};

struct RoundView {
  int round;
  const SharedPartition& shared;
  std::span<const ClientState> clients;
  std::span<const MetricRecord> metrics;
};

using RoundHook = std::function<void(const RoundView&)>;

/// Algorithm 1: broadcast, parallel local training, weighted aggregation.
/// Decoders stay on their clients. Test metrics are recorded every round.
TrainedState run_federation(std::vector<ClientState>& clients, const FederationConfig& cfg, const ModelConfig& model,
                            const RoundHook& on_round = {});

/// Initial shared partition and per-client decoders for a run.
SharedPartition initial_state(std::vector<ClientState>& clients, const FederationConfig& cfg, const ModelConfig& model);

}  // namespace physfed
