#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "physfed/autodiff.hpp"
#include "physfed/image.hpp"
#include "physfed/protocol.hpp"

namespace physfed {

struct ModelConfig {
  int channels = 32;     // encoder output channels C
  int report_dim = 64;   // f_t length d
  int hidden_dim = 32;   // anatomy hidden width h
  int code_dim = 16;     // protocol code length m
  int n_heads = 4;
  int token_count = 8;
  int image_size = 64;

  /// Throws InvalidArgument on inconsistent sizes.
  void validate() const;
  int token_width() const { return hidden_dim / token_count; }
  int head_dim() const { return token_width() / n_heads; }

  bool operator==(const ModelConfig&) const = default;
};

/// Named tensors, iterated in name order.
using ParamSet = std::map<std::string, ad::Tensor>;

/// Key of the single decoder used by the generic (shared-decoder) paradigm.
inline constexpr int kSharedDecoder = -1;

struct ModelParameters {
  ParamSet encoder;
  ParamSet hs;  // scanning hypernetwork
  ParamSet ha;  // anatomy hypernetwork
  std::map<int, ParamSet> decoders;

  const ParamSet& decoder(int client_id) const;
  ParamSet& decoder(int client_id);
};

struct InitOptions {
  /// Zero the alpha/beta heads, the anatomy output layer and the last decoder
  /// conv so that the untrained network is the identity map.
  bool zero_final_layers = true;
  /// Scale applied to the He-uniform code head. Orthogonality loss grows with
  /// the fourth power of code norm; small codes keep tau * L_orth well below
  /// the early reconstruction MSE.
  double code_gain = 0.03;
};

/// He-uniform weights, zero biases. Every decoder copy starts identical.
ModelParameters init_params(const ModelConfig& cfg, std::uint64_t seed, const std::vector<int>& decoder_ids,
                            InitOptions opts = {});

/// Leaf variables for one parameter set on a tape.
class BoundParams {
 public:
  BoundParams() = default;
  BoundParams(ad::Tape& tape, const ParamSet& params);
  ad::Var operator[](const std::string& name) const;
  /// Replaces the leaf of an existing parameter, e.g. with a variable owned
  /// by a gradient check.
  void rebind(const std::string& name, ad::Var v);
  const std::map<std::string, ad::Var>& vars() const { return vars_; }

 private:
  std::map<std::string, ad::Var> vars_;
};

struct ScanningOutputs {
  ad::Var alpha;  // C
  ad::Var beta;   // C
  ad::Var code;   // 1 x m
};

/// f_X: three conv+relu layers, 1 -> 16 -> 32 -> C.
ad::Var encode(const BoundParams& enc, ad::Var x);

/// Trunk of two relu layers on g-hat, then alpha = 1 + head, beta = head,
/// code = head. g_hat is 1 x 7.
ScanningOutputs scanning_hypernet(const BoundParams& hs, ad::Var g_hat);

/// Trunk plus code head only; the alpha/beta heads are not evaluated.
ad::Var scanning_code(const BoundParams& hs, ad::Var g_hat);

/// Number of alpha/beta head evaluations on this thread. Instrumentation for
/// checking which heads a code path touches.
std::uint64_t alpha_beta_head_evaluations();

/// Multi-head self-attention over tokens (token_count x token_width) followed
/// by the output projection.
ad::Var attention_core(const BoundParams& ha, const ModelConfig& cfg, ad::Var tokens);

/// f_an = 1 + Linear(MHA(tokens(Linear(AvgPool(f_t))))) reshaped to 1 x H x W.
ad::Var anatomy_hypernet(const BoundParams& ha, const ModelConfig& cfg, ad::Var f_t);

/// f_per = alpha (x) (f_X . f_an) + beta.
ad::Var modulate(ad::Var f_x, ad::Var f_an, ad::Var alpha, ad::Var beta);

/// conv C->32 relu, 32->16 relu, 16->1, plus x_input.
ad::Var decode(const BoundParams& dec, ad::Var f_per, ad::Var x_input);

struct AblationFlags {
  bool disable_scanning = false;  // alpha = 1, beta = 0
  bool disable_anatomy = false;   // f_an = 1
  bool generic_decoder = false;   // one decoder for every client

  bool operator==(const AblationFlags&) const = default;
};

/// Scanning modulation supplied directly instead of from H_s(g-hat).
struct ScanOverride {
  ad::Tensor alpha;
  ad::Tensor beta;
};

struct ForwardGraph {
  ad::Var prediction;  // 1 x H x W
  ad::Var code;        // 1 x m; invalid (tape == nullptr) when not computed
};

/// Full network on one image. x is 1 x H x W, g_hat 1 x 7, f_t 1 x d.
ForwardGraph forward(const BoundParams& enc, const BoundParams& hs, const BoundParams& ha, const BoundParams& dec,
                     const ModelConfig& cfg, ad::Var x, ad::Var g_hat, ad::Var f_t, const AblationFlags& flags,
                     const std::optional<ScanOverride>& scan_override = std::nullopt);

ad::Tensor image_tensor(const ImageGrid& img);
ad::Tensor protocol_tensor(const NormalizedProtocol& g);
ImageGrid tensor_image(const ad::Tensor& t, double pixel_len);

/// Value-level inference without keeping gradients around.
ImageGrid predict(const ModelParameters& params, const ModelConfig& cfg, const ImageGrid& x_norm,
                  const NormalizedProtocol& g_hat, const std::vector<double>& f_t, int client_id,
                  const AblationFlags& flags, const std::optional<ScanOverride>& scan_override = std::nullopt);

struct ScanningValues {
  ad::Tensor alpha;
  ad::Tensor beta;
  ad::Tensor code;
};
ScanningValues evaluate_scanning(const ParamSet& hs, const NormalizedProtocol& g_hat);
ad::Tensor evaluate_code(const ParamSet& hs, const NormalizedProtocol& g_hat);

// Checkpoint: "PFM1", u32 version, config block (7 x i32), u8 flags, u32 blob
// count, then per blob: u32 name length, utf-8 name, u32 rank, rank x u32
// dims, float64 data; little-endian throughout.
struct Checkpoint {
  ModelConfig config;
  AblationFlags flags;
  ModelParameters params;
};
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace physfed
