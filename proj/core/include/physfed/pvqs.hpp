#pragma once

#include <filesystem>
#include <iosfwd>
#include <span>
#include <vector>

#include "physfed/federation.hpp"
#include "physfed/model.hpp"
#include "physfed/protocol.hpp"

namespace physfed {

struct CodebookEntry {
  int client_id = 0;
  std::vector<double> code;
  ad::Tensor alpha;
  ad::Tensor beta;
  /// Key into ModelParameters::decoders.
  int decoder_id = 0;
};

/// Immutable after construction.
class ProtocolCodebook {
 public:
  ProtocolCodebook(std::vector<CodebookEntry> entries, MinMaxStats stats);

  const std::vector<CodebookEntry>& entries() const { return entries_; }
  const MinMaxStats& stats() const { return stats_; }
  const CodebookEntry& entry(int client_id) const;

 private:
  std::vector<CodebookEntry> entries_;
  MinMaxStats stats_;
};

/// Evaluates the final H_s on each known protocol. `known` is ordered like
/// trained.client_ids; stats are recomputed from it.
ProtocolCodebook build_codebook(const TrainedState& trained, std::span<const Protocol> known);

struct QuantizeResult {
  int client_id = 0;
  double distance = 0.0;  // 1 - cos, in [0, 2]
};

/// argmin over entries of 1 - cos(c_un, c_i); ties go to the lowest client id.
QuantizeResult quantize(const ProtocolCodebook& book, std::span<const double> c_un);

struct UnseenInference {
  ImageGrid prediction;
  QuantizeResult match;
};

/// Normalizes g_un with the codebook stats, evaluates only the code head of
/// H_s, quantizes, then runs the network with the matched client's stored
/// alpha/beta and decoder. The anatomy path is unchanged.
UnseenInference infer_unseen(const TrainedState& trained, const ProtocolCodebook& book, const ImageGrid& x_norm,
                             const Protocol& g_un, const std::vector<double>& f_t);

/// Match only, without running the image network.
QuantizeResult route_protocol(const TrainedState& trained, const ProtocolCodebook& book, const Protocol& g_un);

/// One line per entry: client id then the code at 17 significant digits,
/// followed by the pairwise cosine matrix as '#' comment lines.
void write_codebook(std::ostream& out, const ProtocolCodebook& book);
void save_codebook(const std::filesystem::path& path, const ProtocolCodebook& book);

/// Reads the code lines of a dump (comment lines are ignored).
std::vector<std::pair<int, std::vector<double>>> read_codebook_codes(std::istream& in);

}  // namespace physfed
