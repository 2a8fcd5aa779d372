#pragma once

#include <array>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <vector>

namespace physfed {

inline constexpr std::size_t kProtocolDims = 7;

/// Scanner configuration for one client: geometry plus dose.
/// Lengths are in mm; pn is the incident photon count per ray.
struct Protocol {
  int nv = 0;         // projection views
  int ndb = 0;        // detector bins
  double pl = 0.0;    // pixel side length
  double dbl = 0.0;   // detector bin length
  double dsr = 0.0;   // source to rotation center
  double ddr = 0.0;   // detector to rotation center
  double pn = 0.0;    // photons per ray

  /// Throws Error(InvalidArgument) when any field is out of its domain.
  void validate() const;

  std::array<double, kProtocolDims> as_vector() const;

  bool operator==(const Protocol&) const = default;
};

struct NormalizedProtocol {
  std::array<double, kProtocolDims> values{};
};

class MinMaxStats {
 public:
  /// Rejects any column with maxs[j] <= mins[j].
  MinMaxStats(const std::array<double, kProtocolDims>& mins,
              const std::array<double, kProtocolDims>& maxs);

  const std::array<double, kProtocolDims>& mins() const { return mins_; }
  const std::array<double, kProtocolDims>& maxs() const { return maxs_; }

  /// Inverse of normalize_protocol, returned as the raw 7-vector.
  std::array<double, kProtocolDims> denormalize(const NormalizedProtocol& g) const;

 private:
  std::array<double, kProtocolDims> mins_;
  std::array<double, kProtocolDims> maxs_;
};

MinMaxStats protocol_stats(std::span<const Protocol> protocols);

/// Min-max normalization per column. No clipping: protocols outside the
/// reference set map outside [0, 1].
NormalizedProtocol normalize_protocol(const Protocol& g, const MinMaxStats& stats);

/// Known-client protocols #1..#8.
std::vector<Protocol> builtin_known_protocols();

/// Unseen-client protocols #1..#4.
std::vector<Protocol> builtin_unseen_protocols();

// CSV with header nv,ndb,pl,dbl,dsr,ddr,pn.
std::vector<Protocol> read_protocols_csv(std::istream& in);
void write_protocols_csv(std::ostream& out, std::span<const Protocol> protocols);
std::vector<Protocol> load_protocols_csv(const std::filesystem::path& path);
void save_protocols_csv(const std::filesystem::path& path, std::span<const Protocol> protocols);

}  // namespace physfed
