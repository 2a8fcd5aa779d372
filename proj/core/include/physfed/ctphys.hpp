#pragma once

#include <cstdint>
#include <vector>

#include "physfed/image.hpp"
#include "physfed/protocol.hpp"

namespace physfed {

/// Full-scan fan-beam geometry with a flat, equidistant detector.
///
/// The source sits at dsr * (cos t, sin t) for view angle t; the detector line
/// is perpendicular to the central ray at distance ddr on the far side of the
/// rotation center. Detector offsets are physical positions along that line.
struct FanBeamGeometry {
  std::vector<double> view_angles;
  std::vector<double> detector_offsets;
  double dsr = 0.0;
  double ddr = 0.0;
  double bin_len = 0.0;
  int image_size = 0;
  double pixel_len = 0.0;

  int views() const { return static_cast<int>(view_angles.size()); }
  int bins() const { return static_cast<int>(detector_offsets.size()); }
  double magnification() const { return (dsr + ddr) / dsr; }
};

struct NoiseConfig {
  double photon_count = 1e5;         // I0
  double electronic_variance = 10.0; // sigma_e^2, in counts^2
  double count_floor = 1.0;

  void validate() const;
};

/// Materializes a protocol into a scan geometry. Throws InsufficientCoverage
/// when the detector cannot see the whole circle circumscribing the image.
FanBeamGeometry derive_geometry(const Protocol& p, int image_size);

/// Ray-driven projection with exact pixel intersection lengths.
Sinogram forward_project(const ImageGrid& img, const FanBeamGeometry& geo);

/// Poisson photon statistics plus Gaussian electronic noise, then log
/// transform. Each entry draws from its own stream derived from
/// (seed, view, bin), so the result does not depend on traversal order.
Sinogram simulate_low_dose(const Sinogram& clean, const NoiseConfig& cfg, std::uint64_t seed);

/// Equidistant fan-beam filtered backprojection over a full 2*pi scan.
/// Output is clamped to be non-negative.
ImageGrid fbp_reconstruct(const Sinogram& sino, const FanBeamGeometry& geo);

}  // namespace physfed
