#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "physfed/ctphys.hpp"
#include "physfed/image.hpp"
#include "physfed/protocol.hpp"

namespace physfed {

enum class TissueClass { Air = 0, Fat, Soft, Blood, Bone };
inline constexpr std::size_t kTissueClasses = 5;

enum class BodyPart { Chest = 0, Abdomen, Pelvis };
inline constexpr std::size_t kBodyParts = 3;

/// Linear attenuation per mm.
double attenuation(TissueClass t);
std::string_view to_string(TissueClass t);
std::string_view to_string(BodyPart b);
BodyPart parse_body_part(std::string_view s);

/// Normalization ceiling (per mm) used to bring images into [0, 1].
inline constexpr double kAttenuationCeiling = 0.06;

struct Ellipse {
  double cx = 0.0;  // mm
  double cy = 0.0;
  double ax = 1.0;  // semi-axes, mm
  double ay = 1.0;
  double angle = 0.0;  // radians
  TissueClass tissue = TissueClass::Soft;
  bool lesion = false;

  bool contains(double x, double y) const;
};

struct Phantom {
  std::vector<Ellipse> ellipses;
  std::uint64_t patient_seed = 0;
  BodyPart body_part = BodyPart::Chest;
};

struct AnatomyMetadata {
  BodyPart body_part = BodyPart::Chest;
  /// Area fraction per non-air class; air_fraction holds the remainder.
  std::map<TissueClass, double> tissue_fractions;
  double air_fraction = 1.0;
  int lesion_count = 0;

  double fraction(TissueClass t) const;
};

/// Deterministic family of slices for one patient inside a field-of-view
/// circle of the given radius (mm). Parameters drift smoothly with slice
/// index. Pelvis slices always carry at least one bone.
std::vector<Phantom> generate_patient(std::uint64_t patient_seed, BodyPart body_part, int n_slices,
                                      double fov_radius_mm);

struct RasterizedSlice {
  ImageGrid image;
  AnatomyMetadata metadata;
};

/// Later ellipses overwrite earlier ones at each pixel center.
RasterizedSlice rasterize(const Phantom& ph, int size, double pixel_len);

enum class Split { Train, Test };
std::string_view to_string(Split s);
Split parse_split(std::string_view s);

struct Sample {
  std::uint64_t patient_seed = 0;
  int slice_index = 0;
  Split split = Split::Train;
  ImageGrid low_dose;        // per mm
  ImageGrid reference;       // per mm
  ImageGrid low_dose_norm;   // low_dose / kAttenuationCeiling
  ImageGrid reference_norm;  // reference / kAttenuationCeiling
  AnatomyMetadata metadata;
};

struct ClientDataset {
  int client_id = 0;
  Protocol protocol;
  std::vector<Sample> samples;

  std::vector<const Sample*> split(Split s) const;
  std::size_t count(Split s) const;
};

struct ClientSpec {
  int client_id = 0;
  Protocol protocol;
  std::vector<std::uint64_t> train_seeds;
  std::vector<std::uint64_t> test_seeds;
  int train_slices = 8;
  int test_slices = 4;
  int image_size = 64;
  std::uint64_t noise_seed = 0;
  double electronic_variance = 10.0;
};

/// Tracks which patient seeds belong to which client so that no patient is
/// shared between clients.
class SeedRegistry {
 public:
  /// Throws SeedCollision if any seed is already owned by another client or
  /// repeats within the request.
  void claim(int client_id, std::span<const std::uint64_t> seeds);
  std::size_t size() const { return owner_.size(); }

 private:
  std::map<std::uint64_t, int> owner_;
};

/// Simulates one client: rasterize each slice, project, add dose-dependent
/// noise, reconstruct with FBP. The registry, when given, is checked first.
ClientDataset build_client_dataset(const ClientSpec& spec, SeedRegistry* registry = nullptr);

ImageGrid normalize_image(const ImageGrid& img);

// Directory layout: manifest.csv, anatomy.csv, protocol.csv and paired
// sample_NNNN_low.raw / sample_NNNN_ref.raw files.
void save_dataset(const std::filesystem::path& dir, const ClientDataset& ds);
ClientDataset load_dataset(const std::filesystem::path& dir, int client_id);

}  // namespace physfed
