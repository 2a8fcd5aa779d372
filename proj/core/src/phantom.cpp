#include "physfed/phantom.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <random>
#include <sstream>

#include <fmt/format.h>

#include "physfed/error.hpp"
#include "physfed/random.hpp"

namespace physfed {

namespace {

constexpr std::array<double, kTissueClasses> kAttenuation = {0.000, 0.017, 0.019, 0.021, 0.048};

// Organ tissues by body part; the first n of these are used.
constexpr std::array<std::array<TissueClass, 4>, kBodyParts> kOrganTissues = {{
    {TissueClass::Air, TissueClass::Air, TissueClass::Blood, TissueClass::Fat},
    {TissueClass::Blood, TissueClass::Fat, TissueClass::Blood, TissueClass::Fat},
    {TissueClass::Fat, TissueClass::Blood, TissueClass::Fat, TissueClass::Blood},
}};

// Slowly varying parameter: base + amplitude * sin(2 pi z / period + phase).
struct Drift {
  double base = 0.0;
  double amplitude = 0.0;
  double phase = 0.0;
  double at(int z, double period) const {
    return base + amplitude * std::sin(2.0 * std::numbers::pi * z / period + phase);
  }
};

struct EllipseTrack {
  Drift cx, cy, ax, ay, angle;
  TissueClass tissue = TissueClass::Soft;
  bool lesion = false;
};

class Sampler {
 public:
  explicit Sampler(std::uint64_t seed) : eng_(seed) {}
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(eng_); }
  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(eng_); }
  Drift drift(double base, double amplitude) { return {base, amplitude, uniform(0.0, 2.0 * std::numbers::pi)}; }

 private:
  std::mt19937_64 eng_;
};

std::string csv_field(const std::string& line, std::size_t index) {
  std::istringstream is(line);
  std::string cell;
  for (std::size_t i = 0; i <= index; ++i) {
    if (!std::getline(is, cell, ',')) throw Error(ErrorCode::Io, "short CSV row: " + line);
  }
  return cell;
}

}  // namespace

double attenuation(TissueClass t) { return kAttenuation[static_cast<std::size_t>(t)]; }

std::string_view to_string(TissueClass t) {
  switch (t) {
    case TissueClass::Air: return "air";
    case TissueClass::Fat: return "fat";
    case TissueClass::Soft: return "soft";
    case TissueClass::Blood: return "blood";
    case TissueClass::Bone: return "bone";
  }
  return "?";
}

std::string_view to_string(BodyPart b) {
  switch (b) {
    case BodyPart::Chest: return "chest";
    case BodyPart::Abdomen: return "abdomen";
    case BodyPart::Pelvis: return "pelvis";
  }
  return "?";
}

BodyPart parse_body_part(std::string_view s) {
  if (s == "chest") return BodyPart::Chest;
  if (s == "abdomen") return BodyPart::Abdomen;
  if (s == "pelvis") return BodyPart::Pelvis;
  throw Error(ErrorCode::InvalidArgument, "unknown body part '" + std::string(s) + "'");
}

std::string_view to_string(Split s) { return s == Split::Train ? "train" : "test"; }

Split parse_split(std::string_view s) {
  if (s == "train") return Split::Train;
  if (s == "test") return Split::Test;
  throw Error(ErrorCode::InvalidArgument, "unknown split '" + std::string(s) + "'");
}

bool Ellipse::contains(double x, double y) const {
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  const double u = (x - cx) * c + (y - cy) * s;
  const double v = -(x - cx) * s + (y - cy) * c;
  return (u * u) / (ax * ax) + (v * v) / (ay * ay) <= 1.0;
}

double AnatomyMetadata::fraction(TissueClass t) const {
  if (t == TissueClass::Air) return air_fraction;
  const auto it = tissue_fractions.find(t);
  return it == tissue_fractions.end() ? 0.0 : it->second;
}

std::vector<Phantom> generate_patient(std::uint64_t patient_seed, BodyPart body_part, int n_slices,
                                      double fov_radius_mm) {
  if (n_slices < 1) throw Error(ErrorCode::InvalidArgument, "n_slices must be >= 1");
  if (!(fov_radius_mm > 0)) throw Error(ErrorCode::InvalidArgument, "fov radius must be positive");
  const double r = fov_radius_mm;
  Sampler rng(derive_seed(patient_seed, {static_cast<std::uint64_t>(body_part)}));
  const auto part = static_cast<std::size_t>(body_part);

  std::vector<EllipseTrack> tracks;
  EllipseTrack body;
  const double body_ax = rng.uniform(0.78, 0.88) * r;
  const double body_ay = rng.uniform(0.60, 0.74) * r;
  body.cx = rng.drift(rng.uniform(-0.03, 0.03) * r, 0.01 * r);
  body.cy = rng.drift(rng.uniform(-0.03, 0.03) * r, 0.01 * r);
  body.ax = rng.drift(body_ax, 0.03 * r);
  body.ay = rng.drift(body_ay, 0.03 * r);
  body.angle = rng.drift(rng.uniform(-0.1, 0.1), 0.02);
  body.tissue = TissueClass::Soft;
  tracks.push_back(body);

  const int n_organs = rng.integer(2, 4);
  for (int k = 0; k < n_organs; ++k) {
    EllipseTrack organ;
    const double side = (k % 2 == 0) ? -1.0 : 1.0;
    organ.cx = rng.drift(side * rng.uniform(0.1, 0.4) * body_ax, 0.03 * r);
    organ.cy = rng.drift(rng.uniform(-0.3, 0.3) * body_ay, 0.03 * r);
    organ.ax = rng.drift(rng.uniform(0.12, 0.26) * r, 0.02 * r);
    organ.ay = rng.drift(rng.uniform(0.12, 0.26) * r, 0.02 * r);
    organ.angle = rng.drift(rng.uniform(0.0, std::numbers::pi), 0.1);
    organ.tissue = kOrganTissues[part][static_cast<std::size_t>(k)];
    tracks.push_back(organ);
  }

  const int n_bones = body_part == BodyPart::Pelvis ? rng.integer(1, 3)
                      : body_part == BodyPart::Chest ? rng.integer(0, 3)
                                                     : rng.integer(0, 2);
  for (int k = 0; k < n_bones; ++k) {
    EllipseTrack bone;
    if (k == 0) {
      // spine, posterior midline
      bone.cx = rng.drift(rng.uniform(-0.03, 0.03) * r, 0.005 * r);
      bone.cy = rng.drift(-0.6 * body_ay, 0.01 * r);
    } else {
      const double side = (k % 2 == 0) ? -1.0 : 1.0;
      bone.cx = rng.drift(side * rng.uniform(0.45, 0.65) * body_ax, 0.02 * r);
      bone.cy = rng.drift(rng.uniform(-0.3, 0.2) * body_ay, 0.02 * r);
    }
    bone.ax = rng.drift(rng.uniform(0.06, 0.11) * r, 0.01 * r);
    bone.ay = rng.drift(rng.uniform(0.06, 0.11) * r, 0.01 * r);
    bone.angle = rng.drift(rng.uniform(0.0, std::numbers::pi), 0.1);
    bone.tissue = TissueClass::Bone;
    tracks.push_back(bone);
  }

  const int n_lesions = rng.integer(0, 2);
  for (int k = 0; k < n_lesions; ++k) {
    EllipseTrack lesion;
    lesion.cx = rng.drift(rng.uniform(-0.4, 0.4) * body_ax, 0.01 * r);
    lesion.cy = rng.drift(rng.uniform(-0.35, 0.35) * body_ay, 0.01 * r);
    lesion.ax = rng.drift(rng.uniform(0.04, 0.08) * r, 0.005 * r);
    lesion.ay = rng.drift(rng.uniform(0.04, 0.08) * r, 0.005 * r);
    lesion.angle = rng.drift(0.0, 0.0);
    lesion.tissue = rng.integer(0, 1) == 0 ? TissueClass::Blood : TissueClass::Fat;
    lesion.lesion = true;
    tracks.push_back(lesion);
  }

  const double period = 24.0;
  std::vector<Phantom> slices;
  slices.reserve(static_cast<std::size_t>(n_slices));
  for (int z = 0; z < n_slices; ++z) {
    Phantom ph;
    ph.patient_seed = patient_seed;
    ph.body_part = body_part;
    for (const auto& t : tracks) {
      Ellipse e;
      e.cx = t.cx.at(z, period);
      e.cy = t.cy.at(z, period);
      e.ax = t.ax.at(z, period);
      e.ay = t.ay.at(z, period);
      e.angle = t.angle.at(z, period);
      e.tissue = t.tissue;
      e.lesion = t.lesion;
      ph.ellipses.push_back(e);
    }
    slices.push_back(std::move(ph));
  }
  return slices;
}

RasterizedSlice rasterize(const Phantom& ph, int size, double pixel_len) {
  if (size < 8) throw Error(ErrorCode::InvalidArgument, "raster size must be >= 8");
  if (!(pixel_len > 0)) throw Error(ErrorCode::InvalidArgument, "pixel_len must be positive");
  RasterizedSlice out{ImageGrid(size, pixel_len), {}};
  std::vector<int> owner(static_cast<std::size_t>(size) * size, -1);
  for (int i = 0; i < size; ++i) {
    const double y = (0.5 * size - i - 0.5) * pixel_len;
    for (int j = 0; j < size; ++j) {
      const double x = (j + 0.5 - 0.5 * size) * pixel_len;
      for (std::size_t e = 0; e < ph.ellipses.size(); ++e) {
        if (ph.ellipses[e].contains(x, y)) owner[static_cast<std::size_t>(i) * size + j] = static_cast<int>(e);
      }
    }
  }
  std::array<std::size_t, kTissueClasses> counts{};
  std::vector<bool> visible(ph.ellipses.size(), false);
  for (std::size_t p = 0; p < owner.size(); ++p) {
    TissueClass t = TissueClass::Air;
    if (owner[p] >= 0) {
      const auto& e = ph.ellipses[static_cast<std::size_t>(owner[p])];
      t = e.tissue;
      visible[static_cast<std::size_t>(owner[p])] = true;
    }
    out.image.data[p] = attenuation(t);
    ++counts[static_cast<std::size_t>(t)];
  }
  const double total = static_cast<double>(owner.size());
  auto& meta = out.metadata;
  meta.body_part = ph.body_part;
  meta.air_fraction = counts[0] / total;
  for (std::size_t t = 1; t < kTissueClasses; ++t) {
    meta.tissue_fractions[static_cast<TissueClass>(t)] = counts[t] / total;
  }
  meta.lesion_count = 0;
  for (std::size_t e = 0; e < ph.ellipses.size(); ++e) {
    if (ph.ellipses[e].lesion && visible[e]) ++meta.lesion_count;
  }
  return out;
}

std::vector<const Sample*> ClientDataset::split(Split s) const {
  std::vector<const Sample*> out;
  for (const auto& smp : samples) {
    if (smp.split == s) out.push_back(&smp);
  }
  return out;
}

std::size_t ClientDataset::count(Split s) const {
  std::size_t n = 0;
  for (const auto& smp : samples) n += smp.split == s ? 1 : 0;
  return n;
}

void SeedRegistry::claim(int client_id, std::span<const std::uint64_t> seeds) {
  std::set<std::uint64_t> mine;
  for (auto s : seeds) {
    if (!mine.insert(s).second) {
      throw Error(ErrorCode::SeedCollision, fmt::format("client {} lists patient seed {} twice", client_id, s));
    }
    const auto it = owner_.find(s);
    if (it != owner_.end() && it->second != client_id) {
      throw Error(ErrorCode::SeedCollision,
                  fmt::format("patient seed {} of client {} already belongs to client {}", s, client_id, it->second));
    }
  }
  for (auto s : seeds) owner_[s] = client_id;
}

ImageGrid normalize_image(const ImageGrid& img) {
  ImageGrid out = img;
  for (auto& v : out.data) v /= kAttenuationCeiling;
  return out;
}

ClientDataset build_client_dataset(const ClientSpec& spec, SeedRegistry* registry) {
  if (registry != nullptr) {
    std::vector<std::uint64_t> all(spec.train_seeds);
    all.insert(all.end(), spec.test_seeds.begin(), spec.test_seeds.end());
    registry->claim(spec.client_id, all);
  }
  const auto geo = derive_geometry(spec.protocol, spec.image_size);
  NoiseConfig noise;
  noise.photon_count = spec.protocol.pn;
  noise.electronic_variance = spec.electronic_variance;
  noise.count_floor = 1.0;
  const double fov_radius = 0.5 * spec.image_size * spec.protocol.pl;

  ClientDataset ds;
  ds.client_id = spec.client_id;
  ds.protocol = spec.protocol;
  int ordinal = 0;
  auto add_patients = [&](const std::vector<std::uint64_t>& seeds, int slices, Split split) {
    for (auto seed : seeds) {
      const auto part = static_cast<BodyPart>(ordinal++ % static_cast<int>(kBodyParts));
      const auto phantoms = generate_patient(seed, part, slices, fov_radius);
      for (int z = 0; z < slices; ++z) {
        auto slice = rasterize(phantoms[static_cast<std::size_t>(z)], spec.image_size, spec.protocol.pl);
        const auto clean = forward_project(slice.image, geo);
        const auto noisy = simulate_low_dose(clean, noise, derive_seed(spec.noise_seed, {seed, static_cast<std::uint64_t>(z)}));
        Sample smp;
        smp.patient_seed = seed;
        smp.slice_index = z;
        smp.split = split;
        smp.low_dose = fbp_reconstruct(noisy, geo);
        smp.reference = std::move(slice.image);
        smp.low_dose_norm = normalize_image(smp.low_dose);
        smp.reference_norm = normalize_image(smp.reference);
        smp.metadata = std::move(slice.metadata);
        ds.samples.push_back(std::move(smp));
      }
    }
  };
  add_patients(spec.train_seeds, spec.train_slices, Split::Train);
  add_patients(spec.test_seeds, spec.test_slices, Split::Test);
  return ds;
}

void save_dataset(const std::filesystem::path& dir, const ClientDataset& ds) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / "manifest.csv");
  std::ofstream anatomy(dir / "anatomy.csv");
  if (!manifest || !anatomy) throw Error(ErrorCode::Io, "cannot write dataset files in " + dir.string());
  manifest << "sample_id,patient_seed,slice_index,split,body_part\n";
  anatomy << "sample_id,fat,soft,blood,bone,air,lesion_count\n" << std::setprecision(17);
  for (std::size_t k = 0; k < ds.samples.size(); ++k) {
    const auto& s = ds.samples[k];
    manifest << k << ',' << s.patient_seed << ',' << s.slice_index << ',' << to_string(s.split) << ','
             << to_string(s.metadata.body_part) << '\n';
    anatomy << k << ',' << s.metadata.fraction(TissueClass::Fat) << ',' << s.metadata.fraction(TissueClass::Soft)
            << ',' << s.metadata.fraction(TissueClass::Blood) << ',' << s.metadata.fraction(TissueClass::Bone) << ','
            << s.metadata.air_fraction << ',' << s.metadata.lesion_count << '\n';
    save_image_raw(dir / fmt::format("sample_{:04d}_low.raw", k), s.low_dose);
    save_image_raw(dir / fmt::format("sample_{:04d}_ref.raw", k), s.reference);
  }
  const std::vector<Protocol> protocol{ds.protocol};
  save_protocols_csv(dir / "protocol.csv", protocol);
}

ClientDataset load_dataset(const std::filesystem::path& dir, int client_id) {
  ClientDataset ds;
  ds.client_id = client_id;
  const auto protocols = load_protocols_csv(dir / "protocol.csv");
  if (protocols.size() != 1) throw Error(ErrorCode::Io, "protocol.csv must hold one protocol");
  ds.protocol = protocols.front();

  std::ifstream manifest(dir / "manifest.csv");
  std::ifstream anatomy(dir / "anatomy.csv");
  if (!manifest || !anatomy) throw Error(ErrorCode::Io, "missing manifest or anatomy file in " + dir.string());
  std::string mline;
  std::string aline;
  std::getline(manifest, mline);
  std::getline(anatomy, aline);
  while (std::getline(manifest, mline)) {
    if (mline.empty()) continue;
    if (!std::getline(anatomy, aline)) throw Error(ErrorCode::Io, "anatomy.csv shorter than manifest");
    const auto id = std::stoul(csv_field(mline, 0));
    if (std::stoul(csv_field(aline, 0)) != id) throw Error(ErrorCode::Io, "anatomy.csv out of step with manifest");
    Sample s;
    s.patient_seed = std::stoull(csv_field(mline, 1));
    s.slice_index = std::stoi(csv_field(mline, 2));
    s.split = parse_split(csv_field(mline, 3));
    s.metadata.body_part = parse_body_part(csv_field(mline, 4));
    s.metadata.tissue_fractions[TissueClass::Fat] = std::stod(csv_field(aline, 1));
    s.metadata.tissue_fractions[TissueClass::Soft] = std::stod(csv_field(aline, 2));
    s.metadata.tissue_fractions[TissueClass::Blood] = std::stod(csv_field(aline, 3));
    s.metadata.tissue_fractions[TissueClass::Bone] = std::stod(csv_field(aline, 4));
    s.metadata.air_fraction = std::stod(csv_field(aline, 5));
    s.metadata.lesion_count = std::stoi(csv_field(aline, 6));
    s.low_dose = load_image_raw(dir / fmt::format("sample_{:04d}_low.raw", id), ds.protocol.pl);
    s.reference = load_image_raw(dir / fmt::format("sample_{:04d}_ref.raw", id), ds.protocol.pl);
    s.low_dose_norm = normalize_image(s.low_dose);
    s.reference_norm = normalize_image(s.reference);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace physfed
