#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <vector>

namespace physfed {

/// Square image of linear attenuation coefficients (per mm), row-major,
/// row 0 at the top (+y).
struct ImageGrid {
  int size = 0;
  double pixel_len = 1.0;
  std::vector<double> data;

  ImageGrid() = default;
  ImageGrid(int size, double pixel_len) : size(size), pixel_len(pixel_len), data(static_cast<std::size_t>(size) * size, 0.0) {}

  double& at(int row, int col) { return data[static_cast<std::size_t>(row) * size + col]; }
  double at(int row, int col) const { return data[static_cast<std::size_t>(row) * size + col]; }
};

/// views x bins line integrals, row-major by view.
struct Sinogram {
  int views = 0;
  int bins = 0;
  std::vector<double> data;

  Sinogram() = default;
  Sinogram(int views, int bins) : views(views), bins(bins), data(static_cast<std::size_t>(views) * bins, 0.0) {}

  double& at(int view, int bin) { return data[static_cast<std::size_t>(view) * bins + bin]; }
  double at(int view, int bin) const { return data[static_cast<std::size_t>(view) * bins + bin]; }
};

/// Raw binary array: "PFS1", u32 rows, u32 cols, 4 reserved bytes, then
/// rows*cols little-endian float32 in row-major order.
struct RawArray {
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  std::vector<double> data;
};

void write_raw(std::ostream& out, std::uint32_t rows, std::uint32_t cols, std::span<const double> data);
RawArray read_raw(std::istream& in);

std::vector<std::uint8_t> encode_raw(std::uint32_t rows, std::uint32_t cols, std::span<const double> data);
RawArray decode_raw(std::span<const std::uint8_t> bytes);

void save_image_raw(const std::filesystem::path& path, const ImageGrid& img);
ImageGrid load_image_raw(const std::filesystem::path& path, double pixel_len);
void save_sinogram_raw(const std::filesystem::path& path, const Sinogram& sino);
Sinogram load_sinogram_raw(const std::filesystem::path& path);

/// 8-bit binary PGM. Values are mapped through the window [level - width/2,
/// level + width/2] and clamped.
void save_pgm(const std::filesystem::path& path, const ImageGrid& img, double level, double width);

}  // namespace physfed
