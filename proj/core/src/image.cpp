#include "physfed/image.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "physfed/error.hpp"

namespace physfed {

namespace {

constexpr char kMagic[4] = {'P', 'F', 'S', '1'};
constexpr std::size_t kHeaderBytes = 16;

void put_u32(std::vector<std::uint8_t>& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace

std::vector<std::uint8_t> encode_raw(std::uint32_t rows, std::uint32_t cols, std::span<const double> data) {
  if (static_cast<std::size_t>(rows) * cols != data.size()) {
    throw Error(ErrorCode::ShapeMismatch, "raw array data length does not match rows*cols");
  }
  std::vector<std::uint8_t> buf;
  buf.reserve(kHeaderBytes + data.size() * 4);
  buf.insert(buf.end(), std::begin(kMagic), std::end(kMagic));
  put_u32(buf, rows);
  put_u32(buf, cols);
  put_u32(buf, 0);
  for (double v : data) put_u32(buf, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  return buf;
}

RawArray decode_raw(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kHeaderBytes || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw Error(ErrorCode::Io, "not a PFS1 raw array");
  }
  RawArray out;
  out.rows = get_u32(bytes.data() + 4);
  out.cols = get_u32(bytes.data() + 8);
  const std::size_t n = static_cast<std::size_t>(out.rows) * out.cols;
  if (bytes.size() != kHeaderBytes + n * 4) {
    throw Error(ErrorCode::Io, "PFS1 payload length does not match header");
  }
  out.data.resize(n);
  const std::uint8_t* p = bytes.data() + kHeaderBytes;
  for (std::size_t i = 0; i < n; ++i) out.data[i] = std::bit_cast<float>(get_u32(p + 4 * i));
  return out;
}

void write_raw(std::ostream& out, std::uint32_t rows, std::uint32_t cols, std::span<const double> data) {
  const auto buf = encode_raw(rows, cols, data);
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw Error(ErrorCode::Io, "failed writing raw array");
}

RawArray read_raw(std::istream& in) {
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_raw(bytes);
}

void save_image_raw(const std::filesystem::path& path, const ImageGrid& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  write_raw(out, static_cast<std::uint32_t>(img.size), static_cast<std::uint32_t>(img.size), img.data);
}

ImageGrid load_image_raw(const std::filesystem::path& path, double pixel_len) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  auto raw = read_raw(in);
  if (raw.rows != raw.cols) throw Error(ErrorCode::ShapeMismatch, path.string() + " is not square");
  ImageGrid img;
  img.size = static_cast<int>(raw.rows);
  img.pixel_len = pixel_len;
  img.data = std::move(raw.data);
  return img;
}

void save_sinogram_raw(const std::filesystem::path& path, const Sinogram& sino) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  write_raw(out, static_cast<std::uint32_t>(sino.views), static_cast<std::uint32_t>(sino.bins), sino.data);
}

Sinogram load_sinogram_raw(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  auto raw = read_raw(in);
  Sinogram s;
  s.views = static_cast<int>(raw.rows);
  s.bins = static_cast<int>(raw.cols);
  s.data = std::move(raw.data);
  return s;
}

void save_pgm(const std::filesystem::path& path, const ImageGrid& img, double level, double width) {
  if (!(width > 0)) throw Error(ErrorCode::InvalidArgument, "PGM window width must be positive");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << "P5\n" << img.size << ' ' << img.size << "\n255\n";
  const double lo = level - width / 2;
  std::vector<char> row(static_cast<std::size_t>(img.size));
  for (int r = 0; r < img.size; ++r) {
    for (int c = 0; c < img.size; ++c) {
      const double t = std::clamp((img.at(r, c) - lo) / width, 0.0, 1.0);
      row[static_cast<std::size_t>(c)] = static_cast<char>(static_cast<std::uint8_t>(std::lround(t * 255.0)));
    }
    out.write(row.data(), static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw Error(ErrorCode::Io, "failed writing " + path.string());
}

}  // namespace physfed
