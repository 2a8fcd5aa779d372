#include "physfed/ctphys.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <string>

#include "physfed/error.hpp"
#include "physfed/parallel.hpp"
#include "physfed/random.hpp"

namespace physfed {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void check_geometry(const FanBeamGeometry& geo, int views, int bins) {
  if (geo.views() != views || geo.bins() != bins) {
    throw Error(ErrorCode::GeometryMismatch,
                "sinogram is " + std::to_string(views) + "x" + std::to_string(bins) + " but geometry is " +
                    std::to_string(geo.views()) + "x" + std::to_string(geo.bins()));
  }
}

// Line integral through the image along source -> detector point.
double trace_ray(const ImageGrid& img, double sx, double sy, double px, double py) {
  const int n = img.size;
  const double pl = img.pixel_len;
  const double lo = -0.5 * n * pl;
  const double hi = 0.5 * n * pl;
  const double dx = px - sx;
  const double dy = py - sy;

  double a_min = 0.0;
  double a_max = 1.0;
  auto clip = [&](double s, double d) {
    if (d == 0.0) return s > lo && s < hi;
    double a0 = (lo - s) / d;
    double a1 = (hi - s) / d;
    if (a0 > a1) std::swap(a0, a1);
    a_min = std::max(a_min, a0);
    a_max = std::min(a_max, a1);
    return true;
  };
  if (!clip(sx, dx) || !clip(sy, dy) || a_max <= a_min) return 0.0;

  auto first_crossing = [&](double s, double d, double& step) {
    if (d == 0.0) {
      step = kInf;
      return kInf;
    }
    step = pl / std::abs(d);
    const double pos = (s + a_min * d - lo) / pl;
    const double k = d > 0 ? std::floor(pos) + 1.0 : std::ceil(pos) - 1.0;
    double a = (lo + k * pl - s) / d;
    if (a <= a_min) a += step;
    return a;
  };
  double step_x = 0.0;
  double step_y = 0.0;
  double next_x = first_crossing(sx, dx, step_x);
  double next_y = first_crossing(sy, dy, step_y);

  double sum = 0.0;
  double a_cur = a_min;
  while (a_cur < a_max) {
    const double a_next = std::min({next_x, next_y, a_max});
    if (a_next > a_cur) {
      const double mid = 0.5 * (a_cur + a_next);
      const int col = static_cast<int>(std::floor((sx + mid * dx - lo) / pl));
      const int yi = static_cast<int>(std::floor((sy + mid * dy - lo) / pl));
      const int row = n - 1 - yi;
      if (col >= 0 && col < n && row >= 0 && row < n) sum += (a_next - a_cur) * img.at(row, col);
    }
    if (a_next == next_x) next_x += step_x;
    if (a_next == next_y) next_y += step_y;
    a_cur = a_next;
  }
  return sum * std::hypot(dx, dy);
}

}  // namespace

void NoiseConfig::validate() const {
  if (!(photon_count > 0) || !(electronic_variance >= 0) || !(count_floor > 0)) {
    throw Error(ErrorCode::InvalidArgument, "noise config requires I0 > 0, sigma_e^2 >= 0, floor > 0");
  }
}

FanBeamGeometry derive_geometry(const Protocol& p, int image_size) {
  p.validate();
  if (image_size < 8) throw Error(ErrorCode::InvalidArgument, "image_size must be >= 8");
  FanBeamGeometry geo;
  geo.dsr = p.dsr;
  geo.ddr = p.ddr;
  geo.bin_len = p.dbl;
  geo.image_size = image_size;
  geo.pixel_len = p.pl;
  geo.view_angles.resize(static_cast<std::size_t>(p.nv));
  const double dtheta = 2.0 * std::numbers::pi / p.nv;
  for (int v = 0; v < p.nv; ++v) geo.view_angles[static_cast<std::size_t>(v)] = v * dtheta;
  geo.detector_offsets.resize(static_cast<std::size_t>(p.ndb));
  const double center = 0.5 * (p.ndb - 1);
  for (int b = 0; b < p.ndb; ++b) geo.detector_offsets[static_cast<std::size_t>(b)] = (b - center) * p.dbl;

  const double radius = image_size * p.pl / std::numbers::sqrt2;
  if (radius >= p.dsr) {
    throw Error(ErrorCode::InsufficientCoverage, "source lies inside the reconstruction circle");
  }
  const double fan_half_angle = std::asin(radius / p.dsr);
  const double half_span = 0.5 * p.ndb * p.dbl;
  if (std::atan(half_span / (p.dsr + p.ddr)) < fan_half_angle) {
    throw Error(ErrorCode::InsufficientCoverage,
                "detector half-span " + std::to_string(half_span) + " mm does not cover the image circle");
  }
  return geo;
}

Sinogram forward_project(const ImageGrid& img, const FanBeamGeometry& geo) {
  if (img.size != geo.image_size || img.pixel_len != geo.pixel_len) {
    throw Error(ErrorCode::GeometryMismatch, "image grid does not match geometry");
  }
  Sinogram sino(geo.views(), geo.bins());
  parallel_for(static_cast<std::size_t>(geo.views()), [&](std::size_t v) {
    const double c = std::cos(geo.view_angles[v]);
    const double s = std::sin(geo.view_angles[v]);
    const double sx = geo.dsr * c;
    const double sy = geo.dsr * s;
    for (int b = 0; b < geo.bins(); ++b) {
      const double off = geo.detector_offsets[static_cast<std::size_t>(b)];
      const double px = -geo.ddr * c - off * s;
      const double py = -geo.ddr * s + off * c;
      sino.at(static_cast<int>(v), b) = trace_ray(img, sx, sy, px, py);
    }
  });
  return sino;
}

Sinogram simulate_low_dose(const Sinogram& clean, const NoiseConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Sinogram out(clean.views, clean.bins);
  const double sigma = std::sqrt(cfg.electronic_variance);
  parallel_for(static_cast<std::size_t>(clean.views), [&](std::size_t v) {
    for (int b = 0; b < clean.bins; ++b) {
      SplitMixEngine eng(derive_seed(seed, {v, static_cast<std::uint64_t>(b)}));
      const double expected = cfg.photon_count * std::exp(-clean.at(static_cast<int>(v), b));
      std::poisson_distribution<long long> poisson(expected);
      double counts = static_cast<double>(poisson(eng));
      if (sigma > 0) counts += std::normal_distribution<double>(0.0, sigma)(eng);
      out.at(static_cast<int>(v), b) = std::log(cfg.photon_count / std::max(counts, cfg.count_floor));
    }
  });
  return out;
}

ImageGrid fbp_reconstruct(const Sinogram& sino, const FanBeamGeometry& geo) {
  check_geometry(geo, sino.views, sino.bins);
  const int nb = geo.bins();
  const int n = geo.image_size;
  const double mag = geo.magnification();
  // Work on a virtual detector through the rotation center.
  const double a = geo.bin_len / mag;
  const double center = 0.5 * (nb - 1);
  const double dsr = geo.dsr;

  std::vector<double> cos_weight(static_cast<std::size_t>(nb));
  for (int b = 0; b < nb; ++b) {
    const double s = geo.detector_offsets[static_cast<std::size_t>(b)] / mag;
    cos_weight[static_cast<std::size_t>(b)] = dsr / std::sqrt(dsr * dsr + s * s);
  }

  // Ram-Lak kernel (halved for the doubly sampled full scan), scaled by the
  // convolution step a.
  std::vector<double> kernel(static_cast<std::size_t>(nb));
  kernel[0] = a * 0.5 / (4.0 * a * a);
  for (int k = 1; k < nb; ++k) {
    kernel[static_cast<std::size_t>(k)] =
        (k % 2 == 1) ? -a * 0.5 / std::pow(std::numbers::pi * k * a, 2) : 0.0;
  }

  // Only the bins that pixel centers project onto need filtered values.
  const double radius = n * geo.pixel_len / std::numbers::sqrt2;
  const double s_max = dsr * radius / std::sqrt(dsr * dsr - radius * radius);
  const int b_lo = std::max(0, static_cast<int>(std::floor(center - s_max / a)) - 1);
  const int b_hi = std::min(nb - 1, static_cast<int>(std::ceil(center + s_max / a)) + 1);

  std::vector<double> px(static_cast<std::size_t>(n));
  for (int j = 0; j < n; ++j) px[static_cast<std::size_t>(j)] = (j + 0.5 - 0.5 * n) * geo.pixel_len;

  const double dtheta = 2.0 * std::numbers::pi / geo.views();
  // Per-view partial images are reduced in view order for schedule-independent
  // rounding.
  const int nv = geo.views();
  const int chunk = 16;
  const int n_chunks = (nv + chunk - 1) / chunk;
  std::vector<std::vector<double>> partial(static_cast<std::size_t>(n_chunks));
  parallel_for(static_cast<std::size_t>(n_chunks), [&](std::size_t ci) {
    std::vector<double> acc(static_cast<std::size_t>(n) * n, 0.0);
    std::vector<double> weighted(static_cast<std::size_t>(nb));
    std::vector<double> filtered(static_cast<std::size_t>(nb), 0.0);
    const int v_end = std::min(nv, static_cast<int>(ci + 1) * chunk);
    for (int v = static_cast<int>(ci) * chunk; v < v_end; ++v) {
      for (int b = 0; b < nb; ++b) weighted[static_cast<std::size_t>(b)] = sino.at(v, b) * cos_weight[static_cast<std::size_t>(b)];
      for (int b = b_lo; b <= b_hi; ++b) {
        double q = kernel[0] * weighted[static_cast<std::size_t>(b)];
        for (int k = 1; k < nb; k += 2) {
          double side = 0.0;
          if (b - k >= 0) side += weighted[static_cast<std::size_t>(b - k)];
          if (b + k < nb) side += weighted[static_cast<std::size_t>(b + k)];
          if (b - k < 0 && b + k >= nb) break;
          q += kernel[static_cast<std::size_t>(k)] * side;
        }
        filtered[static_cast<std::size_t>(b)] = q;
      }
      const double c = std::cos(geo.view_angles[static_cast<std::size_t>(v)]);
      const double s = std::sin(geo.view_angles[static_cast<std::size_t>(v)]);
      for (int i = 0; i < n; ++i) {
        const double y = px[static_cast<std::size_t>(n - 1 - i)];
        for (int j = 0; j < n; ++j) {
          const double x = px[static_cast<std::size_t>(j)];
          const double along = x * c + y * s;     // toward the source
          const double across = -x * s + y * c;   // along the detector
          const double w = dsr - along;
          const double u = w / dsr;
          const double fb = dsr * across / w / a + center;
          const int b0 = static_cast<int>(std::floor(fb));
          const double t = fb - b0;
          double val = 0.0;
          if (b0 >= 0 && b0 < nb) val += (1.0 - t) * filtered[static_cast<std::size_t>(b0)];
          if (b0 + 1 >= 0 && b0 + 1 < nb) val += t * filtered[static_cast<std::size_t>(b0 + 1)];
          acc[static_cast<std::size_t>(i) * n + j] += val / (u * u);
        }
      }
    }
    partial[ci] = std::move(acc);
  });

  ImageGrid img(n, geo.pixel_len);
  for (const auto& acc : partial) {
    for (std::size_t p = 0; p < acc.size(); ++p) img.data[p] += acc[p];
  }
  for (auto& v : img.data) v = std::max(0.0, v * dtheta);
  return img;
}

}  // namespace physfed
