#pragma once

#include <filesystem>
#include <iosfwd>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "physfed/autodiff.hpp"
#include "physfed/image.hpp"
#include "physfed/phantom.hpp"

namespace physfed {

struct LossConfig {
  double tau = 0.01;  // weight of the orthogonality term
};

ad::Var mse_loss(ad::Var pred, ad::Var ref);

/// sum over j != i of (c_i . c_j)^2, raw dot products. Zero when there is a
/// single code. `i` is a 0-based position in `codes`.
ad::Var orth_loss(std::span<const ad::Var> codes, std::size_t i);
double orth_loss_value(std::span<const std::vector<double>> codes, std::size_t i);

/// mse + tau * orth. With tau == 0 the orth term is not recorded at all.
ad::Var total_loss(ad::Var pred, ad::Var ref, std::span<const ad::Var> codes, std::size_t i, const LossConfig& cfg);

inline constexpr double kPsnrInfinity = std::numeric_limits<double>::infinity();

/// 10 log10(range^2 / mse); identical inputs give +infinity.
double psnr(std::span<const double> pred, std::span<const double> ref, double data_range = 1.0);
double psnr(const ImageGrid& pred, const ImageGrid& ref, double data_range = 1.0);

/// Mean SSIM over 11x11 Gaussian windows (sigma 1.5) placed fully inside the
/// image; K1 = 0.01, K2 = 0.03.
double ssim(const ImageGrid& pred, const ImageGrid& ref, double data_range = 1.0);

struct MetricRecord {
  int client_id = 0;
  int round = 0;
  Split split = Split::Test;
  double psnr_mean = 0.0;
  double ssim_mean = 0.0;
  std::size_t n_samples = 0;
};

inline constexpr const char* kMetricsCsvHeader = "client_id,round,split,psnr_mean,ssim_mean,n_samples";

void write_metrics_header(std::ostream& out);
void write_metric_row(std::ostream& out, const MetricRecord& rec);
/// Appends rows; writes the header first when the file is new or empty.
void append_metrics_csv(const std::filesystem::path& path, std::span<const MetricRecord> records);
std::vector<MetricRecord> read_metrics_csv(const std::filesystem::path& path);

}  // namespace physfed
