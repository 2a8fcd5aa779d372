#include "physfed/objective.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "physfed/error.hpp"

namespace physfed {

namespace {

constexpr int kSsimWindow = 11;
constexpr double kSsimSigma = 1.5;

std::vector<double> gaussian_window() {
  std::vector<double> w(kSsimWindow);
  double s = 0.0;
  for (int k = 0; k < kSsimWindow; ++k) {
    const double d = k - kSsimWindow / 2;
    w[static_cast<std::size_t>(k)] = std::exp(-d * d / (2.0 * kSsimSigma * kSsimSigma));
    s += w[static_cast<std::size_t>(k)];
  }
  for (auto& v : w) v /= s;
  return w;
}

// Separable valid-mode filtering of an n x n image.
std::vector<double> filter_valid(const std::vector<double>& img, int n, const std::vector<double>& w) {
  const int m = n - kSsimWindow + 1;
  std::vector<double> rows(static_cast<std::size_t>(n) * m, 0.0);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < m; ++c) {
      double s = 0.0;
      for (int k = 0; k < kSsimWindow; ++k) s += w[static_cast<std::size_t>(k)] * img[static_cast<std::size_t>(r) * n + c + k];
      rows[static_cast<std::size_t>(r) * m + c] = s;
    }
  std::vector<double> out(static_cast<std::size_t>(m) * m, 0.0);
  for (int r = 0; r < m; ++r)
    for (int c = 0; c < m; ++c) {
      double s = 0.0;
      for (int k = 0; k < kSsimWindow; ++k) s += w[static_cast<std::size_t>(k)] * rows[static_cast<std::size_t>(r + k) * m + c];
      out[static_cast<std::size_t>(r) * m + c] = s;
    }
  return out;
}

}  // namespace

ad::Var mse_loss(ad::Var pred, ad::Var ref) {
  if (pred.shape() != ref.shape()) {
    throw Error(ErrorCode::ShapeMismatch,
                "mse_loss: " + ad::shape_string(pred.shape()) + " vs " + ad::shape_string(ref.shape()));
  }
  const ad::Var d = ad::sub(pred, ref);
  return ad::mean(ad::mul(d, d));
}

ad::Var orth_loss(std::span<const ad::Var> codes, std::size_t i) {
  if (i >= codes.size()) throw Error(ErrorCode::IndexOutOfRange, "orth_loss: client index out of range");
  ad::Var total;
  for (std::size_t j = 0; j < codes.size(); ++j) {
    if (j == i) continue;
    const ad::Var d = ad::dot(codes[i], codes[j]);
    const ad::Var sq = ad::mul(d, d);
    total = total.tape == nullptr ? sq : ad::add(total, sq);
  }
  if (total.tape == nullptr) total = codes[i].tape->leaf(ad::Tensor::scalar(0.0));
  return total;
}

double orth_loss_value(std::span<const std::vector<double>> codes, std::size_t i) {
  if (i >= codes.size()) throw Error(ErrorCode::IndexOutOfRange, "orth_loss: client index out of range");
  double total = 0.0;
  for (std::size_t j = 0; j < codes.size(); ++j) {
    if (j == i) continue;
    if (codes[j].size() != codes[i].size()) throw Error(ErrorCode::ShapeMismatch, "orth_loss: code lengths differ");
    double d = 0.0;
    for (std::size_t k = 0; k < codes[i].size(); ++k) d += codes[i][k] * codes[j][k];
    total += d * d;
  }
  return total;
}

ad::Var total_loss(ad::Var pred, ad::Var ref, std::span<const ad::Var> codes, std::size_t i, const LossConfig& cfg) {
  if (cfg.tau < 0) throw Error(ErrorCode::InvalidArgument, "tau must be >= 0");
  const ad::Var mse = mse_loss(pred, ref);
  if (cfg.tau == 0.0 || codes.empty()) return mse;
  return ad::add(mse, ad::scale(orth_loss(codes, i), cfg.tau));
}

double psnr(std::span<const double> pred, std::span<const double> ref, double data_range) {
  if (pred.size() != ref.size()) throw Error(ErrorCode::ShapeMismatch, "psnr: size mismatch");
  if (!(data_range > 0)) throw Error(ErrorCode::InvalidArgument, "psnr: data_range must be positive");
  double s = 0.0;
  for (std::size_t k = 0; k < pred.size(); ++k) {
    const double d = pred[k] - ref[k];
    s += d * d;
  }
  const double mse = s / static_cast<double>(pred.size());
  if (mse == 0.0) return kPsnrInfinity;
  return 10.0 * std::log10(data_range * data_range / mse);
}

double psnr(const ImageGrid& pred, const ImageGrid& ref, double data_range) {
  if (pred.size != ref.size) throw Error(ErrorCode::ShapeMismatch, "psnr: image sizes differ");
  return psnr(pred.data, ref.data, data_range);
}

double ssim(const ImageGrid& pred, const ImageGrid& ref, double data_range) {
  if (pred.size != ref.size) throw Error(ErrorCode::ShapeMismatch, "ssim: image sizes differ");
  if (pred.size < kSsimWindow) throw Error(ErrorCode::ImageTooSmall, "ssim needs images of at least 11x11");
  const int n = pred.size;
  const auto w = gaussian_window();
  std::vector<double> xx(pred.data.size());
  std::vector<double> yy(pred.data.size());
  std::vector<double> xy(pred.data.size());
  for (std::size_t k = 0; k < pred.data.size(); ++k) {
    xx[k] = pred.data[k] * pred.data[k];
    yy[k] = ref.data[k] * ref.data[k];
    xy[k] = pred.data[k] * ref.data[k];
  }
  const auto mx = filter_valid(pred.data, n, w);
  const auto my = filter_valid(ref.data, n, w);
  const auto mxx = filter_valid(xx, n, w);
  const auto myy = filter_valid(yy, n, w);
  const auto mxy = filter_valid(xy, n, w);
  const double c1 = std::pow(0.01 * data_range, 2);
  const double c2 = std::pow(0.03 * data_range, 2);
  double total = 0.0;
  for (std::size_t k = 0; k < mx.size(); ++k) {
    const double vx = mxx[k] - mx[k] * mx[k];
    const double vy = myy[k] - my[k] * my[k];
    const double cxy = mxy[k] - mx[k] * my[k];
    total += ((2 * mx[k] * my[k] + c1) * (2 * cxy + c2)) / ((mx[k] * mx[k] + my[k] * my[k] + c1) * (vx + vy + c2));
  }
  return total / static_cast<double>(mx.size());
}

void write_metrics_header(std::ostream& out) { out << kMetricsCsvHeader << '\n'; }

void write_metric_row(std::ostream& out, const MetricRecord& rec) {
  std::ostringstream os;
  os << std::setprecision(17) << rec.client_id << ',' << rec.round << ',' << to_string(rec.split) << ',';
  if (std::isinf(rec.psnr_mean)) {
    os << "inf";
  } else {
    os << rec.psnr_mean;
  }
  os << ',' << rec.ssim_mean << ',' << rec.n_samples << '\n';
  out << os.str();
}

void append_metrics_csv(const std::filesystem::path& path, std::span<const MetricRecord> records) {
  const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  std::ofstream out(path, std::ios::app);
  if (!out) throw Error(ErrorCode::Io, "cannot append to " + path.string());
  if (fresh) write_metrics_header(out);
  for (const auto& r : records) write_metric_row(out, r);
}

std::vector<MetricRecord> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kMetricsCsvHeader) throw Error(ErrorCode::Io, "bad metrics CSV header in " + path.string());
  std::vector<MetricRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream is(line);
    std::string f[6];
    for (auto& cell : f) std::getline(is, cell, ',');
    MetricRecord r;
    r.client_id = std::stoi(f[0]);
    r.round = std::stoi(f[1]);
    r.split = parse_split(f[2]);
    r.psnr_mean = f[3] == "inf" ? kPsnrInfinity : std::stod(f[3]);
    r.ssim_mean = std::stod(f[4]);
    r.n_samples = std::stoul(f[5]);
    out.push_back(r);
  }
  return out;
}

}  // namespace physfed
