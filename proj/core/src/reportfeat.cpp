#include "physfed/reportfeat.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <random>
#include <semaphore>
#include <thread>

#include <fmt/format.h>
#include <httplib.h>

#include "physfed/error.hpp"
#include "physfed/random.hpp"

namespace physfed {

namespace {

constexpr char kRequestMagic[4] = {'P', 'F', 'R', '1'};
constexpr int kMetaDims = 3 + 4 + 1;

std::atomic<std::uint64_t> g_request_id{0};

void put_u32(std::vector<std::uint8_t>& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const char* p) {
  const auto* b = reinterpret_cast<const unsigned char*>(p);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

// Linear interpolation between order statistics.
double percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

void unit_normalize(std::vector<double>& v, const std::string& context) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  if (!(n > 0) || !std::isfinite(n)) throw Error(ErrorCode::MalformedResponse, context + ": feature has zero or non-finite norm");
  // Already unit within rounding: leave the bits alone so normalization is idempotent.
  if (std::abs(n - 1.0) <= 8 * std::numeric_limits<double>::epsilon()) return;
  for (auto& x : v) x /= n;
}

}  // namespace

void ProviderConfig::validate() const {
  if (dim < 8 || dim % 4 != 0) throw Error(ErrorCode::InvalidArgument, "provider dim must be >= 8 and divisible by 4");
  if (kind == Kind::Remote && timeout_ms <= 0) throw Error(ErrorCode::InvalidArgument, "remote timeout must be positive");
  if (kind == Kind::Remote && max_in_flight < 1) throw Error(ErrorCode::InvalidArgument, "max_in_flight must be >= 1");
}

ReportFeature stub_feature(const ImageGrid& image, const AnatomyMetadata& meta, const ProviderConfig& cfg) {
  if (cfg.dim < 8) throw Error(ErrorCode::InvalidArgument, "stub feature dimension must be >= 8");
  std::array<double, kMetaDims> m{};
  m[static_cast<std::size_t>(meta.body_part)] = 1.0;
  m[3] = meta.fraction(TissueClass::Fat);
  m[4] = meta.fraction(TissueClass::Soft);
  m[5] = meta.fraction(TissueClass::Blood);
  m[6] = meta.fraction(TissueClass::Bone);
  m[7] = static_cast<double>(meta.lesion_count);

  const int proj_dims = cfg.dim - 4;
  std::mt19937_64 eng(derive_seed(cfg.stub_seed, {0x73747562}));
  std::normal_distribution<double> gauss(0.0, 1.0);
  ReportFeature out;
  out.provider_tag = "stub";
  out.values.assign(static_cast<std::size_t>(cfg.dim), 0.0);
  for (int r = 0; r < proj_dims; ++r) {
    double s = 0.0;
    for (int c = 0; c < kMetaDims; ++c) s += gauss(eng) * m[static_cast<std::size_t>(c)];
    out.values[static_cast<std::size_t>(r)] = s;
  }
  const auto& px = image.data;
  const double n = static_cast<double>(px.size());
  const double mu = std::accumulate(px.begin(), px.end(), 0.0) / n;
  double var = 0.0;
  for (double v : px) var += (v - mu) * (v - mu);
  out.values[static_cast<std::size_t>(proj_dims)] = mu;
  out.values[static_cast<std::size_t>(proj_dims + 1)] = std::sqrt(var / n);
  out.values[static_cast<std::size_t>(proj_dims + 2)] = percentile(px, 0.10);
  out.values[static_cast<std::size_t>(proj_dims + 3)] = percentile(px, 0.90);
  unit_normalize(out.values, "stub");
  return out;
}

std::vector<std::uint8_t> encode_feature_request(int dim, const std::string& prompt, const ImageGrid& image) {
  std::vector<std::uint8_t> buf(std::begin(kRequestMagic), std::end(kRequestMagic));
  put_u32(buf, static_cast<std::uint32_t>(dim));
  put_u32(buf, static_cast<std::uint32_t>(prompt.size()));
  buf.insert(buf.end(), prompt.begin(), prompt.end());
  const auto raw = encode_raw(static_cast<std::uint32_t>(image.size), static_cast<std::uint32_t>(image.size), image.data);
  buf.insert(buf.end(), raw.begin(), raw.end());
  return buf;
}

FeatureRequest decode_feature_request(const std::string& body) {
  if (body.size() < 12 || std::memcmp(body.data(), kRequestMagic, 4) != 0) {
    throw Error(ErrorCode::MalformedResponse, "request lacks PFR1 header");
  }
  FeatureRequest req;
  req.dim = static_cast<int>(get_u32(body.data() + 4));
  const std::uint32_t plen = get_u32(body.data() + 8);
  if (body.size() < 12 + static_cast<std::size_t>(plen)) throw Error(ErrorCode::MalformedResponse, "truncated prompt");
  req.prompt = body.substr(12, plen);
  const auto* img = reinterpret_cast<const std::uint8_t*>(body.data() + 12 + plen);
  auto raw = decode_raw(std::span<const std::uint8_t>(img, body.size() - 12 - plen));
  req.image.size = static_cast<int>(raw.rows);
  req.image.pixel_len = 1.0;
  req.image.data = std::move(raw.data);
  return req;
}

std::string encode_feature_response(const std::vector<double>& values) {
  std::string out;
  out.reserve(4 + 8 * values.size());
  const auto d = static_cast<std::uint32_t>(values.size());
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>(d >> (8 * i)));
  for (double v : values) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>(bits >> (8 * i)));
  }
  return out;
}

ReportFeature remote_feature(const ImageGrid& image, const ProviderConfig& cfg) {
  const std::uint64_t request_id = ++g_request_id;
  const std::string where = fmt::format("{}:{} request {}", cfg.host, cfg.port, request_id);
  httplib::Client client(cfg.host, cfg.port);
  const auto timeout = std::chrono::milliseconds(cfg.timeout_ms);
  client.set_connection_timeout(timeout);
  client.set_read_timeout(timeout);
  client.set_write_timeout(timeout);
  const auto body = encode_feature_request(cfg.dim, cfg.prompt, image);
  httplib::Headers headers{{"X-Request-Id", std::to_string(request_id)}};
  const auto started = std::chrono::steady_clock::now();
  auto res = client.Post("/feature", headers, reinterpret_cast<const char*>(body.data()), body.size(), "application/octet-stream");
  if (!res) {
    const auto err = res.error();
    const auto elapsed = std::chrono::steady_clock::now() - started;
    if (err == httplib::Error::ConnectionTimeout || (err == httplib::Error::Read && elapsed >= timeout)) {
      throw Error(ErrorCode::Timeout, where + ": no response within " + std::to_string(cfg.timeout_ms) + " ms");
    }
    throw Error(ErrorCode::TransportError, where + ": " + httplib::to_string(err));
  }
  if (res->status < 200 || res->status >= 300) {
    throw Error(ErrorCode::TransportError, where + ": HTTP status " + std::to_string(res->status));
  }
  const std::string& payload = res->body;
  if (payload.size() < 4) throw Error(ErrorCode::MalformedResponse, where + ": response shorter than its header");
  const std::uint32_t d = get_u32(payload.data());
  if (payload.size() != 4 + 8 * static_cast<std::size_t>(d)) {
    throw Error(ErrorCode::MalformedResponse, where + fmt::format(": header says {} values but body has {} bytes", d, payload.size()));
  }
  if (static_cast<int>(d) != cfg.dim) {
    throw Error(ErrorCode::DimensionMismatch, where + fmt::format(": expected {} values, got {}", cfg.dim, d));
  }
  ReportFeature out;
  out.provider_tag = "remote";
  out.values.resize(d);
  for (std::uint32_t k = 0; k < d; ++k) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(payload[4 + 8 * k + i])) << (8 * i);
    out.values[k] = std::bit_cast<double>(bits);
  }
  unit_normalize(out.values, where);
  return out;
}

StubProvider::StubProvider(ProviderConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

ReportFeature StubProvider::feature(const ImageGrid& image, const AnatomyMetadata& meta) const {
  return stub_feature(image, meta, cfg_);
}

struct RemoteProvider::Gate {
  explicit Gate(int n) : slots(n) {}
  std::counting_semaphore<1024> slots;
};

RemoteProvider::RemoteProvider(ProviderConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  gate_ = std::make_unique<Gate>(std::min(cfg_.max_in_flight, 1024));
}

RemoteProvider::~RemoteProvider() = default;

ReportFeature RemoteProvider::feature(const ImageGrid& image, const AnatomyMetadata&) const {
  gate_->slots.acquire();
  struct Release {
    Gate* g;
    ~Release() { g->slots.release(); }
  } release{gate_.get()};
  return remote_feature(image, cfg_);
}

std::unique_ptr<ReportProvider> make_provider(const ProviderConfig& cfg) {
  if (cfg.kind == ProviderConfig::Kind::Remote) return std::make_unique<RemoteProvider>(cfg);
  return std::make_unique<StubProvider>(cfg);
}

struct MockServer::Impl {
  httplib::Server server;
  std::thread worker;
  std::atomic<std::uint64_t> served{0};
};

MockServer::MockServer(int port, MockServerOptions options) : impl_(std::make_unique<Impl>()) {
  auto& srv = impl_->server;
  // SO_REUSEADDR only: httplib's default SO_REUSEPORT would let a second server share the port.
  srv.set_socket_options([](socket_t sock) {
    int yes = 1;
    setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const void*>(&yes), sizeof(yes));
  });
  auto* served = &impl_->served;
  srv.Post("/feature", [options = std::move(options), served](const httplib::Request& req, httplib::Response& res) {
    ++*served;
    using B = MockServerOptions::Behavior;
    if (options.behavior == B::ServerError) {
      res.status = 500;
      return;
    }
    if (options.behavior == B::Malform) {
      res.set_content(std::string("\x05\x00", 2), "application/octet-stream");
      return;
    }
    FeatureRequest parsed;
    try {
      parsed = decode_feature_request(req.body);
    } catch (const Error& e) {
      res.status = 400;
      res.set_content(e.what(), "text/plain");
      return;
    }
    if (options.behavior == B::Delay) std::this_thread::sleep_for(std::chrono::milliseconds(options.delay_ms));
    std::vector<double> values;
    if (options.fixed_vector) {
      values = *options.fixed_vector;
    } else if (options.responder) {
      values = options.responder(parsed);
    } else {
      values.resize(static_cast<std::size_t>(parsed.dim));
      for (std::size_t k = 0; k < values.size(); ++k) values[k] = 1.0 + static_cast<double>(k);
    }
    if (options.behavior == B::ShortVector && !values.empty()) values.pop_back();
    res.set_content(encode_feature_response(values), "application/octet-stream");
  });
  if (port == 0) {
    port_ = srv.bind_to_any_port("127.0.0.1");
    if (port_ < 0) throw Error(ErrorCode::PortInUse, "could not bind any local port");
  } else {
    if (!srv.bind_to_port("127.0.0.1", port)) throw Error(ErrorCode::PortInUse, "port " + std::to_string(port) + " is in use");
    port_ = port;
  }
  impl_->worker = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
}

MockServer::~MockServer() {
  impl_->server.stop();
  if (impl_->worker.joinable()) impl_->worker.join();
}

std::uint64_t MockServer::requests_served() const { return impl_->served; }

}  // namespace physfed
