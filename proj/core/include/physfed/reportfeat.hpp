#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "physfed/image.hpp"
#include "physfed/phantom.hpp"

namespace physfed {

inline constexpr const char* kDefaultReportPrompt = "Please provide a radiology report of the CT slice.";

/// Unit-norm stand-in for a radiology-report text embedding.
struct ReportFeature {
  std::vector<double> values;
  std::string provider_tag;
};

struct ProviderConfig {
  enum class Kind { Stub, Remote };
  Kind kind = Kind::Stub;
  int dim = 64;
  std::uint64_t stub_seed = 0;
  std::string host = "127.0.0.1";
  int port = 0;
  int timeout_ms = 5000;
  int max_in_flight = 4;
  std::string prompt = kDefaultReportPrompt;

  void validate() const;
};

/// Source of f_t. Implementations are immutable after construction and may be
/// called from several threads.
class ReportProvider {
 public:
  virtual ~ReportProvider() = default;
  virtual ReportFeature feature(const ImageGrid& image, const AnatomyMetadata& meta) const = 0;
  virtual int dim() const = 0;
};

/// Seeded random projection of (body-part one-hot, tissue fractions, lesion
/// count) into dim - 4 values, followed by image mean, std, p10, p90; the
/// whole vector is scaled to unit norm.
ReportFeature stub_feature(const ImageGrid& image, const AnatomyMetadata& meta, const ProviderConfig& cfg);

/// One POST /feature round trip. Throws Timeout, TransportError,
/// DimensionMismatch or MalformedResponse; never falls back to the stub.
ReportFeature remote_feature(const ImageGrid& image, const ProviderConfig& cfg);

class StubProvider final : public ReportProvider {
 public:
  explicit StubProvider(ProviderConfig cfg);
  ReportFeature feature(const ImageGrid& image, const AnatomyMetadata& meta) const override;
  int dim() const override { return cfg_.dim; }

 private:
  ProviderConfig cfg_;
};

class RemoteProvider final : public ReportProvider {
 public:
  explicit RemoteProvider(ProviderConfig cfg);
  ~RemoteProvider() override;
  ReportFeature feature(const ImageGrid& image, const AnatomyMetadata& meta) const override;
  int dim() const override { return cfg_.dim; }

 private:
  struct Gate;
  ProviderConfig cfg_;
  std::unique_ptr<Gate> gate_;
};

std::unique_ptr<ReportProvider> make_provider(const ProviderConfig& cfg);

// Wire helpers shared by the client and the mock server.
std::vector<std::uint8_t> encode_feature_request(int dim, const std::string& prompt, const ImageGrid& image);
struct FeatureRequest {
  int dim = 0;
  std::string prompt;
  ImageGrid image;
};
FeatureRequest decode_feature_request(const std::string& body);
std::string encode_feature_response(const std::vector<double>& values);

struct MockServerOptions {
  enum class Behavior { Echo, Delay, Malform, ShortVector, ServerError };
  Behavior behavior = Behavior::Echo;
  int delay_ms = 0;
  /// Returned verbatim by Echo/Delay when set.
  std::optional<std::vector<double>> fixed_vector;
  /// Otherwise consulted per request.
  std::function<std::vector<double>(const FeatureRequest&)> responder;
};

/// In-process HTTP server speaking the feature wire contract. Port 0 picks a
/// free port. Stops and releases the port on destruction.
class MockServer {
 public:
  MockServer(int port, MockServerOptions options);
  ~MockServer();
  MockServer(const MockServer&) = delete;
  MockServer& operator=(const MockServer&) = delete;

  int port() const { return port_; }
  std::uint64_t requests_served() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  int port_ = 0;
};

}  // namespace physfed
