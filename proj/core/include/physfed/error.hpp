#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace physfed {

enum class ErrorCode {
  InvalidArgument,
  EmptyList,
  DegenerateColumn,
  InsufficientCoverage,
  GeometryMismatch,
  ShapeMismatch,
  SeedCollision,
  NonScalarLoss,
  NonFiniteValue,
  NonFiniteGradient,
  NonFiniteLoss,
  IndexOutOfRange,
  ImageTooSmall,
  UnknownClient,
  EmptySet,
  ZeroNormCode,
  ZeroNormQuery,
  Timeout,
  TransportError,
  DimensionMismatch,
  MalformedResponse,
  PortInUse,
  VersionMismatch,
  Io,
  Config,
};

std::string_view to_string(ErrorCode code);

/// Base exception for everything thrown by the library. The code lets callers
/// (and tests) branch on the failure kind without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace physfed
