#include "physfed/error.hpp"

namespace physfed {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::EmptyList: return "EmptyList";
    case ErrorCode::DegenerateColumn: return "DegenerateColumn";
    case ErrorCode::InsufficientCoverage: return "InsufficientCoverage";
    case ErrorCode::GeometryMismatch: return "GeometryMismatch";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::SeedCollision: return "SeedCollision";
    case ErrorCode::NonScalarLoss: return "NonScalarLoss";
    case ErrorCode::NonFiniteValue: return "NonFiniteValue";
    case ErrorCode::NonFiniteGradient: return "NonFiniteGradient";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorCode::ImageTooSmall: return "ImageTooSmall";
    case ErrorCode::UnknownClient: return "UnknownClient";
    case ErrorCode::EmptySet: return "EmptySet";
    case ErrorCode::ZeroNormCode: return "ZeroNormCode";
    case ErrorCode::ZeroNormQuery: return "ZeroNormQuery";
    case ErrorCode::Timeout: return "Timeout";
    case ErrorCode::TransportError: return "TransportError";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::MalformedResponse: return "MalformedResponse";
    case ErrorCode::PortInUse: return "PortInUse";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::Io: return "Io";
    case ErrorCode::Config: return "Config";
  }
  return "Unknown";
}

}  // namespace physfed
