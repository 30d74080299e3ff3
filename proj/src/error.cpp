#include "lmdir/error.hpp"

namespace lmdir {

std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::OddChannelCount: return "OddChannelCount";
    case ErrorCode::ImageTooSmall: return "ImageTooSmall";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::NonFiniteActivation: return "NonFiniteActivation";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::ProviderUnavailable: return "ProviderUnavailable";
    case ErrorCode::MalformedResponse: return "MalformedResponse";
    case ErrorCode::EmbeddingShapeMismatch: return "EmbeddingShapeMismatch";
    case ErrorCode::CacheCorrupt: return "CacheCorrupt";
    case ErrorCode::NotFound: return "NotFound";
    case ErrorCode::MissingBundle: return "MissingBundle";
    case ErrorCode::DatasetEmpty: return "DatasetEmpty";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

Error::Error(ErrorCode code, const std::string& message)
    : std::runtime_error(std::string(error_code_name(code)) + ": " + message), code_(code) {}

}  // namespace lmdir
