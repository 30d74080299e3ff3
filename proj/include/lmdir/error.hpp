#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace lmdir {

enum class ErrorCode {
  ShapeMismatch,
  OddChannelCount,
  ImageTooSmall,
  InvalidConfig,
  InvalidArgument,
  NonFiniteActivation,
  NonFiniteLoss,
  ProviderUnavailable,
  MalformedResponse,
  EmbeddingShapeMismatch,
  CacheCorrupt,
  NotFound,
  MissingBundle,
  DatasetEmpty,
  IoError,
};

std::string_view error_code_name(ErrorCode code);

// Every domain failure in the library is reported through this type; the code
// is what callers branch on, the message is for humans.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message);

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace lmdir
