#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace tapip3d {

enum class ErrorCode {
  kDegenerateProjection,
  kInvalidDepth,
  kDegenerateScale,
  kEmptyCloud,
  kShape,
  kConfig,
  kFormat,
  kChecksum,
  kDivergence,
  kUndefinedMetric,
  kAssembly,
  kEmptyWindow,
  kLoss,
  kInternal,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kDegenerateProjection: return "degenerate-projection";
    case ErrorCode::kInvalidDepth: return "invalid-depth";
    case ErrorCode::kDegenerateScale: return "degenerate-scale";
    case ErrorCode::kEmptyCloud: return "empty-cloud";
    case ErrorCode::kShape: return "shape";
    case ErrorCode::kConfig: return "config";
    case ErrorCode::kFormat: return "format";
    case ErrorCode::kChecksum: return "checksum";
    case ErrorCode::kDivergence: return "divergence";
    case ErrorCode::kUndefinedMetric: return "undefined-metric";
    case ErrorCode::kAssembly: return "assembly";
    case ErrorCode::kEmptyWindow: return "empty-window";
    case ErrorCode::kLoss: return "loss";
    case ErrorCode::kInternal: return "internal";
  }
  return "unknown";
}

/// Every failure raised by the library carries one of the codes above so
/// callers (and the CLI's exit-code mapping) can branch without parsing text.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

inline void require(bool condition, ErrorCode code, const std::string& what) {
  if (!condition) fail(code, what);
}

}  // namespace tapip3d
