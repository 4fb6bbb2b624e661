// Copyright 2026 The GeoSeg Tools Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace geoseg {

enum class ErrorCode {
  kInvalidArgument,
  kDimensionMismatch,
  kUnknownRawCode,
  kInvalidCategory,
  kGenerationFormat,
  kTransport,
  kMockMiss,
  kIo,
  kManifest,
  kAborted,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "invalid_argument";
    case ErrorCode::kDimensionMismatch: return "dimension_mismatch";
    case ErrorCode::kUnknownRawCode: return "unknown_raw_code";
    case ErrorCode::kInvalidCategory: return "invalid_category";
    case ErrorCode::kGenerationFormat: return "generation_format";
    case ErrorCode::kTransport: return "transport";
    case ErrorCode::kMockMiss: return "mock_miss";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kManifest: return "manifest";
    case ErrorCode::kAborted: return "aborted";
  }
  return "unknown";
}

// Every failure raised by the library carries a machine-readable code so the
// CLI can report it as JSON.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

inline void require(bool condition, ErrorCode code, const std::string& message) {
  if (!condition) throw Error(code, message);
}

}  // namespace geoseg
