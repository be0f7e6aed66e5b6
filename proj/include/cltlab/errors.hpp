#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace cltlab {

enum class ErrorCode {
  NotPsd,
  NotSymmetric,
  DimMismatch,
  SizeMismatch,
  InsufficientSamples,
  BadProfileParams,
  BadGraph,
  NotStochastic,
  NotErgodic,
  Reducible,
  Timeout,
  NoOverlap,
  BadMinorization,
  MissingRegens,
  TooFewCycles,
  BadLengths,
  BadParams,
  LengthMismatch,
  TooManySubsets,
  DomainError,
  BadOrder,
  TooLarge,
  TooFewPoints,
  NonPositiveEstimates,
  BadSetting,
  InvalidConfig,
  BudgetExceeded,
  IoError,
  MissingResults,
};

inline std::string_view to_string(ErrorCode c) {
  switch (c) {
    case ErrorCode::NotPsd: return "NotPsd";
    case ErrorCode::NotSymmetric: return "NotSymmetric";
    case ErrorCode::DimMismatch: return "DimMismatch";
    case ErrorCode::SizeMismatch: return "SizeMismatch";
    case ErrorCode::InsufficientSamples: return "InsufficientSamples";
    case ErrorCode::BadProfileParams: return "BadProfileParams";
    case ErrorCode::BadGraph: return "BadGraph";
    case ErrorCode::NotStochastic: return "NotStochastic";
    case ErrorCode::NotErgodic: return "NotErgodic";
    case ErrorCode::Reducible: return "Reducible";
    case ErrorCode::Timeout: return "Timeout";
    case ErrorCode::NoOverlap: return "NoOverlap";
    case ErrorCode::BadMinorization: return "BadMinorization";
    case ErrorCode::MissingRegens: return "MissingRegens";
    case ErrorCode::TooFewCycles: return "TooFewCycles";
    case ErrorCode::BadLengths: return "BadLengths";
    case ErrorCode::BadParams: return "BadParams";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::TooManySubsets: return "TooManySubsets";
    case ErrorCode::DomainError: return "DomainError";
    case ErrorCode::BadOrder: return "BadOrder";
    case ErrorCode::TooLarge: return "TooLarge";
    case ErrorCode::TooFewPoints: return "TooFewPoints";
    case ErrorCode::NonPositiveEstimates: return "NonPositiveEstimates";
    case ErrorCode::BadSetting: return "BadSetting";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::BudgetExceeded: return "BudgetExceeded";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::MissingResults: return "MissingResults";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& msg)
      : std::runtime_error(std::string(to_string(code)) + ": " + msg), code_(code), detail_(msg) {}

  ErrorCode code() const noexcept { return code_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorCode code_;
  std::string detail_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& msg) { throw Error(code, msg); }

inline void require(bool ok, ErrorCode code, const std::string& msg) {
  if (!ok) fail(code, msg);
}

}  // namespace cltlab
