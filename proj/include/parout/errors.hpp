#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace parout {

enum class ErrorKind {
  DimensionMismatch,
  NonConvergence,
  SingularSystem,
  BadFoldCount,
  BadParams,
  EmptyStratum,
  RankDeficient,
  ComplexSpectrum,
  OrderInstability,
  OptimFailure,
  TooFewOutcomes,
  DegenerateSpectrum,
  NoFactors,
  NoNegativeControls,
  FirstStageSingular,
  NonPositiveLog,
  CovariateCollinearity,
  Parse,
  Usage,
};

inline std::string_view to_string(ErrorKind k) {
  switch (k) {
    case ErrorKind::DimensionMismatch: return "DimensionMismatch";
    case ErrorKind::NonConvergence: return "NonConvergence";
    case ErrorKind::SingularSystem: return "SingularSystem";
    case ErrorKind::BadFoldCount: return "BadFoldCount";
    case ErrorKind::BadParams: return "BadParams";
    case ErrorKind::EmptyStratum: return "EmptyStratum";
    case ErrorKind::RankDeficient: return "RankDeficient";
    case ErrorKind::ComplexSpectrum: return "ComplexSpectrum";
    case ErrorKind::OrderInstability: return "OrderInstability";
    case ErrorKind::OptimFailure: return "OptimFailure";
    case ErrorKind::TooFewOutcomes: return "TooFewOutcomes";
    case ErrorKind::DegenerateSpectrum: return "DegenerateSpectrum";
    case ErrorKind::NoFactors: return "NoFactors";
    case ErrorKind::NoNegativeControls: return "NoNegativeControls";
    case ErrorKind::FirstStageSingular: return "FirstStageSingular";
    case ErrorKind::NonPositiveLog: return "NonPositiveLog";
    case ErrorKind::CovariateCollinearity: return "CovariateCollinearity";
    case ErrorKind::Parse: return "Parse";
    case ErrorKind::Usage: return "Usage";
  }
  return "Unknown";
}

// All library failures are reported through this type; kind() lets callers
// (the CLI in particular) map failures onto exit codes.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace parout
