#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace diematch {

enum class Errc {
  InvalidArgument,
  IoError,
  ParseError,
  // geometry
  MissingNormals,
  MalformedPly,
  EmptyCloud,
  NonPositiveVoxel,
  InvalidRange,
  // registration
  TooFewMatches,
  DegenerateConfiguration,
  NoMatchesInRange,
  AllRestartsFailed,
  DimensionMismatch,
  IndexOutOfRange,
  NonFiniteValue,
  NoMutualMatches,
  NoConsensus,
  // similarity
  SingleClassTraining,
  // graph
  DuplicatePair,
  UnknownNode,
  // metrics
  DegenerateCloud,
  EmptyDie,
  ItemSetMismatch,
  LengthMismatch,
};

inline std::string_view to_string(Errc code) {
  switch (code) {
    case Errc::InvalidArgument: return "InvalidArgument";
    case Errc::IoError: return "IoError";
    case Errc::ParseError: return "ParseError";
    case Errc::MissingNormals: return "MissingNormals";
    case Errc::MalformedPly: return "MalformedPly";
    case Errc::EmptyCloud: return "EmptyCloud";
    case Errc::NonPositiveVoxel: return "NonPositiveVoxel";
    case Errc::InvalidRange: return "InvalidRange";
    case Errc::TooFewMatches: return "TooFewMatches";
    case Errc::DegenerateConfiguration: return "DegenerateConfiguration";
    case Errc::NoMatchesInRange: return "NoMatchesInRange";
    case Errc::AllRestartsFailed: return "AllRestartsFailed";
    case Errc::DimensionMismatch: return "DimensionMismatch";
    case Errc::IndexOutOfRange: return "IndexOutOfRange";
    case Errc::NonFiniteValue: return "NonFiniteValue";
    case Errc::NoMutualMatches: return "NoMutualMatches";
    case Errc::NoConsensus: return "NoConsensus";
    case Errc::SingleClassTraining: return "SingleClassTraining";
    case Errc::DuplicatePair: return "DuplicatePair";
    case Errc::UnknownNode: return "UnknownNode";
    case Errc::DegenerateCloud: return "DegenerateCloud";
    case Errc::EmptyDie: return "EmptyDie";
    case Errc::ItemSetMismatch: return "ItemSetMismatch";
    case Errc::LengthMismatch: return "LengthMismatch";
  }
  return "Unknown";
}

/// Exception carrying a machine-readable code and, for pipeline failures,
/// the name of the stage that raised it.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& message, std::string stage = {})
      : std::runtime_error(format(code, message, stage)),
        code_(code),
        detail_(message),
        stage_(std::move(stage)) {}

  Errc code() const noexcept { return code_; }
  const std::string& detail() const noexcept { return detail_; }
  const std::string& stage() const noexcept { return stage_; }

  Error with_stage(std::string stage) const { return Error(code_, detail_, std::move(stage)); }

 private:
  static std::string format(Errc code, const std::string& message, const std::string& stage) {
    std::string out;
    if (!stage.empty()) out += "[" + stage + "] ";
    out += std::string(to_string(code));
    if (!message.empty()) out += ": " + message;
    return out;
  }

  Errc code_;
  std::string detail_;
  std::string stage_;
};

}  // namespace diematch
