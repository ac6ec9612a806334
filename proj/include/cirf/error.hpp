#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace cirf {

enum class ErrorKind {
  // trace_model
  SegmentationRejected,
  MissingField,
  ResultLengthMismatch,
  ReservedSurface,
  DuplicateTraceId,
  MalformedLine,
  Io,
  // embedding
  ProviderUnavailable,
  DimensionMismatch,
  MissingEmbedding,
  AlreadyCentered,
  IncompleteTrace,
  BadMagic,
  ChecksumMismatch,
  // sinkhorn / vq
  TooFewPoints,
  NonFiniteInput,
  NumericalUnderflow,
  ShapeMismatch,
  NonFiniteLoss,
  ZeroNormCode,
  // sequence_builder
  UnknownTraceId,
  LengthMismatch,
  UnknownCodeId,
  InvalidManifest,
  // compressor
  ScorerUnavailable,
  NonFiniteScore,
  // diagnostics
  AllZeroNorm,
  ZeroNormVector,
  TooFewVectors,
  LabelOutOfRange,
  MissingLabel,
  // cli
  ConfigInvalid,
  MissingPrerequisite,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::SegmentationRejected: return "SegmentationRejected";
    case ErrorKind::MissingField: return "MissingField";
    case ErrorKind::ResultLengthMismatch: return "ResultLengthMismatch";
    case ErrorKind::ReservedSurface: return "ReservedSurface";
    case ErrorKind::DuplicateTraceId: return "DuplicateTraceId";
    case ErrorKind::MalformedLine: return "MalformedLine";
    case ErrorKind::Io: return "IoError";
    case ErrorKind::ProviderUnavailable: return "ProviderUnavailable";
    case ErrorKind::DimensionMismatch: return "DimensionMismatch";
    case ErrorKind::MissingEmbedding: return "MissingEmbedding";
    case ErrorKind::AlreadyCentered: return "AlreadyCentered";
    case ErrorKind::IncompleteTrace: return "IncompleteTrace";
    case ErrorKind::BadMagic: return "BadMagic";
    case ErrorKind::ChecksumMismatch: return "ChecksumMismatch";
    case ErrorKind::TooFewPoints: return "TooFewPoints";
    case ErrorKind::NonFiniteInput: return "NonFiniteInput";
    case ErrorKind::NumericalUnderflow: return "NumericalUnderflow";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorKind::ZeroNormCode: return "ZeroNormCode";
    case ErrorKind::UnknownTraceId: return "UnknownTraceId";
    case ErrorKind::LengthMismatch: return "LengthMismatch";
    case ErrorKind::UnknownCodeId: return "UnknownCodeId";
    case ErrorKind::InvalidManifest: return "InvalidManifest";
    case ErrorKind::ScorerUnavailable: return "ScorerUnavailable";
    case ErrorKind::NonFiniteScore: return "NonFiniteScore";
    case ErrorKind::AllZeroNorm: return "AllZeroNorm";
    case ErrorKind::ZeroNormVector: return "ZeroNormVector";
    case ErrorKind::TooFewVectors: return "TooFewVectors";
    case ErrorKind::LabelOutOfRange: return "LabelOutOfRange";
    case ErrorKind::MissingLabel: return "MissingLabel";
    case ErrorKind::ConfigInvalid: return "ConfigInvalid";
    case ErrorKind::MissingPrerequisite: return "MissingPrerequisite";
  }
  return "Unknown";
}

/// Every failure in the library is reported as an Error carrying its kind.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace cirf
