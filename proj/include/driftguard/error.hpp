#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace driftguard {

// Every failure the library reports carries one of these codes. The CLI maps
// groups of them onto its documented exit codes.
enum class Errc {
  // edfio
  TruncatedHeader,
  NonNumericField,
  SignalCountMismatch,
  InvalidHeaderField,
  DiscontinuousRecording,
  UnknownSignal,
  TruncatedRecord,
  MalformedTAL,
  UnknownStageText,
  OverlappingAnnotations,
  // dsp
  InvalidBand,
  InvalidFrequency,
  IrrationalRatio,
  // nn
  EmptyBatch,
  TrainModeBatchTooSmall,
  StaleCache,
  NotADistribution,
  ShapeMismatch,
  CheckpointFormat,
  // train
  NotOneHot,
  ZeroClassCount,
  DegeneratePrior,
  EmptyDataset,
  SplitOverlap,
  // tta
  BatchTooSmall,
  InvalidConfig,
  NonFiniteLoss,
  // metrics
  LengthMismatch,
  Empty,
  TooShort,
  OutOfRange,
  // synth
  NotStochastic,
  OnsetOutOfRange,
};

std::string_view errc_name(Errc code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace driftguard
