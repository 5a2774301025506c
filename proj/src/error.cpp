#include "driftguard/error.hpp"

namespace driftguard {

std::string_view errc_name(Errc code) noexcept {
  switch (code) {
    case Errc::TruncatedHeader: return "TruncatedHeader";
    case Errc::NonNumericField: return "NonNumericField";
    case Errc::SignalCountMismatch: return "SignalCountMismatch";
    case Errc::InvalidHeaderField: return "InvalidHeaderField";
    case Errc::DiscontinuousRecording: return "DiscontinuousRecording";
    case Errc::UnknownSignal: return "UnknownSignal";
    case Errc::TruncatedRecord: return "TruncatedRecord";
    case Errc::MalformedTAL: return "MalformedTAL";
    case Errc::UnknownStageText: return "UnknownStageText";
    case Errc::OverlappingAnnotations: return "OverlappingAnnotations";
    case Errc::InvalidBand: return "InvalidBand";
    case Errc::InvalidFrequency: return "InvalidFrequency";
    case Errc::IrrationalRatio: return "IrrationalRatio";
    case Errc::EmptyBatch: return "EmptyBatch";
    case Errc::TrainModeBatchTooSmall: return "TrainModeBatchTooSmall";
    case Errc::StaleCache: return "StaleCache";
    case Errc::NotADistribution: return "NotADistribution";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::CheckpointFormat: return "CheckpointFormat";
    case Errc::NotOneHot: return "NotOneHot";
    case Errc::ZeroClassCount: return "ZeroClassCount";
    case Errc::DegeneratePrior: return "DegeneratePrior";
    case Errc::EmptyDataset: return "EmptyDataset";
    case Errc::SplitOverlap: return "SplitOverlap";
    case Errc::BatchTooSmall: return "BatchTooSmall";
    case Errc::InvalidConfig: return "InvalidConfig";
    case Errc::NonFiniteLoss: return "NonFiniteLoss";
    case Errc::LengthMismatch: return "LengthMismatch";
    case Errc::Empty: return "Empty";
    case Errc::TooShort: return "TooShort";
    case Errc::OutOfRange: return "OutOfRange";
    case Errc::NotStochastic: return "NotStochastic";
    case Errc::OnsetOutOfRange: return "OnsetOutOfRange";
  }
  return "Unknown";
}

}  // namespace driftguard
