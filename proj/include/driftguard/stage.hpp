#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string_view>

namespace driftguard {

inline constexpr std::size_t kNumStages = 5;
inline constexpr double kEpochSeconds = 30.0;
inline constexpr double kTargetRateHz = 100.0;
inline constexpr std::size_t kEpochSamples = 3000;

// Integer encoding is fixed: median smoothing orders labels by this value.
enum class StageLabel : int { W = 0, N1 = 1, N2 = 2, N3 = 3, REM = 4 };

// nullopt marks an Excluded epoch (unscored or movement).
using MaybeStage = std::optional<StageLabel>;

inline constexpr std::array<StageLabel, kNumStages> kAllStages = {
    StageLabel::W, StageLabel::N1, StageLabel::N2, StageLabel::N3, StageLabel::REM};

constexpr int to_index(StageLabel s) noexcept { return static_cast<int>(s); }

constexpr StageLabel stage_from_index(int i) noexcept { return static_cast<StageLabel>(i); }

constexpr std::string_view stage_name(StageLabel s) noexcept {
  switch (s) {
    case StageLabel::W: return "W";
    case StageLabel::N1: return "N1";
    case StageLabel::N2: return "N2";
    case StageLabel::N3: return "N3";
    case StageLabel::REM: return "REM";
  }
  return "?";
}

inline std::optional<StageLabel> parse_stage_name(std::string_view s) noexcept {
  for (auto st : kAllStages) {
    if (stage_name(st) == s) return st;
  }
  return std::nullopt;
}

}  // namespace driftguard
