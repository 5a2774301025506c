#pragma once

// Stage-conditioned synthetic EEG: Markov hypnograms, per-stage spectral
// recipes, and drift injectors for gain, offset, noise and mains hum.

#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "driftguard/edfio.hpp"
#include "driftguard/stage.hpp"

namespace driftguard::synth {

// Narrowband component. bandwidth 0 gives a single sinusoid at the centre;
// otherwise several random-phase tones spread over the band. A burst
// component is windowed to short Hann bursts instead of running throughout.
struct Component {
  double center_hz{10.0};
  double bandwidth_hz{0.0};
  double amplitude_uv{10.0};
  bool burst{false};
};

struct StageRecipe {
  std::vector<Component> components;
  double noise_uv{0.0};  // white Gaussian RMS
};

struct StageModel {
  std::array<StageRecipe, kNumStages> stages;

  // W 10 Hz alpha, N1 6 Hz theta, N2 theta with 13 Hz spindle bursts, N3
  // 1.5 Hz high-amplitude delta, REM low-amplitude 4-8 Hz.
  static StageModel defaults();
};

using Transition = std::array<std::array<double, kNumStages>, kNumStages>;

// `stay` on the diagonal, the rest split evenly.
Transition default_transition(double stay = 0.85);

// Markov chain starting at W. Throws NotStochastic if a row is negative or
// does not sum to 1 within 1e-9.
std::vector<StageLabel> gen_hypnogram(const Transition& transition, std::size_t n, std::mt19937_64& rng);

std::vector<double> gen_epoch(StageLabel stage, const StageModel& model, std::mt19937_64& rng,
                              double fs_hz = kTargetRateHz, std::size_t n_samples = kEpochSamples);

enum class DriftKind { Gain, Offset, Noise, Hum50 };

struct DriftSpec {
  DriftKind kind{DriftKind::Gain};
  double magnitude{1.0};  // gain factor, offset, noise RMS, or hum amplitude
  std::size_t onset_epoch{0};
  std::size_t ramp_epochs{0};
};

std::string drift_kind_name(DriftKind k);
DriftKind parse_drift_kind(const std::string& s);

// Fraction of full magnitude reached at absolute sample `i`: 0 before onset,
// then a linear ramp over ramp_epochs epochs (a step when 0).
double drift_ramp(const DriftSpec& spec, std::size_t i, std::size_t epoch_len = kEpochSamples);

// Applies the drift to samples[k] as absolute sample first_sample + k, so a
// stream can be shifted whole or piece by piece with identical results
// (noise is drawn from `rng` in sample order, only after onset).
void inject_drift(std::span<double> samples, std::size_t first_sample, const DriftSpec& spec,
                  std::mt19937_64& rng, double fs_hz = kTargetRateHz, std::size_t epoch_len = kEpochSamples);

// Whole-stream form. Throws OnsetOutOfRange when the onset epoch does not
// start inside the stream.
std::vector<double> inject_drift(const std::vector<double>& stream, const DriftSpec& spec, std::mt19937_64& rng,
                                 double fs_hz = kTargetRateHz, std::size_t epoch_len = kEpochSamples);

struct SubjectRecord {
  std::string subject_id;
  double fs_hz{kTargetRateHz};
  std::vector<StageLabel> hypnogram;
  std::vector<double> samples;  // microvolts, hypnogram.size() * 3000
};

// Generates one subject. Each subject gets its own small gain and frequency
// offsets so that subjects differ the way recordings do.
SubjectRecord gen_subject(const std::string& subject_id, std::size_t n_epochs, const StageModel& model,
                          const Transition& transition, std::mt19937_64& rng);

inline constexpr double kEdfPhysMax = 1000.0;
inline constexpr int kEdfDigMax = 32767;
inline constexpr std::string_view kEdfSignalLabel = "EEG Fpz-Cz";

// Snaps samples onto the EDF digital grid used by to_edf, so that a written
// record reads back to exactly these values.
void quantize_to_edf(std::vector<double>& samples);

// EDF+C with one EEG signal, 30 s records, and one stage annotation per epoch.
edfio::EdfWriteSpec to_edf(const SubjectRecord& rec);

}  // namespace driftguard::synth
