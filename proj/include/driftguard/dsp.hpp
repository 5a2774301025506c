#pragma once

// Causal preprocessing: notch and band-pass IIR filtering, rational
// resampling, epoching and per-record streaming standardization.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "driftguard/series.hpp"
#include "driftguard/stage.hpp"

namespace driftguard::dsp {

// y = (b0 + b1 z^-1 + b2 z^-2) / (1 + a1 z^-1 + a2 z^-2)
struct Biquad {
  double b0{1.0}, b1{0.0}, b2{0.0};
  double a1{0.0}, a2{0.0};

  bool is_stable() const;
};

// Cascade of biquads evaluated in direct form II transposed. Holds its own
// delay state, so one instance follows exactly one stream.
class FilterCascade {
 public:
  FilterCascade() = default;
  explicit FilterCascade(std::vector<Biquad> sections);

  static FilterCascade identity();

  const std::vector<Biquad>& sections() const { return sections_; }
  std::span<const double> state() const { return state_; }
  bool is_stable() const;

  double step(double x);
  void process(std::span<double> inout);
  void reset();
  // Appends the sections of `other` (with fresh state) after this cascade's.
  void chain(const FilterCascade& other);

 private:
  std::vector<Biquad> sections_;
  std::vector<double> state_;  // 2 per section
};

// 4th-order Butterworth band-pass (order-2 prototype, two biquads), bilinear
// transform with pre-warped edges, unit gain at the geometric centre.
FilterCascade design_bandpass(double lo_hz, double hi_hz, double fs_hz);

// Single-biquad notch, unit gain at DC and Nyquist.
FilterCascade design_notch(double f0_hz, double fs_hz, double q = 30.0);

// Runs `filter` over `series` starting from the filter's current state.
SampleSeries apply(FilterCascade& filter, const SampleSeries& series);

// Reduced up/down factors with fs_out / fs_in = up / down and down <= 1000.
struct Ratio {
  long up{1};
  long down{1};
};
Ratio rational_ratio(double fs_in, double fs_out);

// Polyphase windowed-sinc (Kaiser) rational resampler. The kernel is applied
// causally: output n only depends on input samples at or before its own time,
// at the cost of a fixed group delay of half the kernel. Output length is
// round(n_in * up / down).
SampleSeries resample(const SampleSeries& series, double fs_out);

// Welford running mean / population variance over every sample of a record.
class StreamingStandardizer {
 public:
  static constexpr double kEps = 1e-8;

  void update(std::span<const double> samples);
  void reset();

  std::size_t count() const { return count_; }
  double mean() const { return mean_; }
  double variance() const { return count_ == 0 ? 0.0 : m2_ / static_cast<double>(count_); }

 private:
  std::size_t count_{0};
  double mean_{0.0};
  double m2_{0.0};
};

struct Epoch {
  std::vector<double> samples;  // kEpochSamples standardized values
  std::string subject_id;
  std::size_t index{0};
  MaybeStage label;
};

enum class StatsOrder {
  IncludeCurrent,  // update with the epoch, then normalize it (default)
  StrictPrior,     // normalize with statistics of earlier epochs only
};

// Emits (x - mean) / sqrt(var + 1e-8). With StrictPrior the very first epoch
// of a record has no history and falls back to IncludeCurrent.
Epoch standardize_stream(StreamingStandardizer& std, std::span<const double> epoch_raw,
                         StatsOrder order = StatsOrder::IncludeCurrent);

// floor(n / epoch_len) windows; a trailing partial window is dropped.
std::vector<std::vector<double>> epoch_series(std::span<const double> samples,
                                              std::size_t epoch_len = kEpochSamples);

struct PreprocessConfig {
  std::vector<double> notch_hz{50.0, 60.0};
  double notch_q{30.0};
  double band_lo_hz{0.3};
  double band_hi_hz{45.0};
  double fs_out_hz{kTargetRateHz};
  StatsOrder stats_order{StatsOrder::IncludeCurrent};
};

// Causal record pipeline: notch(es) -> band-pass -> resample -> epoch ->
// streaming standardization. Notches at or above the input Nyquist are
// skipped since no energy can exist there. Epochs come back unlabeled with
// index = position in the record.
std::vector<Epoch> preprocess_record(const SampleSeries& raw, const PreprocessConfig& cfg,
                                     const std::string& subject_id);

}  // namespace driftguard::dsp
