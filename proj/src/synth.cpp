#include "driftguard/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "driftguard/error.hpp"

namespace driftguard::synth {
namespace {

constexpr std::size_t kTonesPerBand = 8;
constexpr double kTwoPi = 2.0 * std::numbers::pi;

void add_component(std::vector<double>& x, const Component& c, double fs, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const std::size_t n_tones = c.bandwidth_hz > 0.0 ? kTonesPerBand : 1;
  const double amp = c.amplitude_uv / std::sqrt(static_cast<double>(n_tones));
  std::vector<double> tone(x.size(), 0.0);
  for (std::size_t k = 0; k < n_tones; ++k) {
    const double f = n_tones == 1 ? c.center_hz : c.center_hz + c.bandwidth_hz * (u01(rng) - 0.5);
    const double phase = kTwoPi * u01(rng);
    for (std::size_t i = 0; i < x.size(); ++i) {
      tone[i] += amp * std::sin(kTwoPi * f * static_cast<double>(i) / fs + phase);
    }
  }
  if (c.burst) {
    // One or two Hann-windowed bursts of 1 to 2 s.
    std::vector<double> env(x.size(), 0.0);
    const int n_bursts = 1 + static_cast<int>(u01(rng) * 2.0);
    for (int b = 0; b < n_bursts; ++b) {
      const auto len = static_cast<std::size_t>(fs * (1.0 + u01(rng)));
      if (len >= x.size()) break;
      const auto start = static_cast<std::size_t>(u01(rng) * static_cast<double>(x.size() - len));
      for (std::size_t i = 0; i < len; ++i) {
        const double w = 0.5 - 0.5 * std::cos(kTwoPi * static_cast<double>(i) / static_cast<double>(len - 1));
        env[start + i] = std::max(env[start + i], w);
      }
    }
    for (std::size_t i = 0; i < x.size(); ++i) tone[i] *= env[i];
  }
  for (std::size_t i = 0; i < x.size(); ++i) x[i] += tone[i];
}

}  // namespace

StageModel StageModel::defaults() {
  StageModel m;
  auto& s = m.stages;
  s[to_index(StageLabel::W)] = {{{10.0, 2.0, 30.0, false}, {20.0, 6.0, 6.0, false}}, 4.0};
  s[to_index(StageLabel::N1)] = {{{6.0, 3.0, 25.0, false}}, 4.0};
  s[to_index(StageLabel::N2)] = {{{6.0, 3.0, 25.0, false}, {13.0, 1.0, 45.0, true}}, 4.0};
  s[to_index(StageLabel::N3)] = {{{1.5, 1.0, 45.0, false}}, 4.0};
  s[to_index(StageLabel::REM)] = {{{6.0, 4.0, 10.0, false}}, 4.0};
  return m;
}

Transition default_transition(double stay) {
  Transition t{};
  const double off = (1.0 - stay) / static_cast<double>(kNumStages - 1);
  for (std::size_t i = 0; i < kNumStages; ++i) {
    for (std::size_t j = 0; j < kNumStages; ++j) t[i][j] = i == j ? stay : off;
  }
  return t;
}

std::vector<StageLabel> gen_hypnogram(const Transition& transition, std::size_t n, std::mt19937_64& rng) {
  for (std::size_t i = 0; i < kNumStages; ++i) {
    double sum = 0.0;
    for (double p : transition[i]) {
      if (!(p >= 0.0)) throw Error(Errc::NotStochastic, "negative transition probability in row " + std::to_string(i));
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-9) {
      throw Error(Errc::NotStochastic, "transition row " + std::to_string(i) + " does not sum to 1");
    }
  }
  std::vector<StageLabel> out;
  out.reserve(n);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::size_t cur = to_index(StageLabel::W);
  for (std::size_t t = 0; t < n; ++t) {
    if (t > 0) {
      const double r = u01(rng);
      double acc = 0.0;
      std::size_t next = kNumStages - 1;
      for (std::size_t j = 0; j < kNumStages; ++j) {
        acc += transition[cur][j];
        if (r < acc) {
          next = j;
          break;
        }
      }
      // Guard against rounding leaving r above the final cumulative sum.
      while (transition[cur][next] == 0.0 && next > 0) --next;
      cur = next;
    }
    out.push_back(stage_from_index(static_cast<int>(cur)));
  }
  return out;
}

std::vector<double> gen_epoch(StageLabel stage, const StageModel& model, std::mt19937_64& rng, double fs_hz,
                              std::size_t n_samples) {
  std::vector<double> x(n_samples, 0.0);
  const StageRecipe& r = model.stages[static_cast<std::size_t>(to_index(stage))];
  for (const auto& c : r.components) add_component(x, c, fs_hz, rng);
  if (r.noise_uv > 0.0) {
    std::normal_distribution<double> g(0.0, r.noise_uv);
    for (double& v : x) v += g(rng);
  }
  return x;
}

std::string drift_kind_name(DriftKind k) {
  switch (k) {
    case DriftKind::Gain: return "gain";
    case DriftKind::Offset: return "offset";
    case DriftKind::Noise: return "noise";
    case DriftKind::Hum50: return "hum50";
  }
  return "?";
}

DriftKind parse_drift_kind(const std::string& s) {
  for (auto k : {DriftKind::Gain, DriftKind::Offset, DriftKind::Noise, DriftKind::Hum50}) {
    if (drift_kind_name(k) == s) return k;
  }
  throw Error(Errc::InvalidConfig, "unknown drift kind '" + s + "' (gain, offset, noise, hum50)");
}

double drift_ramp(const DriftSpec& spec, std::size_t i, std::size_t epoch_len) {
  const std::size_t onset = spec.onset_epoch * epoch_len;
  if (i < onset) return 0.0;
  if (spec.ramp_epochs == 0) return 1.0;
  const double frac = static_cast<double>(i - onset + 1) / static_cast<double>(spec.ramp_epochs * epoch_len);
  return std::min(1.0, frac);
}

void inject_drift(std::span<double> samples, std::size_t first_sample, const DriftSpec& spec,
                  std::mt19937_64& rng, double fs_hz, std::size_t epoch_len) {
  for (std::size_t k = 0; k < samples.size(); ++k) {
    const std::size_t i = first_sample + k;
    const double a = drift_ramp(spec, i, epoch_len);
    if (a == 0.0) continue;
    double& v = samples[k];
    switch (spec.kind) {
      case DriftKind::Gain: v *= 1.0 + (spec.magnitude - 1.0) * a; break;
      case DriftKind::Offset: v += spec.magnitude * a; break;
      case DriftKind::Noise: {
        // fresh distribution per sample: no cached spare value, so chunking never changes the draws
        std::normal_distribution<double> g(0.0, 1.0);
        v += spec.magnitude * a * g(rng);
        break;
      }
      case DriftKind::Hum50:
        // cosine phase so the tone survives sampling at exactly 100 Hz
        v += spec.magnitude * a * std::cos(kTwoPi * 50.0 * static_cast<double>(i) / fs_hz);
        break;
    }
  }
}

std::vector<double> inject_drift(const std::vector<double>& stream, const DriftSpec& spec, std::mt19937_64& rng,
                                 double fs_hz, std::size_t epoch_len) {
  if (spec.onset_epoch * epoch_len >= stream.size()) {
    throw Error(Errc::OnsetOutOfRange, "drift onset epoch " + std::to_string(spec.onset_epoch) +
                                           " is past the end of a " +
                                           std::to_string(stream.size() / epoch_len) + "-epoch stream");
  }
  std::vector<double> out = stream;
  inject_drift(out, 0, spec, rng, fs_hz, epoch_len);
  return out;
}

SubjectRecord gen_subject(const std::string& subject_id, std::size_t n_epochs, const StageModel& model,
                          const Transition& transition, std::mt19937_64& rng) {
  SubjectRecord rec;
  rec.subject_id = subject_id;
  rec.hypnogram = gen_hypnogram(transition, n_epochs, rng);

  std::uniform_real_distribution<double> gain_d(0.8, 1.2);
  std::uniform_real_distribution<double> shift_d(-0.3, 0.3);
  StageModel m = model;
  const double gain = gain_d(rng);
  for (auto& st : m.stages) {
    for (auto& c : st.components) {
      c.amplitude_uv *= gain;
      c.center_hz = std::max(0.5, c.center_hz + shift_d(rng));
    }
    st.noise_uv *= gain;
  }
  rec.samples.reserve(n_epochs * kEpochSamples);
  for (auto s : rec.hypnogram) {
    auto e = gen_epoch(s, m, rng, rec.fs_hz, kEpochSamples);
    rec.samples.insert(rec.samples.end(), e.begin(), e.end());
  }
  return rec;
}

void quantize_to_edf(std::vector<double>& samples) {
  const double scale = 2.0 * kEdfPhysMax / (2.0 * kEdfDigMax + 1.0);
  const double dmin = -kEdfDigMax - 1.0;
  for (double& p : samples) {
    double d = std::round((p + kEdfPhysMax) / scale + dmin);
    d = std::clamp(d, dmin, static_cast<double>(kEdfDigMax));
    p = -kEdfPhysMax + (d - dmin) * scale;
  }
}

edfio::EdfWriteSpec to_edf(const SubjectRecord& rec) {
  edfio::EdfWriteSpec spec;
  spec.patient = rec.subject_id + " X X X";
  spec.record_duration_s = kEpochSeconds;
  edfio::SignalData sig;
  sig.meta.label = std::string(kEdfSignalLabel);
  sig.meta.transducer = "synthetic";
  sig.meta.physical_dim = "uV";
  sig.meta.phys_min = -kEdfPhysMax;
  sig.meta.phys_max = kEdfPhysMax;
  sig.meta.dig_min = -kEdfDigMax - 1;
  sig.meta.dig_max = kEdfDigMax;
  sig.meta.prefiltering = "";
  sig.meta.samples_per_record = static_cast<int>(std::llround(rec.fs_hz * kEpochSeconds));
  sig.physical = rec.samples;
  spec.signals.push_back(std::move(sig));
  for (std::size_t k = 0; k < rec.hypnogram.size(); ++k) {
    spec.annotations.push_back({static_cast<double>(k) * kEpochSeconds, kEpochSeconds,
                                std::string(edfio::stage_annotation_text(rec.hypnogram[k]))});
  }
  spec.with_annotation_signal = true;
  return spec;
}

}  // namespace driftguard::synth
