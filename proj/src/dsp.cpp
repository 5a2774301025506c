#include "driftguard/dsp.hpp"

#include <algorithm>
#include <cmath>
#include <array>
#include <complex>
#include <numbers>
#include <numeric>

#include "driftguard/error.hpp"

namespace driftguard::dsp {
namespace {

using cd = std::complex<double>;

double section_gain(const Biquad& s, double omega) {
  const cd z1 = std::polar(1.0, -omega);
  const cd z2 = z1 * z1;
  return std::abs((s.b0 + s.b1 * z1 + s.b2 * z2) / (1.0 + s.a1 * z1 + s.a2 * z2));
}

}  // namespace

bool Biquad::is_stable() const { return std::abs(a2) < 1.0 && std::abs(a1) < 1.0 + a2; }

FilterCascade::FilterCascade(std::vector<Biquad> sections)
    : sections_(std::move(sections)), state_(2 * sections_.size(), 0.0) {}

FilterCascade FilterCascade::identity() { return FilterCascade({Biquad{}}); }

bool FilterCascade::is_stable() const {
  return std::all_of(sections_.begin(), sections_.end(), [](const Biquad& s) { return s.is_stable(); });
}

double FilterCascade::step(double x) {
  for (std::size_t i = 0; i < sections_.size(); ++i) {
    const Biquad& s = sections_[i];
    double& z1 = state_[2 * i];
    double& z2 = state_[2 * i + 1];
    const double y = s.b0 * x + z1;
    z1 = s.b1 * x - s.a1 * y + z2;
    z2 = s.b2 * x - s.a2 * y;
    x = y;
  }
  return x;
}

void FilterCascade::process(std::span<double> inout) {
  for (double& v : inout) v = step(v);
}

void FilterCascade::reset() { std::fill(state_.begin(), state_.end(), 0.0); }

void FilterCascade::chain(const FilterCascade& other) {
  sections_.insert(sections_.end(), other.sections_.begin(), other.sections_.end());
  state_.resize(2 * sections_.size(), 0.0);
}

FilterCascade design_bandpass(double lo_hz, double hi_hz, double fs_hz) {
  if (!(lo_hz > 0.0 && lo_hz < hi_hz && hi_hz < fs_hz / 2.0)) {
    throw Error(Errc::InvalidBand, "need 0 < lo < hi < fs/2, got lo=" + std::to_string(lo_hz) +
                                       " hi=" + std::to_string(hi_hz) + " fs=" + std::to_string(fs_hz));
  }
  const double k = 2.0 * fs_hz;
  const double w1 = k * std::tan(std::numbers::pi * lo_hz / fs_hz);
  const double w2 = k * std::tan(std::numbers::pi * hi_hz / fs_hz);
  const double w0sq = w1 * w2;
  const double bw = w2 - w1;

  // Order-2 Butterworth prototype pole in the upper half plane; its conjugate
  // yields the conjugate band-pass poles, so one prototype pole gives both
  // sections.
  const cd proto = std::polar(1.0, 3.0 * std::numbers::pi / 4.0);
  const cd pb = proto * bw;
  const cd disc = std::sqrt(pb * pb - 4.0 * w0sq);
  const std::array<cd, 2> analog = {(pb + disc) / 2.0, (pb - disc) / 2.0};

  const double omega0 = 2.0 * std::atan(std::sqrt(w0sq) / k);
  std::vector<Biquad> sections;
  for (const cd& s : analog) {
    const cd z = (k + s) / (k - s);
    Biquad b;
    b.b0 = 1.0;
    b.b1 = 0.0;
    b.b2 = -1.0;
    b.a1 = -2.0 * z.real();
    b.a2 = std::norm(z);
    const double g = section_gain(b, omega0);
    b.b0 /= g;
    b.b2 /= g;
    sections.push_back(b);
  }
  return FilterCascade(std::move(sections));
}

FilterCascade design_notch(double f0_hz, double fs_hz, double q) {
  if (!(f0_hz > 0.0 && f0_hz < fs_hz / 2.0)) {
    throw Error(Errc::InvalidFrequency, "notch frequency " + std::to_string(f0_hz) +
                                            " Hz is not below Nyquist of fs=" + std::to_string(fs_hz));
  }
  if (!(q > 0.0)) throw Error(Errc::InvalidFrequency, "quality factor must be positive");
  const double w0 = 2.0 * std::numbers::pi * f0_hz / fs_hz;
  const double alpha = std::sin(w0) / (2.0 * q);
  const double a0 = 1.0 + alpha;
  Biquad b;
  b.b0 = 1.0 / a0;
  b.b1 = -2.0 * std::cos(w0) / a0;
  b.b2 = 1.0 / a0;
  b.a1 = -2.0 * std::cos(w0) / a0;
  b.a2 = (1.0 - alpha) / a0;
  return FilterCascade({b});
}

SampleSeries apply(FilterCascade& filter, const SampleSeries& series) {
  SampleSeries out = series;
  filter.process(out.samples);
  return out;
}

Ratio rational_ratio(double fs_in, double fs_out) {
  if (!(fs_in > 0.0 && fs_out > 0.0)) throw Error(Errc::IrrationalRatio, "rates must be positive");
  const double r = fs_out / fs_in;
  for (long q = 1; q <= 1000; ++q) {
    const double p = std::round(r * static_cast<double>(q));
    if (p < 1.0) continue;
    if (std::abs(p / static_cast<double>(q) - r) <= 1e-9 * r) {
      const long pi = static_cast<long>(p);
      const long g = std::gcd(pi, q);
      return {pi / g, q / g};
    }
  }
  throw Error(Errc::IrrationalRatio, "fs_out/fs_in = " + std::to_string(r) +
                                         " has no rational form with denominator <= 1000");
}

SampleSeries resample(const SampleSeries& series, double fs_out) {
  const Ratio ratio = rational_ratio(series.fs_hz, fs_out);
  if (ratio.up == ratio.down) return {series.samples, fs_out};

  const long up = ratio.up;
  const long down = ratio.down;
  // Kernel on the up-sampled grid: cutoff at 90% of the lower Nyquist,
  // 16 zero crossings per side, Kaiser beta 8.
  const double fc = 0.9 * 0.5 / static_cast<double>(std::max(up, down));
  const long half = static_cast<long>(std::ceil(16.0 / (2.0 * fc)));
  const double beta = 8.0;
  const double i0_beta = std::cyl_bessel_i(0.0, beta);
  std::vector<double> kernel(static_cast<std::size_t>(2 * half + 1));
  for (long m = -half; m <= half; ++m) {
    const double x = 2.0 * fc * static_cast<double>(m);
    const double sinc = m == 0 ? 1.0 : std::sin(std::numbers::pi * x) / (std::numbers::pi * x);
    const double r = static_cast<double>(m) / static_cast<double>(half);
    const double win = std::cyl_bessel_i(0.0, beta * std::sqrt(std::max(0.0, 1.0 - r * r))) / i0_beta;
    kernel[static_cast<std::size_t>(m + half)] = static_cast<double>(up) * 2.0 * fc * sinc * win;
  }

  const auto n_in = static_cast<long>(series.samples.size());
  const auto n_out = static_cast<long>(
      std::llround(static_cast<double>(n_in) * static_cast<double>(up) / static_cast<double>(down)));
  SampleSeries out;
  out.fs_hz = fs_out;
  out.samples.resize(static_cast<std::size_t>(n_out), 0.0);
  for (long n = 0; n < n_out; ++n) {
    const long pos = n * down;  // current time on the up-sampled grid
    // input k contributes when 0 <= pos - k*up <= 2*half
    const long k_hi = std::min(n_in - 1, pos / up);
    const long k_lo = std::max(0L, (pos - 2 * half + up - 1) / up);
    double acc = 0.0;
    for (long k = k_lo; k <= k_hi; ++k) {
      const long m = pos - k * up;  // in [0, 2*half]
      acc += series.samples[static_cast<std::size_t>(k)] * kernel[static_cast<std::size_t>(m)];
    }
    out.samples[static_cast<std::size_t>(n)] = acc;
  }
  return out;
}

void StreamingStandardizer::update(std::span<const double> samples) {
  for (double x : samples) {
    ++count_;
    const double delta = x - mean_;
    mean_ += delta / static_cast<double>(count_);
    m2_ += delta * (x - mean_);
  }
}

void StreamingStandardizer::reset() { *this = StreamingStandardizer{}; }

Epoch standardize_stream(StreamingStandardizer& stats, std::span<const double> epoch_raw, StatsOrder order) {
  double mean = 0.0;
  double var = 0.0;
  if (order == StatsOrder::StrictPrior && stats.count() > 0) {
    mean = stats.mean();
    var = stats.variance();
    stats.update(epoch_raw);
  } else {
    stats.update(epoch_raw);
    mean = stats.mean();
    var = stats.variance();
  }
  const double inv = 1.0 / std::sqrt(var + StreamingStandardizer::kEps);
  Epoch e;
  e.samples.resize(epoch_raw.size());
  for (std::size_t i = 0; i < epoch_raw.size(); ++i) e.samples[i] = (epoch_raw[i] - mean) * inv;
  return e;
}

std::vector<std::vector<double>> epoch_series(std::span<const double> samples, std::size_t epoch_len) {
  std::vector<std::vector<double>> out;
  const std::size_t n = samples.size() / epoch_len;
  out.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    auto w = samples.subspan(k * epoch_len, epoch_len);
    out.emplace_back(w.begin(), w.end());
  }
  return out;
}

std::vector<Epoch> preprocess_record(const SampleSeries& raw, const PreprocessConfig& cfg,
                                     const std::string& subject_id) {
  FilterCascade chain;
  for (double f0 : cfg.notch_hz) {
    if (f0 < raw.fs_hz / 2.0) chain.chain(design_notch(f0, raw.fs_hz, cfg.notch_q));
  }
  chain.chain(design_bandpass(cfg.band_lo_hz, cfg.band_hi_hz, raw.fs_hz));
  SampleSeries filtered = apply(chain, raw);
  SampleSeries at_target = resample(filtered, cfg.fs_out_hz);

  const auto epoch_len = static_cast<std::size_t>(std::llround(kEpochSeconds * cfg.fs_out_hz));
  StreamingStandardizer stats;
  std::vector<Epoch> out;
  std::size_t index = 0;
  for (const auto& window : epoch_series(at_target.samples, epoch_len)) {
    Epoch e = standardize_stream(stats, window, cfg.stats_order);
    e.subject_id = subject_id;
    e.index = index++;
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace driftguard::dsp
