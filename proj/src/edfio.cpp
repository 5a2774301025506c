#include "driftguard/edfio.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>

#include "driftguard/error.hpp"

namespace driftguard::edfio {
namespace {

constexpr std::uint8_t kTalDuration = 0x15;
constexpr std::uint8_t kTalSep = 0x14;

std::string trim(std::string_view s) {
  auto b = s.find_first_not_of(' ');
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(' ');
  return std::string(s.substr(b, e - b + 1));
}

// Sequential reader over the fixed-width ASCII header.
class FieldReader {
 public:
  explicit FieldReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::string text(std::size_t width) {
    std::string out(reinterpret_cast<const char*>(bytes_.data() + pos_), width);
    pos_ += width;
    return trim(out);
  }

  long integer(std::size_t width, std::string_view what) {
    auto s = text(width);
    long v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || ec != std::errc{} || p != s.data() + s.size()) {
      throw Error(Errc::NonNumericField, std::string(what) + " = '" + s + "'");
    }
    return v;
  }

  double real(std::size_t width, std::string_view what) {
    auto s = text(width);
    const char* first = s.data();
    if (!s.empty() && s[0] == '+') ++first;
    double v = 0.0;
    auto [p, ec] = std::from_chars(first, s.data() + s.size(), v);
    if (s.empty() || ec != std::errc{} || p != s.data() + s.size()) {
      throw Error(Errc::NonNumericField, std::string(what) + " = '" + s + "'");
    }
    return v;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_{0};
};

double parse_tal_number(std::string_view s) {
  if (s.empty() || (s[0] != '+' && s[0] != '-')) {
    throw Error(Errc::MalformedTAL, "onset must start with a sign: '" + std::string(s) + "'");
  }
  const char* first = s.data() + (s[0] == '+' ? 1 : 0);
  double v = 0.0;
  auto [p, ec] = std::from_chars(first, s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size()) {
    throw Error(Errc::MalformedTAL, "bad number '" + std::string(s) + "'");
  }
  return v;
}

std::string fit_number(double v, std::size_t width) {
  char buf[64];
  for (int prec = 12; prec >= 1; --prec) {
    int n = std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (n > 0 && static_cast<std::size_t>(n) <= width) return std::string(buf, n);
  }
  throw Error(Errc::InvalidHeaderField, "value does not fit header field");
}

void put_field(std::vector<std::uint8_t>& out, std::string_view s, std::size_t width) {
  if (s.size() > width) s = s.substr(0, width);
  out.insert(out.end(), s.begin(), s.end());
  out.insert(out.end(), width - s.size(), static_cast<std::uint8_t>(' '));
}

std::string tal_number(double v, bool with_sign) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  std::string s(buf, p);
  if (with_sign && v >= 0.0) s.insert(s.begin(), '+');
  return s;
}

}  // namespace

std::size_t RecordingMeta::record_bytes() const {
  std::size_t n = 0;
  for (const auto& s : signals) n += 2 * static_cast<std::size_t>(s.samples_per_record);
  return n;
}

std::size_t RecordingMeta::signal_offset(std::size_t index) const {
  std::size_t off = 0;
  for (std::size_t i = 0; i < index; ++i) off += 2 * static_cast<std::size_t>(signals[i].samples_per_record);
  return off;
}

RecordingMeta parse_header(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 256) throw Error(Errc::TruncatedHeader, "fewer than 256 bytes");
  for (std::size_t i = 0; i < 256; ++i) {
    if (bytes[i] < 0x20 || bytes[i] > 0x7e) {
      throw Error(Errc::NonNumericField, "non-ASCII byte in fixed header");
    }
  }

  RecordingMeta meta;
  FieldReader fr(bytes);
  meta.version = fr.text(8);
  meta.patient = fr.text(80);
  meta.recording = fr.text(80);
  meta.start_date = fr.text(8);
  meta.start_time = fr.text(8);
  const long header_len = fr.integer(8, "header bytes");
  meta.reserved = fr.text(44);
  meta.n_records = fr.integer(8, "number of records");
  meta.record_duration_s = fr.real(8, "record duration");
  const long ns = fr.integer(4, "number of signals");

  if (ns < 1) throw Error(Errc::InvalidHeaderField, "number of signals < 1");
  const std::size_t expected = 256 + 256 * static_cast<std::size_t>(ns);
  if (header_len != static_cast<long>(expected)) {
    throw Error(Errc::SignalCountMismatch, "header length " + std::to_string(header_len) +
                                               " != 256 + 256*" + std::to_string(ns));
  }
  if (bytes.size() < expected) {
    throw Error(Errc::TruncatedHeader, "header declares " + std::to_string(ns) +
                                           " signals but only " + std::to_string(bytes.size()) +
                                           " bytes present");
  }
  if (meta.reserved.starts_with("EDF+D")) {
    throw Error(Errc::DiscontinuousRecording, "EDF+D files are not supported");
  }
  if (!(meta.record_duration_s > 0.0)) {
    throw Error(Errc::InvalidHeaderField, "record duration must be positive");
  }

  const auto n = static_cast<std::size_t>(ns);
  meta.signals.resize(n);
  FieldReader sr(bytes.subspan(256, 256 * n));
  for (auto& s : meta.signals) s.label = sr.text(16);
  for (auto& s : meta.signals) s.transducer = sr.text(80);
  for (auto& s : meta.signals) s.physical_dim = sr.text(8);
  for (auto& s : meta.signals) s.phys_min = sr.real(8, "physical minimum");
  for (auto& s : meta.signals) s.phys_max = sr.real(8, "physical maximum");
  for (auto& s : meta.signals) s.dig_min = static_cast<int>(sr.integer(8, "digital minimum"));
  for (auto& s : meta.signals) s.dig_max = static_cast<int>(sr.integer(8, "digital maximum"));
  for (auto& s : meta.signals) s.prefiltering = sr.text(80);
  for (auto& s : meta.signals) s.samples_per_record = static_cast<int>(sr.integer(8, "samples per record"));

  for (const auto& s : meta.signals) {
    if (s.dig_min >= s.dig_max) throw Error(Errc::InvalidHeaderField, s.label + ": dig_min >= dig_max");
    if (s.phys_min == s.phys_max) throw Error(Errc::InvalidHeaderField, s.label + ": phys_min == phys_max");
    if (s.samples_per_record < 1) throw Error(Errc::InvalidHeaderField, s.label + ": samples_per_record < 1");
  }

  if (meta.n_records == -1) {
    const std::size_t rb = meta.record_bytes();
    meta.n_records = bytes.size() > expected ? static_cast<long>((bytes.size() - expected) / rb) : 0;
  } else if (meta.n_records < 1) {
    throw Error(Errc::InvalidHeaderField, "number of records < 1");
  }
  return meta;
}

SampleSeries read_signal(std::span<const std::uint8_t> file, const RecordingMeta& meta,
                         std::string_view signal_label) {
  std::size_t index = meta.signals.size();
  std::size_t matches = 0;
  for (std::size_t i = 0; i < meta.signals.size(); ++i) {
    if (meta.signals[i].label == signal_label) {
      index = i;
      ++matches;
    }
  }
  if (matches != 1) {
    throw Error(Errc::UnknownSignal, "signal '" + std::string(signal_label) + "' matched " +
                                         std::to_string(matches) + " entries");
  }
  const auto& sig = meta.signals[index];
  const std::size_t rb = meta.record_bytes();
  const auto n_rec = static_cast<std::size_t>(meta.n_records);
  if (file.size() < meta.header_bytes() + n_rec * rb) {
    throw Error(Errc::TruncatedRecord, "file holds fewer than " + std::to_string(n_rec) + " records");
  }

  const double scale = (sig.phys_max - sig.phys_min) / static_cast<double>(sig.dig_max - sig.dig_min);
  const auto spr = static_cast<std::size_t>(sig.samples_per_record);
  SampleSeries out;
  out.fs_hz = static_cast<double>(sig.samples_per_record) / meta.record_duration_s;
  out.samples.reserve(n_rec * spr);
  for (std::size_t r = 0; r < n_rec; ++r) {
    const std::uint8_t* p = file.data() + meta.header_bytes() + r * rb + meta.signal_offset(index);
    for (std::size_t k = 0; k < spr; ++k) {
      const auto d = static_cast<std::int16_t>(static_cast<std::uint16_t>(p[2 * k]) |
                                               static_cast<std::uint16_t>(p[2 * k + 1]) << 8);
      out.samples.push_back(sig.phys_min + (static_cast<double>(d) - sig.dig_min) * scale);
    }
  }
  return out;
}

std::vector<Annotation> parse_annotations(std::span<const std::uint8_t> bytes) {
  std::vector<Annotation> out;
  std::size_t pos = 0;
  const std::size_t n = bytes.size();
  while (pos < n) {
    if (bytes[pos] == 0x00) {
      ++pos;
      continue;
    }
    // onset [0x15 duration] 0x14
    std::size_t q = pos;
    while (q < n && bytes[q] != kTalDuration && bytes[q] != kTalSep && bytes[q] != 0x00) ++q;
    if (q >= n || bytes[q] == 0x00) throw Error(Errc::MalformedTAL, "onset not followed by 0x14");
    const std::string onset_s(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                              bytes.begin() + static_cast<std::ptrdiff_t>(q));
    const double onset = parse_tal_number(onset_s);
    double duration = 0.0;
    if (bytes[q] == kTalDuration) {
      std::size_t d = ++q;
      while (q < n && bytes[q] != kTalSep && bytes[q] != 0x00) ++q;
      if (q >= n || bytes[q] != kTalSep) throw Error(Errc::MalformedTAL, "duration not followed by 0x14");
      const std::string dur_s(bytes.begin() + static_cast<std::ptrdiff_t>(d),
                              bytes.begin() + static_cast<std::ptrdiff_t>(q));
      const char* first = dur_s.data() + (!dur_s.empty() && dur_s[0] == '+' ? 1 : 0);
      auto [p, ec] = std::from_chars(first, dur_s.data() + dur_s.size(), duration);
      if (dur_s.empty() || ec != std::errc{} || p != dur_s.data() + dur_s.size() || duration < 0.0) {
        throw Error(Errc::MalformedTAL, "bad duration '" + dur_s + "'");
      }
    }
    ++q;  // past the 0x14 closing the time stamp
    // texts, each closed by 0x14, TAL closed by 0x00
    while (true) {
      if (q >= n) throw Error(Errc::MalformedTAL, "TAL not terminated by 0x00");
      if (bytes[q] == 0x00) {
        ++q;
        break;
      }
      std::size_t t = q;
      while (q < n && bytes[q] != kTalSep && bytes[q] != 0x00) ++q;
      if (q >= n || bytes[q] != kTalSep) throw Error(Errc::MalformedTAL, "annotation text not closed by 0x14");
      if (q > t) {
        out.push_back({onset, duration,
                       std::string(bytes.begin() + static_cast<std::ptrdiff_t>(t),
                                   bytes.begin() + static_cast<std::ptrdiff_t>(q))});
      }
      ++q;
    }
    pos = q;
  }
  return out;
}

std::vector<Annotation> read_annotations(std::span<const std::uint8_t> file, const RecordingMeta& meta) {
  const std::size_t rb = meta.record_bytes();
  const auto n_rec = static_cast<std::size_t>(meta.n_records);
  if (file.size() < meta.header_bytes() + n_rec * rb) {
    throw Error(Errc::TruncatedRecord, "file holds fewer than " + std::to_string(n_rec) + " records");
  }
  std::vector<std::uint8_t> tal;
  for (std::size_t r = 0; r < n_rec; ++r) {
    for (std::size_t i = 0; i < meta.signals.size(); ++i) {
      if (!meta.signals[i].is_annotation()) continue;
      const std::uint8_t* p = file.data() + meta.header_bytes() + r * rb + meta.signal_offset(i);
      tal.insert(tal.end(), p, p + 2 * meta.signals[i].samples_per_record);
    }
  }
  auto anns = parse_annotations(tal);
  std::stable_sort(anns.begin(), anns.end(),
                   [](const Annotation& a, const Annotation& b) { return a.onset_s < b.onset_s; });
  return anns;
}

MaybeStage map_stage(std::string_view text) {
  if (text == "Sleep stage W") return StageLabel::W;
  if (text == "Sleep stage 1") return StageLabel::N1;
  if (text == "Sleep stage 2") return StageLabel::N2;
  if (text == "Sleep stage 3") return StageLabel::N3;
  if (text == "Sleep stage 4") return StageLabel::N3;
  if (text == "Sleep stage R") return StageLabel::REM;
  if (text == "Sleep stage ?" || text == "Movement time") return std::nullopt;
  throw Error(Errc::UnknownStageText, "'" + std::string(text) + "'");
}

std::string_view stage_annotation_text(StageLabel s) {
  switch (s) {
    case StageLabel::W: return "Sleep stage W";
    case StageLabel::N1: return "Sleep stage 1";
    case StageLabel::N2: return "Sleep stage 2";
    case StageLabel::N3: return "Sleep stage 3";
    case StageLabel::REM: return "Sleep stage R";
  }
  return "Sleep stage ?";
}

std::vector<MaybeStage> align_hypnogram(std::span<const Annotation> annotations, std::size_t n_epochs,
                                        double epoch_s) {
  constexpr double tol = 1e-6;
  std::vector<const Annotation*> sorted;
  sorted.reserve(annotations.size());
  for (const auto& a : annotations) sorted.push_back(&a);
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const Annotation* a, const Annotation* b) { return a->onset_s < b->onset_s; });
  for (std::size_t i = 1; i < sorted.size(); ++i) {
    if (sorted[i - 1]->onset_s + sorted[i - 1]->duration_s > sorted[i]->onset_s + tol) {
      throw Error(Errc::OverlappingAnnotations,
                  "annotation at " + std::to_string(sorted[i - 1]->onset_s) + " s overlaps the next");
    }
  }

  std::vector<MaybeStage> out(n_epochs, std::nullopt);
  for (const Annotation* a : sorted) {
    const MaybeStage stage = map_stage(a->text);
    if (!stage || a->duration_s <= 0.0) continue;
    const double start = a->onset_s;
    const double end = a->onset_s + a->duration_s;
    auto k = static_cast<long>(std::ceil((start - tol) / epoch_s));
    k = std::max(k, 0L);
    for (; static_cast<std::size_t>(k) < n_epochs; ++k) {
      const double e0 = static_cast<double>(k) * epoch_s;
      const double e1 = e0 + epoch_s;
      if (e1 > end + tol) break;
      if (e0 >= start - tol) out[static_cast<std::size_t>(k)] = stage;
    }
  }
  return out;
}

std::vector<std::uint8_t> write_edf(const EdfWriteSpec& spec) {
  const bool edf_plus = spec.with_annotation_signal || !spec.annotations.empty();

  std::size_t n_records = 0;
  for (const auto& s : spec.signals) {
    if (s.meta.samples_per_record < 1) throw Error(Errc::InvalidHeaderField, "samples_per_record < 1");
    const auto spr = static_cast<std::size_t>(s.meta.samples_per_record);
    if (s.physical.size() % spr != 0) {
      throw Error(Errc::ShapeMismatch, s.meta.label + ": sample count is not a multiple of samples_per_record");
    }
    const std::size_t nr = s.physical.size() / spr;
    if (n_records != 0 && nr != n_records) throw Error(Errc::ShapeMismatch, "signals disagree on record count");
    n_records = nr;
  }
  if (n_records == 0) {
    double end = 0.0;
    for (const auto& a : spec.annotations) end = std::max(end, a.onset_s + a.duration_s);
    n_records = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(end / spec.record_duration_s)));
  }

  // Per-record TAL blocks: a timekeeping TAL then every annotation starting in the record.
  std::vector<std::string> tal_blocks;
  std::size_t ann_spr = 0;
  if (edf_plus) {
    tal_blocks.resize(n_records);
    for (std::size_t r = 0; r < n_records; ++r) {
      tal_blocks[r] = tal_number(static_cast<double>(r) * spec.record_duration_s, true) + "\x14\x14";
      tal_blocks[r].push_back('\0');
    }
    for (const auto& a : spec.annotations) {
      auto r = static_cast<std::size_t>(std::max(0.0, std::floor(a.onset_s / spec.record_duration_s)));
      r = std::min(r, n_records - 1);
      std::string tal = tal_number(a.onset_s, true);
      if (a.duration_s > 0.0) {
        tal.push_back('\x15');
        tal += tal_number(a.duration_s, false);
      }
      tal.push_back('\x14');
      tal += a.text;
      tal.push_back('\x14');
      tal.push_back('\0');
      tal_blocks[r] += tal;
    }
    std::size_t max_bytes = 0;
    for (const auto& b : tal_blocks) max_bytes = std::max(max_bytes, b.size());
    ann_spr = (max_bytes + 1) / 2;
  }

  std::vector<SignalMeta> metas;
  for (const auto& s : spec.signals) metas.push_back(s.meta);
  if (edf_plus) {
    SignalMeta a;
    a.label = std::string(kAnnotationLabel);
    a.phys_min = -1.0;
    a.phys_max = 1.0;
    a.dig_min = -32768;
    a.dig_max = 32767;
    a.samples_per_record = static_cast<int>(ann_spr);
    metas.push_back(a);
  }
  const std::size_t ns = metas.size();

  std::vector<std::uint8_t> out;
  put_field(out, "0", 8);
  put_field(out, spec.patient, 80);
  put_field(out, spec.recording, 80);
  put_field(out, spec.start_date, 8);
  put_field(out, spec.start_time, 8);
  put_field(out, std::to_string(256 + 256 * ns), 8);
  put_field(out, edf_plus ? "EDF+C" : "", 44);
  put_field(out, std::to_string(n_records), 8);
  put_field(out, fit_number(spec.record_duration_s, 8), 8);
  put_field(out, std::to_string(ns), 4);
  for (const auto& m : metas) put_field(out, m.label, 16);
  for (const auto& m : metas) put_field(out, m.transducer, 80);
  for (const auto& m : metas) put_field(out, m.physical_dim, 8);
  for (const auto& m : metas) put_field(out, fit_number(m.phys_min, 8), 8);
  for (const auto& m : metas) put_field(out, fit_number(m.phys_max, 8), 8);
  for (const auto& m : metas) put_field(out, std::to_string(m.dig_min), 8);
  for (const auto& m : metas) put_field(out, std::to_string(m.dig_max), 8);
  for (const auto& m : metas) put_field(out, m.prefiltering, 80);
  for (const auto& m : metas) put_field(out, std::to_string(m.samples_per_record), 8);
  for (std::size_t i = 0; i < ns; ++i) put_field(out, "", 32);

  // Quantization uses the header's printed range so that reading back and
  // re-writing reproduces the digital values exactly.
  std::vector<double> phys_min(ns), phys_max(ns);
  for (std::size_t i = 0; i < ns; ++i) {
    auto pm = fit_number(metas[i].phys_min, 8);
    auto px = fit_number(metas[i].phys_max, 8);
    std::from_chars(pm.data(), pm.data() + pm.size(), phys_min[i]);
    std::from_chars(px.data(), px.data() + px.size(), phys_max[i]);
  }

  for (std::size_t r = 0; r < n_records; ++r) {
    for (std::size_t i = 0; i < spec.signals.size(); ++i) {
      const auto& m = metas[i];
      const auto spr = static_cast<std::size_t>(m.samples_per_record);
      const double scale = (phys_max[i] - phys_min[i]) / static_cast<double>(m.dig_max - m.dig_min);
      for (std::size_t k = 0; k < spr; ++k) {
        const double p = spec.signals[i].physical[r * spr + k];
        double d = std::round((p - phys_min[i]) / scale + m.dig_min);
        d = std::clamp(d, static_cast<double>(m.dig_min), static_cast<double>(m.dig_max));
        const auto v = static_cast<std::uint16_t>(static_cast<std::int16_t>(d));
        out.push_back(static_cast<std::uint8_t>(v & 0xff));
        out.push_back(static_cast<std::uint8_t>(v >> 8));
      }
    }
    if (edf_plus) {
      std::string block = tal_blocks[r];
      block.resize(2 * ann_spr, '\0');
      out.insert(out.end(), block.begin(), block.end());
    }
  }
  return out;
}

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace driftguard::edfio
