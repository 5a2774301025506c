#pragma once

// EDF / EDF+ reading, TAL annotation decoding, and hypnogram alignment.
//
// Only continuous recordings are supported (EDF or EDF+C). Samples are 16-bit
// two's-complement little-endian. Annotation onsets are taken as seconds
// relative to the recording start, which is also the origin of the epoch grid.

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "driftguard/series.hpp"
#include "driftguard/stage.hpp"

namespace driftguard::edfio {

inline constexpr std::string_view kAnnotationLabel = "EDF Annotations";

struct SignalMeta {
  std::string label;         // 16 chars
  std::string transducer;    // 80
  std::string physical_dim;  // 8
  double phys_min{0.0};
  double phys_max{0.0};
  int dig_min{0};
  int dig_max{0};
  std::string prefiltering;  // 80
  int samples_per_record{0};

  bool is_annotation() const { return label == kAnnotationLabel; }
};

struct RecordingMeta {
  std::string version;
  std::string patient;
  std::string recording;
  std::string start_date;  // dd.mm.yy, as stored
  std::string start_time;  // hh.mm.ss
  std::string reserved;    // "EDF+C", "EDF+D" or blank
  long n_records{0};
  double record_duration_s{0.0};
  std::vector<SignalMeta> signals;

  std::size_t header_bytes() const { return 256 + 256 * signals.size(); }
  // Bytes of one data record across all signals.
  std::size_t record_bytes() const;
  // Byte offset of signal `index` inside one data record.
  std::size_t signal_offset(std::size_t index) const;
};

struct Annotation {
  double onset_s{0.0};
  double duration_s{0.0};  // 0 when the TAL carries no duration
  std::string text;
};

// `bytes` may be just the header or the whole file. When the record count
// field holds -1 the count is resolved from bytes.size().
RecordingMeta parse_header(std::span<const std::uint8_t> bytes);

SampleSeries read_signal(std::span<const std::uint8_t> file, const RecordingMeta& meta,
                         std::string_view signal_label);

// Decodes a run of TALs. Timekeeping TALs (no text) produce nothing; a TAL
// carrying several texts produces one Annotation per text.
std::vector<Annotation> parse_annotations(std::span<const std::uint8_t> bytes);

// Concatenates every "EDF Annotations" signal across all records and decodes it.
std::vector<Annotation> read_annotations(std::span<const std::uint8_t> file,
                                         const RecordingMeta& meta);

// R&K labels onto AASM. "Sleep stage ?" and "Movement time" map to Excluded
// (nullopt); anything else throws UnknownStageText.
MaybeStage map_stage(std::string_view text);

// One entry per epoch. An epoch takes the label of the annotation that fully
// covers [k*epoch_s, (k+1)*epoch_s); otherwise it is Excluded.
std::vector<MaybeStage> align_hypnogram(std::span<const Annotation> annotations,
                                        std::size_t n_epochs, double epoch_s = kEpochSeconds);

// Canonical label written by the fixture writer for a stage.
std::string_view stage_annotation_text(StageLabel s);

// ---------------------------------------------------------------------------
// Minimal writer, used to generate fixtures and synthetic recordings.

struct SignalData {
  SignalMeta meta;              // samples_per_record must match the data length
  std::vector<double> physical; // n_records * samples_per_record values
};

struct EdfWriteSpec {
  std::string patient{"X X X X"};
  std::string recording{"Startdate X X X X"};
  std::string start_date{"01.01.00"};
  std::string start_time{"00.00.00"};
  double record_duration_s{30.0};
  std::vector<SignalData> signals;
  // When non-empty (or when `with_annotation_signal` is set) an EDF+C file is
  // produced with one trailing annotation signal.
  std::vector<Annotation> annotations;
  bool with_annotation_signal{false};
};

// Physical values are quantized with round-to-nearest onto the digital range.
std::vector<std::uint8_t> write_edf(const EdfWriteSpec& spec);

std::vector<std::uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, std::span<const std::uint8_t> bytes);

}  // namespace driftguard::edfio
