#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "driftguard/cli.hpp"
#include "driftguard/dsp.hpp"
#include "driftguard/metrics.hpp"
#include "driftguard/tta.hpp"
#include "json.hpp"

namespace driftguard::cli {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

// Failure with an explicit exit code.
class Failure : public std::runtime_error {
 public:
  Failure(int code, const std::string& what) : std::runtime_error(what), code_(code) {}
  int code() const noexcept { return code_; }

 private:
  int code_;
};

// ---------------------------------------------------------------- files

std::string read_text(const fs::path& path, int code_if_missing);
void write_text(const fs::path& path, std::string_view text);
Json read_json(const fs::path& path, int code_if_bad);
void write_json(const fs::path& path, const Json& j);
std::vector<std::string> split(std::string_view s, char sep);
// Shortest text that parses back to the same double.
std::string num(double v);

// ---------------------------------------------------------------- data

struct DataSource {
  std::string data_dir;
  std::size_t synth_subjects{0};
  std::size_t synth_epochs{100};
  std::string channel{"EEG Fpz-Cz"};
  std::uint64_t seed{0};
  // Mixed into the synthetic seed so train and adapt never draw the same
  // subjects from one seed.
  std::uint64_t salt{0};
  std::string synth_prefix{"synth"};
};

struct Recording {
  std::string subject;
  std::vector<dsp::Epoch> epochs;
  bool labeled{false};
};

// EDF directory or synthetic subjects, drifted (raw microvolts, before
// preprocessing) and preprocessed. Sorted by subject.
std::vector<Recording> load_recordings(const DataSource& src, const std::vector<synth::DriftSpec>& drifts);
std::vector<synth::DriftSpec> parse_drifts(const std::vector<std::string>& texts);
// Drifts in order on raw samples, one generator per drift derived from seed.
void apply_drifts(std::vector<double>& samples, double fs_hz, const std::vector<synth::DriftSpec>& drifts,
                  std::uint64_t seed);

// ---------------------------------------------------------------- predictions

struct PredictionRow {
  std::string subject;
  std::size_t epoch{0};
  StageLabel raw{StageLabel::W};
  StageLabel smoothed{StageLabel::W};
  double confidence{0.0};
  std::array<double, kNumStages> probs{};
  MaybeStage label;
};

std::string predictions_header();
std::string prediction_line(const PredictionRow& r);
std::vector<PredictionRow> read_predictions(const fs::path& path);

// epoch,stage with "-" for excluded epochs
std::string labels_csv(const std::vector<MaybeStage>& labels);
std::vector<MaybeStage> read_labels_csv(const fs::path& path);

// ---------------------------------------------------------------- adaptation config

Json adapt_config_json(const tta::AdaptConfig& c);
// Unknown keys throw InvalidConfig; missing keys keep `base`.
tta::AdaptConfig adapt_config_from_json(const Json& j, tta::AdaptConfig base = {});
fs::path sidecar_path(const fs::path& checkpoint);

// ---------------------------------------------------------------- evaluation

struct SubjectEval {
  std::string subject;
  metrics::MetricsReport report;
  std::array<std::array<std::int64_t, kNumStages>, kNumStages> true_transitions{};
  std::array<std::array<std::int64_t, kNumStages>, kNumStages> pred_transitions{};
  std::array<std::int64_t, kNumStages> true_counts{};
  std::array<std::int64_t, kNumStages> pred_counts{};
};

struct SplitEval {
  std::vector<SubjectEval> subjects;
  metrics::AggregateReport aggregate;
  metrics::MetricsReport pooled;  // every epoch of the split at once
};

// Rows without a label are skipped; a split with no labeled row throws
// Failure(kExitAlignment).
SplitEval evaluate_rows(const std::vector<PredictionRow>& rows, bool smoothed, std::size_t bins);

// ---------------------------------------------------------------- plots

std::string svg_reliability(const std::vector<metrics::ReliabilityBin>& bins);
std::string svg_confusion(const metrics::Matrix5& normalized);
std::string svg_timeline(const std::vector<double>& entropy, const std::vector<double>& ema,
                         const std::vector<bool>& updated, double h_min, double h_max);

// ---------------------------------------------------------------- commands

struct TrainOptions {
  DataSource data;
  std::string out;
  std::size_t epochs{40};
  std::size_t batch_size{64};
  double lr{1e-3};
  double gamma{2.0};
  std::size_t warmup{5};
  std::size_t patience{7};
  bool augment{true};
  bool class_balance{true};
  bool prior_init{true};
  double val_fraction{0.2};
  std::vector<double> select_lr;
  std::vector<double> select_bn_momentum;
  std::vector<std::string> val_drift;
};

struct AdaptOverrides {
  std::optional<std::size_t> micro_batch;
  std::optional<double> bn_momentum;
  std::optional<double> lr;
  std::optional<double> sgd_momentum;
  std::optional<double> h_min;
  std::optional<double> h_max;
  std::optional<double> ema_momentum;
  std::optional<double> snapshot_decay;
  std::optional<double> drift_delta;
  std::optional<std::size_t> streak_reset;
  std::optional<std::size_t> median_width;
  std::optional<bool> gate;
  std::optional<bool> reset;
  std::optional<bool> gate_stats;
  std::optional<std::string> gate_signal;
  std::optional<std::string> tent_norm;

  void apply(tta::AdaptConfig& c) const;
  // Sets every field from c.
  void fill_from(const tta::AdaptConfig& c);
};

struct AdaptOptions {
  std::string checkpoint;
  DataSource data;
  std::string out;
  std::string mode{"tent"};
  std::vector<std::string> drift;
  AdaptOverrides adapt;
};

struct EvalOptions {
  std::vector<std::string> predictions;  // [split=]path
  std::string labels_dir;
  std::string out;
  bool smoothed{false};
  std::size_t bins{metrics::kDefaultEceBins};
};

struct SynthOptions {
  std::string out;
  std::size_t subjects{2};
  std::size_t epochs{100};
  std::uint64_t seed{0};
  double stay{0.85};
  std::vector<std::string> drift;
};

struct ReportOptions {
  std::vector<std::string> runs;
  std::string out;
  bool smoothed{false};
};

void cmd_train(const TrainOptions& o, std::ostream& log);
// Fills the unset fields of o.adapt from the checkpoint sidecar, so the echo
// shows what was used.
void cmd_adapt(AdaptOptions& o, std::ostream& log);
void cmd_eval(const EvalOptions& o, std::ostream& log);
void cmd_synth(const SynthOptions& o, std::ostream& log);
void cmd_report(const ReportOptions& o, std::ostream& log);

}  // namespace driftguard::cli
