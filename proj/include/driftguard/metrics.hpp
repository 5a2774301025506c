#pragma once

// Sleep-staging evaluation: confusion matrices, accuracy, per-stage and
// aggregate F1, balanced accuracy, Cohen's kappa, multiclass MCC, ECE with
// reliability bins, stage transition matrices and subject aggregation.

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "driftguard/stage.hpp"
#include "json.hpp"

namespace driftguard::metrics {

using Matrix5 = std::array<std::array<double, kNumStages>, kNumStages>;

// rows = true stage, cols = predicted stage
struct ConfusionMatrix {
  std::array<std::array<std::int64_t, kNumStages>, kNumStages> counts{};

  std::int64_t total() const;
  std::int64_t row_sum(std::size_t i) const;
  std::int64_t col_sum(std::size_t j) const;
  std::int64_t trace() const;
  // Each non-empty row divided by its sum; empty rows stay zero.
  Matrix5 row_normalized() const;
};

ConfusionMatrix confusion(std::span<const StageLabel> y_true, std::span<const StageLabel> y_pred);

double accuracy(const ConfusionMatrix& cm);

struct KappaResult {
  double kappa{0.0};
  bool degenerate{false};  // p_e == 1, reported as 0
};
KappaResult kappa(const ConfusionMatrix& cm);

struct StageScores {
  double precision{0.0};
  double recall{0.0};
  double f1{0.0};
  std::int64_t support{0};    // true count
  std::int64_t predicted{0};  // predicted count
};

// Macro F1 averages the classes seen in either y_true or y_pred; balanced
// accuracy averages recall over classes with true support. Absent classes
// are excluded and flagged.
struct F1Suite {
  std::array<StageScores, kNumStages> per_stage{};
  double macro_f1{0.0};
  double weighted_f1{0.0};
  double balanced_accuracy{0.0};
  bool classes_excluded{false};
};
F1Suite f1_suite(const ConfusionMatrix& cm);

struct MccResult {
  double mcc{0.0};
  bool degenerate{false};  // zero margin variance, reported as 0
};
MccResult mcc(const ConfusionMatrix& cm);

inline constexpr std::size_t kDefaultEceBins = 15;

// Bin k (1-based) covers ((k-1)/M, k/M].
struct ReliabilityBin {
  double lo{0.0};
  double hi{0.0};
  std::int64_t count{0};
  double mean_confidence{0.0};
  double accuracy{0.0};
};

struct EceResult {
  double ece{0.0};
  std::vector<ReliabilityBin> bins;
};

std::size_t ece_bin(double confidence, std::size_t n_bins);
EceResult ece(std::span<const double> confidences, const std::vector<bool>& correct,
              std::size_t n_bins = kDefaultEceBins);

// T[i][j] = P(next = j | current = i); rows never visited stay zero.
Matrix5 transition_matrix(std::span<const StageLabel> labels);

struct MetricsReport {
  double accuracy{0.0};
  double macro_f1{0.0};
  double weighted_f1{0.0};
  double balanced_accuracy{0.0};
  double kappa{0.0};
  double mcc{0.0};
  double ece{0.0};
  std::array<StageScores, kNumStages> per_stage{};
  ConfusionMatrix confusion;
  std::vector<ReliabilityBin> reliability;
  std::int64_t n_epochs{0};
  bool kappa_degenerate{false};
  bool mcc_degenerate{false};
  bool classes_excluded{false};
};

// Full report for one label sequence. confidences are the max softmax
// probabilities of the predictions.
MetricsReport evaluate(std::span<const StageLabel> y_true, std::span<const StageLabel> y_pred,
                       std::span<const double> confidences, std::size_t n_bins = kDefaultEceBins);

struct AggregateReport {
  MetricsReport mean;  // scalar metrics averaged over subjects, confusion summed
  std::vector<std::string> subjects;
  std::vector<MetricsReport> per_subject;
};

AggregateReport aggregate_subjects(std::span<const std::string> subjects,
                                   std::span<const MetricsReport> reports);

// The seven headline keys, in this order.
inline constexpr std::array<const char*, 7> kMetricKeys = {
    "accuracy", "macro_f1", "kappa", "weighted_f1", "balanced_accuracy", "mcc", "ece"};

nlohmann::ordered_json metrics_object(const MetricsReport& r);
// metrics_object plus per-stage scores, confusion counts, n_epochs and flags.
nlohmann::ordered_json report_json(const MetricsReport& r);

std::string confusion_csv(const ConfusionMatrix& cm);
std::string matrix_csv(const Matrix5& m);
std::string reliability_csv(const std::vector<ReliabilityBin>& bins);

}  // namespace driftguard::metrics
