#pragma once

// Streaming test-time adaptation over BatchNorm layers: running-statistic
// refresh, Tent entropy minimization on gamma/beta, an entropy gate, an EMA
// snapshot with drift reset, and causal median smoothing of the labels.

#include <cmath>
#include <cstdint>
#include <deque>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "driftguard/nn.hpp"
#include "json.hpp"

namespace driftguard::tta {

enum class Mode { Frozen, BnOnly, Tent };

std::string mode_name(Mode m);
Mode parse_mode(const std::string& s);  // "frozen", "bn-only", "tent"

// Which entropy the gate tests against [h_min, h_max].
enum class GateSignal { Ema, Raw };

// Normalization used for the entropy loss in a Tent step. Batch uses the
// micro-batch statistics of the Train-mode pass; Running evaluates the loss
// with the just-refreshed running statistics, so each sample's gradient does
// not depend on what else landed in its micro-batch.
enum class TentNorm { Batch, Running };

inline const double kLn5 = std::log(5.0);

struct AdaptConfig {
  Mode mode{Mode::Tent};
  std::size_t micro_batch{8};
  double bn_momentum{0.1};
  double tta_lr{1e-3};
  double sgd_momentum{0.9};
  double h_min{0.05 * kLn5};
  double h_max{0.9 * kLn5};
  double ema_entropy_momentum{0.9};  // weight on the previous EMA
  double snapshot_decay{0.999};
  double drift_delta{0.1};
  std::size_t gate_streak_reset{50};
  std::size_t median_width{5};
  bool gate_enabled{true};
  bool reset_enabled{true};
  // When false, BN statistics keep refreshing through a closed gate.
  bool gate_blocks_stats{true};
  GateSignal gate_signal{GateSignal::Ema};
  TentNorm tent_norm{TentNorm::Batch};

  // Throws InvalidConfig.
  void validate() const;
};

// Copy of every BN layer's gamma, beta, running mean and running variance,
// in Model::batch_norms() order.
struct BnSnapshot {
  std::vector<std::vector<double>> gamma, beta, mean, var;

  std::size_t bytes() const;
};

BnSnapshot capture_bn(const nn::Model& model);
void restore_bn(nn::Model& model, const BnSnapshot& snap);
// ||theta - snap|| / (||snap|| + 1e-12) over the concatenated gamma/beta.
double bn_distance(const nn::Model& model, const BnSnapshot& snap);

enum class GateDecision { Open, Closed };

enum class ResetReason { None, Drift, GateStreak, NonFinite };
std::string reset_reason_name(ResetReason r);

struct AdaptState {
  bool has_entropy{false};
  double ema_entropy{0.0};
  BnSnapshot snapshot;
  std::size_t updates_applied{0};
  std::size_t gated_streak{0};
  std::size_t resets{0};
  std::size_t batches{0};
  bool nonfinite_pending{false};
  // SGD momentum buffers for each BN gamma and beta (batch_norms() order,
  // gamma then beta per layer).
  std::vector<std::vector<double>> velocity;

  std::size_t bytes() const;
};

AdaptState init_state(const nn::Model& model);

// Train-mode forward that folds the batch statistics into the running
// statistics with the model's BN momentum. No gradients. Returns Eval-mode
// predictions made with the refreshed statistics. Throws BatchTooSmall.
std::vector<nn::Prediction> bn_refresh(nn::Model& model, const nn::Tensor& batch);

struct TentResult {
  double loss{0.0};  // mean prediction entropy of the loss pass
  bool finite{true};
  std::vector<nn::Prediction> predictions;  // from the loss pass
};

// One entropy-minimization step on BN gamma/beta only: Train-mode forward
// (refreshing statistics), mean entropy loss (on that pass or, with
// TentNorm::Running, on an Eval pass after the refresh), backward, and SGD
// with momentum. Every other parameter is left untouched. A non-finite loss or
// gradient skips the update and sets state.nonfinite_pending. Throws
// BatchTooSmall.
TentResult tent_step(nn::Model& model, const nn::Tensor& batch, const AdaptConfig& cfg, AdaptState& state);

// Mean entropy of a batch's predictions, clamped to [0, ln 5].
double batch_entropy(std::span<const nn::Prediction> preds);

// Folds batch_entropy into the EMA (the first batch sets it) and decides.
// Closed increments gated_streak, Open clears it.
GateDecision gate(AdaptState& state, double batch_entropy, const AdaptConfig& cfg);

struct ResetCheck {
  bool fired{false};
  ResetReason reason{ResetReason::None};
  double distance{0.0};
};

// Checks the drift criterion against the current snapshot, then folds the
// live BN state into the snapshot when `update_applied`. A reset copies the
// snapshot into the model, clears momentum buffers and the gate streak, and
// increments resets.
ResetCheck snapshot_update_and_maybe_reset(nn::Model& model, AdaptState& state, const AdaptConfig& cfg,
                                           bool update_applied);

// Median of label indices over [t - width + 1, t]; short prefixes use what is
// available and even counts take the lower middle value.
std::vector<int> median_smooth(std::span<const int> labels, std::size_t width = 5);

class MedianSmoother {
 public:
  explicit MedianSmoother(std::size_t width = 5) : width_(width) {}
  int push(int label);
  std::size_t bytes() const { return width_ * sizeof(int); }

 private:
  std::size_t width_;
  std::deque<int> window_;
};

struct TraceRecord {
  std::size_t batch_index{0};
  std::size_t first_epoch{0};
  std::size_t size{0};
  double entropy{0.0};
  double ema_entropy{0.0};
  std::optional<GateDecision> gate;  // empty when the batch was too small to adapt on
  bool updated{false};
  bool stats_refreshed{false};
  bool reset{false};
  ResetReason reset_reason{ResetReason::None};
  std::optional<double> loss;
  double distance{0.0};
};

nlohmann::ordered_json trace_json(const TraceRecord& r);

struct EpochOutput {
  std::size_t index{0};
  nn::Prediction prediction;
  StageLabel raw{StageLabel::W};
  StageLabel smoothed{StageLabel::W};
  std::size_t batch_index{0};
};

// Incremental driver. Epochs are buffered into non-overlapping micro-batches;
// each full batch is first scored in Eval mode with the pre-update state, and
// those scores are what gets emitted. The same batch then drives the gate and
// (if open) the update. A trailing batch of one epoch is scored only.
class StreamAdapter {
 public:
  StreamAdapter(nn::Model& model, const AdaptConfig& cfg);

  // Returns the outputs completed by this epoch (empty until a batch fills).
  std::vector<EpochOutput> push(std::vector<double> epoch);
  // Processes any partial batch left in the buffer.
  std::vector<EpochOutput> finish();

  const AdaptState& state() const { return state_; }
  const std::vector<TraceRecord>& trace() const { return trace_; }
  // Persistent adaptation state: snapshot, momentum buffers, pending epochs,
  // smoother window.
  std::size_t state_bytes() const;

 private:
  std::vector<EpochOutput> process_batch();

  nn::Model& model_;
  AdaptConfig cfg_;
  AdaptState state_;
  MedianSmoother smoother_;
  std::vector<std::vector<double>> pending_;
  std::vector<TraceRecord> trace_;
  std::size_t next_epoch_{0};
};

struct StreamResult {
  std::vector<EpochOutput> outputs;
  std::vector<TraceRecord> trace;
  AdaptState state;
};

StreamResult adapt_stream(nn::Model& model, std::span<const std::vector<double>> epochs, const AdaptConfig& cfg);

}  // namespace driftguard::tta
