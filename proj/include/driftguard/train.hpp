#pragma once

// Source-domain training: class-balanced focal loss, prior-biased classifier
// initialization, Adam with linear warmup, and epoch augmentations.

#include <array>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "driftguard/dsp.hpp"
#include "driftguard/nn.hpp"

namespace driftguard::train {

using ClassVector = std::array<double, kNumStages>;

struct FocalConfig {
  double gamma{2.0};
  ClassVector alpha{1.0, 1.0, 1.0, 1.0, 1.0};
};

struct LossResult {
  double loss{0.0};
  std::vector<double> dlogits;  // [B, 5], gradient of the batch-mean loss
};

// Mean over the batch of -sum_c alpha_c (1 - p_c)^gamma y_c log p_c.
// Throws NotOneHot for label rows that are not one-hot and NotADistribution
// for invalid probability rows.
LossResult focal_loss(std::span<const ClassVector> probs, std::span<const ClassVector> onehot,
                      const FocalConfig& cfg);
LossResult focal_loss(std::span<const ClassVector> probs, std::span<const StageLabel> labels,
                      const FocalConfig& cfg);

ClassVector one_hot(StageLabel s);

// alpha_c proportional to 1 / counts_c, mean 1. Throws ZeroClassCount.
ClassVector class_weights(std::span<const std::int64_t> counts);

// bias_c = log(prior_c). Throws DegeneratePrior unless every prior is
// positive and they sum to 1 within 1e-9.
ClassVector prior_init(std::span<const double> priors);

struct OptimState {
  double base_lr{1e-3};
  double beta1{0.9};
  double beta2{0.999};
  double eps{1e-8};
  std::size_t warmup_steps{1};
  std::size_t step{0};
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;

  // base_lr * min(1, t / warmup_steps) for 1-based step t.
  double lr_at(std::size_t t) const;
};

// One bias-corrected Adam step. Moments are allocated on the first call;
// any later size disagreement throws ShapeMismatch.
void adam_step(OptimState& opt, std::span<const std::span<double>> params,
               std::span<const std::span<const double>> grads);
// Same, reading gradients from Param::grad.
void adam_step(OptimState& opt, const std::vector<nn::Param*>& params);

struct AugmentConfig {
  double p_jitter{0.5};
  double p_scale{0.5};
  double p_mask{0.5};
  double jitter_rms_fraction{0.05};
  double scale_lo{0.8};
  double scale_hi{1.2};
  double max_mask_fraction{0.1};
};

// Each augmentation fires independently with its probability. Length is
// always preserved.
dsp::Epoch augment(const dsp::Epoch& epoch, std::mt19937_64& rng, const AugmentConfig& cfg);

struct TrainConfig {
  std::size_t max_epochs{40};
  std::size_t batch_size{64};
  double lr{1e-3};
  double gamma{2.0};
  std::size_t warmup_epochs{5};
  std::size_t patience{7};
  std::uint64_t seed{0};
  bool class_balanced{true};
  bool use_prior_init{true};
  bool augment{true};
  AugmentConfig augmentation;
};

struct EpochLog {
  std::size_t epoch{0};
  double train_loss{0.0};
  double train_accuracy{0.0};
  double val_accuracy{0.0};
  double val_macro_f1{0.0};
  double lr{0.0};
  bool improved{false};
};

struct TrainResult {
  std::vector<EpochLog> log;
  std::size_t best_epoch{0};
  double best_val_macro_f1{0.0};
};

// Trains on labeled `train` epochs, selecting the checkpoint with the best
// validation macro F1 and stopping after `patience` epochs without
// improvement. Unlabeled epochs are ignored. Throws EmptyDataset when no
// labeled training epoch exists and SplitOverlap when a subject appears in
// both splits. `on_epoch` (optional) sees each log entry as it is produced.
TrainResult train_source(nn::Model& model, const std::vector<dsp::Epoch>& train,
                         const std::vector<dsp::Epoch>& val, const TrainConfig& cfg,
                         const std::function<void(const EpochLog&)>& on_epoch = {});

// Eval-mode predictions in chunks of `chunk` epochs.
std::vector<nn::Prediction> predict_epochs(const nn::Model& model, const std::vector<dsp::Epoch>& epochs,
                                           std::size_t chunk = 64);

}  // namespace driftguard::train
