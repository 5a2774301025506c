#include "driftguard/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "driftguard/error.hpp"
#include "driftguard/metrics.hpp"

namespace driftguard::train {
namespace {

void check_distribution(const ClassVector& p) {
  (void)nn::entropy(p);  // throws NotADistribution
}

int one_hot_index(const ClassVector& y) {
  int idx = -1;
  double sum = 0.0;
  for (std::size_t c = 0; c < kNumStages; ++c) {
    if (y[c] != 0.0 && y[c] != 1.0) return -1;
    if (y[c] == 1.0) idx = static_cast<int>(c);
    sum += y[c];
  }
  return sum == 1.0 ? idx : -1;
}

}  // namespace

ClassVector one_hot(StageLabel s) {
  ClassVector y{};
  y[static_cast<std::size_t>(to_index(s))] = 1.0;
  return y;
}

LossResult focal_loss(std::span<const ClassVector> probs, std::span<const ClassVector> onehot,
                      const FocalConfig& cfg) {
  if (probs.size() != onehot.size()) throw Error(Errc::ShapeMismatch, "probs and labels differ in batch size");
  if (probs.empty()) throw Error(Errc::EmptyBatch, "focal loss of an empty batch");
  const double g = cfg.gamma;
  const double inv_b = 1.0 / static_cast<double>(probs.size());
  LossResult out;
  out.dlogits.assign(probs.size() * kNumStages, 0.0);
  for (std::size_t b = 0; b < probs.size(); ++b) {
    const ClassVector& p = probs[b];
    check_distribution(p);
    const int y = one_hot_index(onehot[b]);
    if (y < 0) throw Error(Errc::NotOneHot, "label row " + std::to_string(b) + " is not one-hot");
    const double a = cfg.alpha[static_cast<std::size_t>(y)];
    const double pt = p[static_cast<std::size_t>(y)];
    const double logp = std::log(pt);
    const double w = std::pow(1.0 - pt, g);
    out.loss += -a * w * logp * inv_b;
    // dl/dz_j = -a [ (1-p)^g - g (1-p)^(g-1) p log p ] (delta_yj - p_j)
    const double extra = (g > 0.0 && pt < 1.0) ? g * std::pow(1.0 - pt, g - 1.0) * pt * logp : 0.0;
    const double coeff = -a * (w - extra) * inv_b;
    for (std::size_t j = 0; j < kNumStages; ++j) {
      const double delta = static_cast<int>(j) == y ? 1.0 : 0.0;
      out.dlogits[b * kNumStages + j] = coeff * (delta - p[j]);
    }
  }
  return out;
}

LossResult focal_loss(std::span<const ClassVector> probs, std::span<const StageLabel> labels,
                      const FocalConfig& cfg) {
  std::vector<ClassVector> y;
  y.reserve(labels.size());
  for (auto s : labels) y.push_back(one_hot(s));
  return focal_loss(probs, y, cfg);
}

ClassVector class_weights(std::span<const std::int64_t> counts) {
  if (counts.size() != kNumStages) throw Error(Errc::ShapeMismatch, "need one count per stage");
  ClassVector a{};
  double sum = 0.0;
  for (std::size_t c = 0; c < kNumStages; ++c) {
    if (counts[c] < 1) {
      throw Error(Errc::ZeroClassCount, std::string("no examples of stage ") +
                                            std::string(stage_name(stage_from_index(static_cast<int>(c)))));
    }
    a[c] = 1.0 / static_cast<double>(counts[c]);
    sum += a[c];
  }
  const double mean = sum / static_cast<double>(kNumStages);
  for (auto& v : a) v /= mean;
  return a;
}

ClassVector prior_init(std::span<const double> priors) {
  if (priors.size() != kNumStages) throw Error(Errc::ShapeMismatch, "need one prior per stage");
  double sum = 0.0;
  for (double p : priors) {
    if (!(p > 0.0) || !std::isfinite(p)) throw Error(Errc::DegeneratePrior, "priors must be positive");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw Error(Errc::DegeneratePrior, "priors must sum to 1");
  ClassVector bias{};
  for (std::size_t c = 0; c < kNumStages; ++c) bias[c] = std::log(priors[c]);
  return bias;
}

double OptimState::lr_at(std::size_t t) const {
  if (warmup_steps == 0) return base_lr;
  return base_lr * std::min(1.0, static_cast<double>(t) / static_cast<double>(warmup_steps));
}

void adam_step(OptimState& opt, std::span<const std::span<double>> params,
               std::span<const std::span<const double>> grads) {
  if (params.size() != grads.size()) throw Error(Errc::ShapeMismatch, "one gradient per parameter required");
  if (opt.m.empty()) {
    for (const auto& p : params) {
      opt.m.emplace_back(p.size(), 0.0);
      opt.v.emplace_back(p.size(), 0.0);
    }
  }
  if (opt.m.size() != params.size()) throw Error(Errc::ShapeMismatch, "parameter count changed");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].size() != grads[i].size() || opt.m[i].size() != params[i].size()) {
      throw Error(Errc::ShapeMismatch, "parameter " + std::to_string(i) + " changed shape");
    }
  }
  ++opt.step;
  const double t = static_cast<double>(opt.step);
  const double lr = opt.lr_at(opt.step);
  const double c1 = 1.0 - std::pow(opt.beta1, t);
  const double c2 = 1.0 - std::pow(opt.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = opt.m[i];
    auto& v = opt.v[i];
    for (std::size_t k = 0; k < params[i].size(); ++k) {
      const double g = grads[i][k];
      m[k] = opt.beta1 * m[k] + (1.0 - opt.beta1) * g;
      v[k] = opt.beta2 * v[k] + (1.0 - opt.beta2) * g * g;
      params[i][k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + opt.eps);
    }
  }
}

void adam_step(OptimState& opt, const std::vector<nn::Param*>& params) {
  std::vector<std::span<double>> p;
  std::vector<std::span<const double>> g;
  for (nn::Param* q : params) {
    p.emplace_back(q->value);
    g.emplace_back(q->grad);
  }
  adam_step(opt, p, g);
}

dsp::Epoch augment(const dsp::Epoch& epoch, std::mt19937_64& rng, const AugmentConfig& cfg) {
  dsp::Epoch out = epoch;
  auto& x = out.samples;
  if (x.empty()) return out;
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  const bool jitter = coin(rng) < cfg.p_jitter;
  const bool scale = coin(rng) < cfg.p_scale;
  const bool mask = coin(rng) < cfg.p_mask;

  if (jitter) {
    double ss = 0.0;
    for (double v : x) ss += v * v;
    const double sigma = cfg.jitter_rms_fraction * std::sqrt(ss / static_cast<double>(x.size()));
    std::normal_distribution<double> noise(0.0, 1.0);
    for (double& v : x) v += sigma * noise(rng);
  }
  if (scale) {
    const double s = std::uniform_real_distribution<double>(cfg.scale_lo, cfg.scale_hi)(rng);
    for (double& v : x) v *= s;
  }
  if (mask) {
    const auto max_len = std::max<std::size_t>(
        1, static_cast<std::size_t>(cfg.max_mask_fraction * static_cast<double>(x.size())));
    const auto len = std::uniform_int_distribution<std::size_t>(1, max_len)(rng);
    const auto start = std::uniform_int_distribution<std::size_t>(0, x.size() - len)(rng);
    std::fill_n(x.begin() + static_cast<std::ptrdiff_t>(start), len, 0.0);
  }
  return out;
}

std::vector<nn::Prediction> predict_epochs(const nn::Model& model, const std::vector<dsp::Epoch>& epochs,
                                           std::size_t chunk) {
  std::vector<nn::Prediction> out;
  out.reserve(epochs.size());
  std::vector<std::vector<double>> windows;
  for (std::size_t i = 0; i < epochs.size(); i += chunk) {
    windows.clear();
    for (std::size_t k = i; k < std::min(epochs.size(), i + chunk); ++k) windows.push_back(epochs[k].samples);
    auto preds = model.predict(nn::make_batch(windows));
    out.insert(out.end(), preds.begin(), preds.end());
  }
  return out;
}

TrainResult train_source(nn::Model& model, const std::vector<dsp::Epoch>& train,
                         const std::vector<dsp::Epoch>& val, const TrainConfig& cfg,
                         const std::function<void(const EpochLog&)>& on_epoch) {
  std::vector<const dsp::Epoch*> tr;
  for (const auto& e : train) {
    if (e.label) tr.push_back(&e);
  }
  std::vector<dsp::Epoch> va;
  for (const auto& e : val) {
    if (e.label) va.push_back(e);
  }
  if (tr.size() < 2) throw Error(Errc::EmptyDataset, "need at least two labeled training epochs");
  if (cfg.batch_size < 2) throw Error(Errc::InvalidConfig, "batch_size must be at least 2");

  std::set<std::string> train_subjects;
  for (const auto* e : tr) train_subjects.insert(e->subject_id);
  for (const auto& e : va) {
    if (train_subjects.count(e.subject_id)) {
      throw Error(Errc::SplitOverlap, "subject '" + e.subject_id + "' is in both train and validation");
    }
  }

  std::array<std::int64_t, kNumStages> counts{};
  for (const auto* e : tr) ++counts[static_cast<std::size_t>(to_index(*e->label))];

  FocalConfig focal;
  focal.gamma = cfg.gamma;
  if (cfg.class_balanced) {
    // Stages absent from the training set count as seen once.
    std::array<std::int64_t, kNumStages> c = counts;
    for (auto& v : c) v = std::max<std::int64_t>(v, 1);
    focal.alpha = class_weights(c);
  }
  if (cfg.use_prior_init) {
    // Add-one smoothing keeps every prior positive.
    ClassVector priors{};
    const double denom = static_cast<double>(tr.size() + kNumStages);
    for (std::size_t c = 0; c < kNumStages; ++c) priors[c] = static_cast<double>(counts[c] + 1) / denom;
    const double s = std::accumulate(priors.begin(), priors.end(), 0.0);
    for (auto& p : priors) p /= s;
    const ClassVector bias = prior_init(priors);
    std::copy(bias.begin(), bias.end(), model.classifier().bias.value.begin());
    model.touch();
  }

  const std::size_t n_batches = (tr.size() + cfg.batch_size - 1) / cfg.batch_size;
  OptimState opt;
  opt.base_lr = cfg.lr;
  opt.warmup_steps = cfg.warmup_epochs * n_batches;

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(tr.size());
  std::iota(order.begin(), order.end(), 0);

  TrainResult result;
  nn::Model best = model;
  bool have_best = false;
  std::size_t since_best = 0;
  std::vector<std::vector<double>> windows;
  std::vector<StageLabel> labels;
  std::vector<ClassVector> probs;

  for (std::size_t ep = 1; ep <= cfg.max_epochs; ++ep) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t seen = 0, correct = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      if (end - start < 2) break;  // Train-mode BN needs two samples
      windows.clear();
      labels.clear();
      for (std::size_t k = start; k < end; ++k) {
        const dsp::Epoch& e = *tr[order[k]];
        windows.push_back(cfg.augment ? augment(e, rng, cfg.augmentation).samples : e.samples);
        labels.push_back(*e.label);
      }
      auto fr = model.forward(nn::make_batch(windows), nn::BnMode::Train);
      probs.clear();
      for (std::size_t b = 0; b < labels.size(); ++b) {
        probs.push_back(fr.predictions[b].probs);
        if (fr.predictions[b].argmax() == to_index(labels[b])) ++correct;
      }
      const LossResult lr = focal_loss(probs, labels, focal);
      loss_sum += lr.loss * static_cast<double>(labels.size());
      seen += labels.size();
      model.backward(fr.cache, lr.dlogits, nn::GradScope::All);
      adam_step(opt, model.params());
      model.touch();
    }

    EpochLog log;
    log.epoch = ep;
    log.train_loss = seen ? loss_sum / static_cast<double>(seen) : 0.0;
    log.train_accuracy = seen ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0;
    log.lr = opt.lr_at(opt.step);
    if (!va.empty()) {
      const auto preds = predict_epochs(model, va);
      std::vector<StageLabel> yt, yp;
      for (std::size_t i = 0; i < va.size(); ++i) {
        yt.push_back(*va[i].label);
        yp.push_back(stage_from_index(preds[i].argmax()));
      }
      const auto cm = metrics::confusion(yt, yp);
      log.val_accuracy = metrics::accuracy(cm);
      log.val_macro_f1 = metrics::f1_suite(cm).macro_f1;
      log.improved = !have_best || log.val_macro_f1 > result.best_val_macro_f1;
    } else {
      log.improved = true;
    }
    if (log.improved) {
      best = model;
      have_best = true;
      result.best_epoch = ep;
      result.best_val_macro_f1 = log.val_macro_f1;
      since_best = 0;
    } else {
      ++since_best;
    }
    result.log.push_back(log);
    if (on_epoch) on_epoch(log);
    if (!va.empty() && since_best >= cfg.patience) break;
  }
  model = best;
  model.touch();
  return result;
}

}  // namespace driftguard::train
