#include "driftguard/tta.hpp"

#include <algorithm>

#include "driftguard/error.hpp"

namespace driftguard::tta {
namespace {

std::size_t nested_bytes(const std::vector<std::vector<double>>& v) {
  std::size_t n = 0;
  for (const auto& x : v) n += x.size() * sizeof(double);
  return n;
}

void require_batch(const nn::Tensor& batch) {
  if (batch.batch < 2) {
    throw Error(Errc::BatchTooSmall, "adaptation needs at least 2 epochs per batch, got " +
                                         std::to_string(batch.batch));
  }
}

void fold(std::vector<double>& snap, const std::vector<double>& live, double rho) {
  for (std::size_t i = 0; i < snap.size(); ++i) snap[i] = rho * snap[i] + (1.0 - rho) * live[i];
}

}  // namespace

std::string mode_name(Mode m) {
  switch (m) {
    case Mode::Frozen: return "frozen";
    case Mode::BnOnly: return "bn-only";
    case Mode::Tent: return "tent";
  }
  return "?";
}

Mode parse_mode(const std::string& s) {
  for (auto m : {Mode::Frozen, Mode::BnOnly, Mode::Tent}) {
    if (mode_name(m) == s) return m;
  }
  throw Error(Errc::InvalidConfig, "unknown mode '" + s + "' (frozen, bn-only, tent)");
}

std::string reset_reason_name(ResetReason r) {
  switch (r) {
    case ResetReason::None: return "none";
    case ResetReason::Drift: return "drift";
    case ResetReason::GateStreak: return "gate_streak";
    case ResetReason::NonFinite: return "non_finite";
  }
  return "?";
}

void AdaptConfig::validate() const {
  auto fail = [](const std::string& msg) { throw Error(Errc::InvalidConfig, msg); };
  if (micro_batch < 1) fail("micro_batch must be at least 1");
  if (!(bn_momentum > 0.0 && bn_momentum <= 1.0)) fail("bn_momentum must be in (0, 1]");
  if (!(tta_lr >= 0.0) || !std::isfinite(tta_lr)) fail("tta_lr must be finite and non-negative");
  if (!(sgd_momentum >= 0.0 && sgd_momentum < 1.0)) fail("sgd_momentum must be in [0, 1)");
  if (!(h_min >= 0.0 && h_min < h_max && h_max <= kLn5 + 1e-12)) fail("need 0 <= h_min < h_max <= ln 5");
  if (!(ema_entropy_momentum >= 0.0 && ema_entropy_momentum < 1.0)) fail("ema_entropy_momentum must be in [0, 1)");
  if (!(snapshot_decay > 0.0 && snapshot_decay < 1.0)) fail("snapshot_decay must be in (0, 1)");
  if (!(drift_delta > 0.0)) fail("drift_delta must be positive");
  if (gate_streak_reset < 1) fail("gate_streak_reset must be at least 1");
  if (median_width < 1 || median_width % 2 == 0) fail("median_width must be odd");
}

std::size_t BnSnapshot::bytes() const {
  return nested_bytes(gamma) + nested_bytes(beta) + nested_bytes(mean) + nested_bytes(var);
}

BnSnapshot capture_bn(const nn::Model& model) {
  BnSnapshot s;
  for (const auto* bn : model.batch_norms()) {
    s.gamma.push_back(bn->gamma.value);
    s.beta.push_back(bn->beta.value);
    s.mean.push_back(bn->running_mean.value);
    s.var.push_back(bn->running_var.value);
  }
  return s;
}

void restore_bn(nn::Model& model, const BnSnapshot& snap) {
  auto bns = model.batch_norms();
  if (bns.size() != snap.gamma.size()) throw Error(Errc::ShapeMismatch, "snapshot covers a different model");
  for (std::size_t i = 0; i < bns.size(); ++i) {
    bns[i]->gamma.value = snap.gamma[i];
    bns[i]->beta.value = snap.beta[i];
    bns[i]->running_mean.value = snap.mean[i];
    bns[i]->running_var.value = snap.var[i];
  }
  model.touch();
}

double bn_distance(const nn::Model& model, const BnSnapshot& snap) {
  const auto bns = model.batch_norms();
  double diff = 0.0, ref = 0.0;
  for (std::size_t i = 0; i < bns.size(); ++i) {
    for (std::size_t c = 0; c < bns[i]->channels(); ++c) {
      const double dg = bns[i]->gamma.value[c] - snap.gamma[i][c];
      const double db = bns[i]->beta.value[c] - snap.beta[i][c];
      diff += dg * dg + db * db;
      ref += snap.gamma[i][c] * snap.gamma[i][c] + snap.beta[i][c] * snap.beta[i][c];
    }
  }
  return std::sqrt(diff) / (std::sqrt(ref) + 1e-12);
}

std::size_t AdaptState::bytes() const { return sizeof(AdaptState) + snapshot.bytes() + nested_bytes(velocity); }

AdaptState init_state(const nn::Model& model) {
  AdaptState s;
  s.snapshot = capture_bn(model);
  for (const auto* bn : model.batch_norms()) {
    s.velocity.emplace_back(bn->channels(), 0.0);
    s.velocity.emplace_back(bn->channels(), 0.0);
  }
  return s;
}

std::vector<nn::Prediction> bn_refresh(nn::Model& model, const nn::Tensor& batch) {
  require_batch(batch);
  (void)model.forward(batch, nn::BnMode::Train, true);
  return model.predict(batch);
}

TentResult tent_step(nn::Model& model, const nn::Tensor& batch, const AdaptConfig& cfg, AdaptState& state) {
  require_batch(batch);
  auto fr = model.forward(batch, nn::BnMode::Train, true);
  if (cfg.tent_norm == TentNorm::Running) fr = model.forward(batch, nn::BnMode::Eval, false);
  const std::size_t B = fr.predictions.size();
  const double inv_b = 1.0 / static_cast<double>(B);

  TentResult out;
  std::vector<double> dlogits(B * kNumStages);
  for (std::size_t b = 0; b < B; ++b) {
    const auto& p = fr.predictions[b];
    out.loss += p.entropy * inv_b;
    const auto g = nn::entropy_grad_logits(p.probs);
    for (std::size_t j = 0; j < kNumStages; ++j) dlogits[b * kNumStages + j] = g[j] * inv_b;
  }
  out.predictions = std::move(fr.predictions);
  out.finite = std::isfinite(out.loss);
  if (out.finite) {
    model.backward(fr.cache, dlogits, nn::GradScope::BnAffine);
    for (const auto* bn : model.batch_norms()) {
      for (const auto* p : {&bn->gamma, &bn->beta}) {
        if (!std::all_of(p->grad.begin(), p->grad.end(), [](double v) { return std::isfinite(v); })) {
          out.finite = false;
        }
      }
    }
  }
  if (!out.finite) {
    state.nonfinite_pending = true;
    return out;
  }

  auto bns = model.batch_norms();
  if (state.velocity.size() != 2 * bns.size()) throw Error(Errc::ShapeMismatch, "state built for another model");
  for (std::size_t i = 0; i < bns.size(); ++i) {
    nn::Param* ps[2] = {&bns[i]->gamma, &bns[i]->beta};
    for (std::size_t k = 0; k < 2; ++k) {
      auto& v = state.velocity[2 * i + k];
      for (std::size_t c = 0; c < v.size(); ++c) {
        v[c] = cfg.sgd_momentum * v[c] + ps[k]->grad[c];
        ps[k]->value[c] -= cfg.tta_lr * v[c];
      }
    }
  }
  model.touch();
  return out;
}

double batch_entropy(std::span<const nn::Prediction> preds) {
  if (preds.empty()) throw Error(Errc::EmptyBatch, "entropy of an empty batch");
  double h = 0.0;
  for (const auto& p : preds) h += p.entropy;
  return std::clamp(h / static_cast<double>(preds.size()), 0.0, kLn5);
}

GateDecision gate(AdaptState& state, double h, const AdaptConfig& cfg) {
  if (!state.has_entropy) {
    state.ema_entropy = h;
    state.has_entropy = true;
  } else {
    state.ema_entropy = cfg.ema_entropy_momentum * state.ema_entropy + (1.0 - cfg.ema_entropy_momentum) * h;
  }
  const double tested = cfg.gate_signal == GateSignal::Ema ? state.ema_entropy : h;
  const bool open = tested >= cfg.h_min && tested <= cfg.h_max;
  if (open) {
    state.gated_streak = 0;
    return GateDecision::Open;
  }
  ++state.gated_streak;
  return GateDecision::Closed;
}

ResetCheck snapshot_update_and_maybe_reset(nn::Model& model, AdaptState& state, const AdaptConfig& cfg,
                                           bool update_applied) {
  ResetCheck rc;
  rc.distance = bn_distance(model, state.snapshot);
  if (state.nonfinite_pending || !std::isfinite(rc.distance)) {
    rc.reason = ResetReason::NonFinite;
  } else if (rc.distance > cfg.drift_delta) {
    rc.reason = ResetReason::Drift;
  } else if (state.gated_streak >= cfg.gate_streak_reset) {
    rc.reason = ResetReason::GateStreak;
  }
  if (rc.reason != ResetReason::None) {
    restore_bn(model, state.snapshot);
    for (auto& v : state.velocity) std::fill(v.begin(), v.end(), 0.0);
    state.gated_streak = 0;
    state.nonfinite_pending = false;
    ++state.resets;
    rc.fired = true;
    return rc;
  }
  if (update_applied) {
    const double rho = cfg.snapshot_decay;
    const auto bns = model.batch_norms();
    for (std::size_t i = 0; i < bns.size(); ++i) {
      fold(state.snapshot.gamma[i], bns[i]->gamma.value, rho);
      fold(state.snapshot.beta[i], bns[i]->beta.value, rho);
      fold(state.snapshot.mean[i], bns[i]->running_mean.value, rho);
      fold(state.snapshot.var[i], bns[i]->running_var.value, rho);
    }
  }
  return rc;
}

int MedianSmoother::push(int label) {
  window_.push_back(label);
  if (window_.size() > width_) window_.pop_front();
  std::vector<int> sorted(window_.begin(), window_.end());
  std::sort(sorted.begin(), sorted.end());
  return sorted[(sorted.size() - 1) / 2];
}

std::vector<int> median_smooth(std::span<const int> labels, std::size_t width) {
  if (width < 1 || width % 2 == 0) throw Error(Errc::InvalidConfig, "median width must be odd");
  MedianSmoother s(width);
  std::vector<int> out;
  out.reserve(labels.size());
  for (int l : labels) out.push_back(s.push(l));
  return out;
}

nlohmann::ordered_json trace_json(const TraceRecord& r) {
  nlohmann::ordered_json j;
  j["batch_index"] = r.batch_index;
  j["first_epoch"] = r.first_epoch;
  j["size"] = r.size;
  j["entropy"] = r.entropy;
  j["ema_entropy"] = r.ema_entropy;
  if (r.gate) {
    j["gate"] = *r.gate == GateDecision::Open ? "open" : "closed";
  } else {
    j["gate"] = nullptr;
  }
  j["updated"] = r.updated;
  j["stats_refreshed"] = r.stats_refreshed;
  j["reset"] = r.reset;
  j["reset_reason"] = reset_reason_name(r.reset_reason);
  if (r.loss) {
    j["loss"] = *r.loss;
  } else {
    j["loss"] = nullptr;
  }
  j["distance"] = r.distance;
  return j;
}

StreamAdapter::StreamAdapter(nn::Model& model, const AdaptConfig& cfg)
    : model_(model), cfg_(cfg), smoother_(cfg.median_width) {
  cfg_.validate();
  model_.set_bn_momentum(cfg_.bn_momentum);
  state_ = init_state(model_);
}

std::size_t StreamAdapter::state_bytes() const {
  std::size_t n = state_.bytes() + smoother_.bytes();
  n += cfg_.micro_batch * model_.arch().input_len * sizeof(double);
  return n;
}

std::vector<EpochOutput> StreamAdapter::push(std::vector<double> epoch) {
  if (epoch.size() != model_.arch().input_len) {
    throw Error(Errc::ShapeMismatch, "epoch has " + std::to_string(epoch.size()) + " samples, model expects " +
                                         std::to_string(model_.arch().input_len));
  }
  pending_.push_back(std::move(epoch));
  if (pending_.size() < cfg_.micro_batch) return {};
  return process_batch();
}

std::vector<EpochOutput> StreamAdapter::finish() {
  if (pending_.empty()) return {};
  return process_batch();
}

std::vector<EpochOutput> StreamAdapter::process_batch() {
  const nn::Tensor batch = nn::make_batch(pending_);
  const std::size_t n = pending_.size();
  pending_.clear();

  TraceRecord tr;
  tr.batch_index = state_.batches++;
  tr.first_epoch = next_epoch_;
  tr.size = n;

  // Scores are fixed before this batch can influence the model.
  const auto preds = model_.predict(batch);
  tr.entropy = batch_entropy(preds);

  std::vector<EpochOutput> out;
  out.reserve(n);
  for (std::size_t b = 0; b < n; ++b) {
    EpochOutput o;
    o.index = next_epoch_++;
    o.prediction = preds[b];
    o.raw = stage_from_index(preds[b].argmax());
    o.smoothed = stage_from_index(smoother_.push(to_index(o.raw)));
    o.batch_index = tr.batch_index;
    out.push_back(o);
  }

  if (cfg_.mode == Mode::Frozen || n < 2) {
    if (cfg_.mode != Mode::Frozen && n >= 1) {
      // Too small to adapt on; the EMA still sees it.
      tr.ema_entropy = state_.has_entropy ? cfg_.ema_entropy_momentum * state_.ema_entropy +
                                                (1.0 - cfg_.ema_entropy_momentum) * tr.entropy
                                          : tr.entropy;
      state_.ema_entropy = tr.ema_entropy;
      state_.has_entropy = true;
    } else {
      tr.ema_entropy = tr.entropy;
    }
    trace_.push_back(tr);
    return out;
  }

  GateDecision decision = gate(state_, tr.entropy, cfg_);
  if (!cfg_.gate_enabled) decision = GateDecision::Open;
  tr.gate = decision;
  tr.ema_entropy = state_.ema_entropy;

  if (decision == GateDecision::Open) {
    if (cfg_.mode == Mode::BnOnly) {
      (void)model_.forward(batch, nn::BnMode::Train, true);
      tr.updated = true;
      tr.stats_refreshed = true;
    } else {
      const TentResult r = tent_step(model_, batch, cfg_, state_);
      tr.loss = r.loss;
      tr.updated = r.finite;
      tr.stats_refreshed = true;
    }
  } else if (!cfg_.gate_blocks_stats) {
    (void)model_.forward(batch, nn::BnMode::Train, true);
    tr.stats_refreshed = true;
  }
  if (tr.updated) ++state_.updates_applied;

  if (cfg_.reset_enabled) {
    const ResetCheck rc = snapshot_update_and_maybe_reset(model_, state_, cfg_, tr.updated);
    tr.reset = rc.fired;
    tr.reset_reason = rc.reason;
    tr.distance = rc.distance;
  } else {
    tr.distance = bn_distance(model_, state_.snapshot);
    state_.nonfinite_pending = false;
  }
  trace_.push_back(tr);
  return out;
}

StreamResult adapt_stream(nn::Model& model, std::span<const std::vector<double>> epochs, const AdaptConfig& cfg) {
  StreamAdapter adapter(model, cfg);
  StreamResult res;
  res.outputs.reserve(epochs.size());
  for (const auto& e : epochs) {
    auto o = adapter.push(e);
    res.outputs.insert(res.outputs.end(), o.begin(), o.end());
  }
  auto o = adapter.finish();
  res.outputs.insert(res.outputs.end(), o.begin(), o.end());
  res.trace = adapter.trace();
  res.state = adapter.state();
  return res;
}

}  // namespace driftguard::tta
