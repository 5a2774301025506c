#include "driftguard/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "driftguard/error.hpp"

namespace driftguard::metrics {
namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::int64_t ConfusionMatrix::total() const {
  std::int64_t n = 0;
  for (const auto& row : counts) {
    for (auto c : row) n += c;
  }
  return n;
}

std::int64_t ConfusionMatrix::row_sum(std::size_t i) const {
  std::int64_t n = 0;
  for (auto c : counts[i]) n += c;
  return n;
}

std::int64_t ConfusionMatrix::col_sum(std::size_t j) const {
  std::int64_t n = 0;
  for (const auto& row : counts) n += row[j];
  return n;
}

std::int64_t ConfusionMatrix::trace() const {
  std::int64_t n = 0;
  for (std::size_t i = 0; i < kNumStages; ++i) n += counts[i][i];
  return n;
}

Matrix5 ConfusionMatrix::row_normalized() const {
  Matrix5 out{};
  for (std::size_t i = 0; i < kNumStages; ++i) {
    const auto r = row_sum(i);
    if (r == 0) continue;
    for (std::size_t j = 0; j < kNumStages; ++j) {
      out[i][j] = static_cast<double>(counts[i][j]) / static_cast<double>(r);
    }
  }
  return out;
}

ConfusionMatrix confusion(std::span<const StageLabel> y_true, std::span<const StageLabel> y_pred) {
  if (y_true.size() != y_pred.size()) {
    throw Error(Errc::LengthMismatch, std::to_string(y_true.size()) + " labels vs " +
                                          std::to_string(y_pred.size()) + " predictions");
  }
  if (y_true.empty()) throw Error(Errc::Empty, "no epochs to score");
  ConfusionMatrix cm;
  for (std::size_t t = 0; t < y_true.size(); ++t) {
    ++cm.counts[static_cast<std::size_t>(to_index(y_true[t]))][static_cast<std::size_t>(to_index(y_pred[t]))];
  }
  return cm;
}

double accuracy(const ConfusionMatrix& cm) {
  const auto n = cm.total();
  if (n == 0) throw Error(Errc::Empty, "empty confusion matrix");
  return static_cast<double>(cm.trace()) / static_cast<double>(n);
}

KappaResult kappa(const ConfusionMatrix& cm) {
  const auto n = cm.total();
  if (n == 0) throw Error(Errc::Empty, "empty confusion matrix");
  std::int64_t margin = 0;
  for (std::size_t c = 0; c < kNumStages; ++c) margin += cm.row_sum(c) * cm.col_sum(c);
  if (margin == n * n) return {0.0, true};
  const double nn = static_cast<double>(n);
  const double po = static_cast<double>(cm.trace()) / nn;
  const double pe = static_cast<double>(margin) / (nn * nn);
  return {(po - pe) / (1.0 - pe), false};
}

F1Suite f1_suite(const ConfusionMatrix& cm) {
  const auto n = cm.total();
  if (n == 0) throw Error(Errc::Empty, "empty confusion matrix");
  F1Suite out;
  double macro = 0.0, weighted = 0.0, recall_sum = 0.0;
  int seen = 0, supported = 0;
  for (std::size_t c = 0; c < kNumStages; ++c) {
    StageScores& s = out.per_stage[c];
    const auto tp = cm.counts[c][c];
    s.support = cm.row_sum(c);
    s.predicted = cm.col_sum(c);
    s.precision = s.predicted > 0 ? static_cast<double>(tp) / static_cast<double>(s.predicted) : 0.0;
    s.recall = s.support > 0 ? static_cast<double>(tp) / static_cast<double>(s.support) : 0.0;
    // 2TP / (2TP + FP + FN), which avoids 0/0 when precision and recall vanish
    const auto denom = s.support + s.predicted;
    s.f1 = denom > 0 ? 2.0 * static_cast<double>(tp) / static_cast<double>(denom) : 0.0;
    if (denom > 0) {
      macro += s.f1;
      ++seen;
    }
    if (s.support > 0) {
      recall_sum += s.recall;
      weighted += static_cast<double>(s.support) * s.f1;
      ++supported;
    }
  }
  out.macro_f1 = macro / seen;
  out.weighted_f1 = weighted / static_cast<double>(n);
  out.balanced_accuracy = recall_sum / supported;
  out.classes_excluded = seen < static_cast<int>(kNumStages) || supported < static_cast<int>(kNumStages);
  return out;
}

MccResult mcc(const ConfusionMatrix& cm) {
  const auto n = cm.total();
  if (n == 0) throw Error(Errc::Empty, "empty confusion matrix");
  std::int64_t rc = 0, rr = 0, cc = 0;
  for (std::size_t c = 0; c < kNumStages; ++c) {
    const auto r = cm.row_sum(c);
    const auto k = cm.col_sum(c);
    rc += r * k;
    rr += r * r;
    cc += k * k;
  }
  const std::int64_t a = n * n - rr;
  const std::int64_t b = n * n - cc;
  if (a == 0 || b == 0) return {0.0, true};
  const double num = static_cast<double>(n * cm.trace() - rc);
  return {num / std::sqrt(static_cast<double>(a) * static_cast<double>(b)), false};
}

std::size_t ece_bin(double confidence, std::size_t n_bins) {
  if (!(confidence > 0.0 && confidence <= 1.0)) {
    throw Error(Errc::OutOfRange, "confidence " + fmt(confidence) + " outside (0, 1]");
  }
  const double m = static_cast<double>(n_bins);
  auto k = static_cast<std::size_t>(std::ceil(confidence * m));
  // Fix up rounding in c*M against the exact edge test (k-1)/M < c <= k/M.
  while (k > 1 && static_cast<double>(k - 1) / m >= confidence) --k;
  while (k < n_bins && static_cast<double>(k) / m < confidence) ++k;
  return std::clamp<std::size_t>(k, 1, n_bins) - 1;
}

EceResult ece(std::span<const double> confidences, const std::vector<bool>& correct, std::size_t n_bins) {
  if (confidences.size() != correct.size()) {
    throw Error(Errc::LengthMismatch, "confidences and correctness differ in length");
  }
  if (confidences.empty()) throw Error(Errc::Empty, "no samples for ECE");
  if (n_bins == 0) throw Error(Errc::OutOfRange, "ECE needs at least one bin");

  EceResult out;
  out.bins.resize(n_bins);
  std::vector<double> conf_sum(n_bins, 0.0), hit_sum(n_bins, 0.0);
  for (std::size_t i = 0; i < confidences.size(); ++i) {
    const std::size_t k = ece_bin(confidences[i], n_bins);
    ++out.bins[k].count;
    conf_sum[k] += confidences[i];
    hit_sum[k] += correct[i] ? 1.0 : 0.0;
  }
  const double n = static_cast<double>(confidences.size());
  for (std::size_t k = 0; k < n_bins; ++k) {
    ReliabilityBin& b = out.bins[k];
    b.lo = static_cast<double>(k) / static_cast<double>(n_bins);
    b.hi = static_cast<double>(k + 1) / static_cast<double>(n_bins);
    if (b.count == 0) continue;
    const double cnt = static_cast<double>(b.count);
    b.mean_confidence = conf_sum[k] / cnt;
    b.accuracy = hit_sum[k] / cnt;
    out.ece += cnt / n * std::abs(b.accuracy - b.mean_confidence);
  }
  return out;
}

Matrix5 transition_matrix(std::span<const StageLabel> labels) {
  if (labels.size() < 2) throw Error(Errc::TooShort, "transition matrix needs at least two labels");
  std::array<std::array<std::int64_t, kNumStages>, kNumStages> counts{};
  for (std::size_t t = 0; t + 1 < labels.size(); ++t) {
    ++counts[static_cast<std::size_t>(to_index(labels[t]))][static_cast<std::size_t>(to_index(labels[t + 1]))];
  }
  Matrix5 out{};
  for (std::size_t i = 0; i < kNumStages; ++i) {
    std::int64_t r = 0;
    for (auto c : counts[i]) r += c;
    if (r == 0) continue;
    for (std::size_t j = 0; j < kNumStages; ++j) {
      out[i][j] = static_cast<double>(counts[i][j]) / static_cast<double>(r);
    }
  }
  return out;
}

MetricsReport evaluate(std::span<const StageLabel> y_true, std::span<const StageLabel> y_pred,
                       std::span<const double> confidences, std::size_t n_bins) {
  MetricsReport r;
  r.confusion = confusion(y_true, y_pred);
  if (confidences.size() != y_true.size()) {
    throw Error(Errc::LengthMismatch, "one confidence per prediction required");
  }
  r.n_epochs = r.confusion.total();
  r.accuracy = accuracy(r.confusion);
  const auto k = kappa(r.confusion);
  r.kappa = k.kappa;
  r.kappa_degenerate = k.degenerate;
  const auto f = f1_suite(r.confusion);
  r.per_stage = f.per_stage;
  r.macro_f1 = f.macro_f1;
  r.weighted_f1 = f.weighted_f1;
  r.balanced_accuracy = f.balanced_accuracy;
  r.classes_excluded = f.classes_excluded;
  const auto m = mcc(r.confusion);
  r.mcc = m.mcc;
  r.mcc_degenerate = m.degenerate;
  std::vector<bool> correct(y_true.size());
  for (std::size_t i = 0; i < y_true.size(); ++i) correct[i] = y_true[i] == y_pred[i];
  auto e = ece(confidences, correct, n_bins);
  r.ece = e.ece;
  r.reliability = std::move(e.bins);
  return r;
}

AggregateReport aggregate_subjects(std::span<const std::string> subjects,
                                   std::span<const MetricsReport> reports) {
  if (reports.empty()) throw Error(Errc::Empty, "no subjects to aggregate");
  if (subjects.size() != reports.size()) throw Error(Errc::LengthMismatch, "one name per subject report");
  AggregateReport out;
  out.subjects.assign(subjects.begin(), subjects.end());
  out.per_subject.assign(reports.begin(), reports.end());
  MetricsReport& m = out.mean;
  const double n = static_cast<double>(reports.size());
  std::array<int, kNumStages> stage_n{};
  for (const auto& r : reports) {
    m.accuracy += r.accuracy / n;
    m.macro_f1 += r.macro_f1 / n;
    m.weighted_f1 += r.weighted_f1 / n;
    m.balanced_accuracy += r.balanced_accuracy / n;
    m.kappa += r.kappa / n;
    m.mcc += r.mcc / n;
    m.ece += r.ece / n;
    m.n_epochs += r.n_epochs;
    m.kappa_degenerate = m.kappa_degenerate || r.kappa_degenerate;
    m.mcc_degenerate = m.mcc_degenerate || r.mcc_degenerate;
    m.classes_excluded = m.classes_excluded || r.classes_excluded;
    for (std::size_t i = 0; i < kNumStages; ++i) {
      for (std::size_t j = 0; j < kNumStages; ++j) m.confusion.counts[i][j] += r.confusion.counts[i][j];
      const auto& s = r.per_stage[i];
      m.per_stage[i].support += s.support;
      m.per_stage[i].predicted += s.predicted;
      if (s.support + s.predicted == 0) continue;
      m.per_stage[i].precision += s.precision;
      m.per_stage[i].recall += s.recall;
      m.per_stage[i].f1 += s.f1;
      ++stage_n[i];
    }
  }
  // Per-stage scores average over the subjects where the stage occurs.
  for (std::size_t i = 0; i < kNumStages; ++i) {
    if (stage_n[i] == 0) continue;
    m.per_stage[i].precision /= stage_n[i];
    m.per_stage[i].recall /= stage_n[i];
    m.per_stage[i].f1 /= stage_n[i];
  }
  if (reports.size() == 1) m = reports[0];
  return out;
}

nlohmann::ordered_json metrics_object(const MetricsReport& r) {
  nlohmann::ordered_json j;
  j["accuracy"] = r.accuracy;
  j["macro_f1"] = r.macro_f1;
  j["kappa"] = r.kappa;
  j["weighted_f1"] = r.weighted_f1;
  j["balanced_accuracy"] = r.balanced_accuracy;
  j["mcc"] = r.mcc;
  j["ece"] = r.ece;
  return j;
}

nlohmann::ordered_json report_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  j["metrics"] = metrics_object(r);
  j["n_epochs"] = r.n_epochs;
  nlohmann::ordered_json stages;
  for (std::size_t c = 0; c < kNumStages; ++c) {
    const auto& s = r.per_stage[c];
    stages[std::string(stage_name(stage_from_index(static_cast<int>(c))))] = {
        {"precision", s.precision}, {"recall", s.recall}, {"f1", s.f1}, {"support", s.support}};
  }
  j["per_stage"] = stages;
  j["confusion"] = r.confusion.counts;
  j["flags"] = {{"kappa_degenerate", r.kappa_degenerate},
                {"mcc_degenerate", r.mcc_degenerate},
                {"classes_excluded", r.classes_excluded}};
  return j;
}

std::string confusion_csv(const ConfusionMatrix& cm) {
  std::ostringstream os;
  os << "true\\pred";
  for (auto s : kAllStages) os << ',' << stage_name(s);
  os << '\n';
  for (std::size_t i = 0; i < kNumStages; ++i) {
    os << stage_name(kAllStages[i]);
    for (std::size_t j = 0; j < kNumStages; ++j) os << ',' << cm.counts[i][j];
    os << '\n';
  }
  return os.str();
}

std::string matrix_csv(const Matrix5& m) {
  std::ostringstream os;
  os << "from\\to";
  for (auto s : kAllStages) os << ',' << stage_name(s);
  os << '\n';
  for (std::size_t i = 0; i < kNumStages; ++i) {
    os << stage_name(kAllStages[i]);
    for (std::size_t j = 0; j < kNumStages; ++j) os << ',' << fmt(m[i][j]);
    os << '\n';
  }
  return os.str();
}

std::string reliability_csv(const std::vector<ReliabilityBin>& bins) {
  std::ostringstream os;
  os << "lo,hi,count,mean_confidence,accuracy\n";
  for (const auto& b : bins) {
    os << fmt(b.lo) << ',' << fmt(b.hi) << ',' << b.count << ',' << fmt(b.mean_confidence) << ','
       << fmt(b.accuracy) << '\n';
  }
  return os.str();
}

}  // namespace driftguard::metrics
