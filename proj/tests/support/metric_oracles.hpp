#pragma once

// Direct-definition metric implementations over label pairs, independent of
// the confusion-matrix code paths in the library.

#include <cmath>
#include <random>
#include <set>
#include <vector>

#include "driftguard/stage.hpp"

namespace oracle {

using driftguard::StageLabel;

struct Instance {
  std::vector<StageLabel> y_true;
  std::vector<StageLabel> y_pred;
  std::vector<double> conf;
};

struct Values {
  double accuracy, macro_f1, weighted_f1, balanced_accuracy, kappa, mcc, ece;
};

inline std::vector<StageLabel> random_labels(std::mt19937_64& rng, std::size_t n) {
  std::uniform_int_distribution<int> d(0, 4);
  std::vector<StageLabel> out(n);
  for (auto& v : out) v = driftguard::stage_from_index(d(rng));
  return out;
}

// Labels are drawn from a random subset of classes with a random amount of
// agreement, so degenerate and absent-class cases show up regularly.
inline Instance random_instance(std::mt19937_64& rng, std::size_t n) {
  std::uniform_int_distribution<int> nclass(1, 5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const int k = nclass(rng);
  const double agree = u(rng);
  std::uniform_int_distribution<int> lab(0, k - 1);
  Instance inst;
  for (std::size_t i = 0; i < n; ++i) {
    const int t = lab(rng);
    const int p = u(rng) < agree ? t : lab(rng);
    inst.y_true.push_back(driftguard::stage_from_index(t));
    inst.y_pred.push_back(driftguard::stage_from_index(p));
    double c = u(rng);
    if (u(rng) < 0.1) c = std::ceil(c * 15.0) / 15.0;  // exact bin edges
    if (c <= 0.0) c = 1.0;
    inst.conf.push_back(c);
  }
  return inst;
}

inline Values brute_force(const Instance& in) {
  const std::size_t n = in.y_true.size();
  const double N = static_cast<double>(n);
  auto t = [&](std::size_t i) { return driftguard::to_index(in.y_true[i]); };
  auto p = [&](std::size_t i) { return driftguard::to_index(in.y_pred[i]); };
  Values v{};

  std::size_t hit = 0;
  for (std::size_t i = 0; i < n; ++i) hit += t(i) == p(i);
  v.accuracy = static_cast<double>(hit) / N;

  // per-class one-vs-rest counts by scanning pairs
  double macro = 0, weighted = 0, recall = 0;
  int seen = 0, supported = 0;
  for (int c = 0; c < 5; ++c) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (t(i) == c && p(i) == c) tp += 1;
      if (t(i) != c && p(i) == c) fp += 1;
      if (t(i) == c && p(i) != c) fn += 1;
    }
    if (tp + fp + fn == 0) continue;
    const double prec = tp + fp > 0 ? tp / (tp + fp) : 0.0;
    const double rec = tp + fn > 0 ? tp / (tp + fn) : 0.0;
    const double f1 = prec + rec > 0 ? 2 * prec * rec / (prec + rec) : 0.0;
    macro += f1;
    ++seen;
    if (tp + fn > 0) {
      recall += rec;
      weighted += (tp + fn) * f1;
      ++supported;
    }
  }
  v.macro_f1 = macro / seen;
  v.weighted_f1 = weighted / N;
  v.balanced_accuracy = recall / supported;

  // kappa: chance agreement as the probability two independent draws, one
  // from each marginal, coincide; counted over all n*n index pairs.
  double chance = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) chance += t(i) == p(j);
  }
  const double pe = chance / (N * N);
  v.kappa = std::abs(1.0 - pe) < 1e-15 ? 0.0 : (v.accuracy - pe) / (1.0 - pe);

  // MCC as the Pearson correlation of the one-hot indicator matrices.
  double mt[5] = {}, mp[5] = {};
  for (std::size_t i = 0; i < n; ++i) {
    mt[t(i)] += 1.0 / N;
    mp[p(i)] += 1.0 / N;
  }
  double cov_tp = 0, cov_tt = 0, cov_pp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (int c = 0; c < 5; ++c) {
      const double a = (t(i) == c ? 1.0 : 0.0) - mt[c];
      const double b = (p(i) == c ? 1.0 : 0.0) - mp[c];
      cov_tp += a * b;
      cov_tt += a * a;
      cov_pp += b * b;
    }
  }
  v.mcc = (cov_tt < 1e-12 || cov_pp < 1e-12) ? 0.0 : cov_tp / std::sqrt(cov_tt * cov_pp);

  // ECE: assign bins by scanning edges with exact rational comparison
  // c*M > k-1 and c*M <= k, i.e. (k-1)/M < c <= k/M evaluated as divisions.
  const int M = 15;
  double ece = 0;
  for (int k = 1; k <= M; ++k) {
    const double lo = static_cast<double>(k - 1) / M, hi = static_cast<double>(k) / M;
    double cnt = 0, cs = 0, hs = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (in.conf[i] > lo && in.conf[i] <= hi) {
        cnt += 1;
        cs += in.conf[i];
        hs += t(i) == p(i);
      }
    }
    if (cnt > 0) ece += cnt / N * std::abs(hs / cnt - cs / cnt);
  }
  v.ece = ece;
  return v;
}

}  // namespace oracle
