#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include "doctest.h"
#include "driftguard/nn.hpp"
#include "driftguard/train.hpp"
#include "support/expect.hpp"
#include "support/gradcheck.hpp"

using namespace driftguard;
using namespace driftguard::train;

namespace {

ClassVector random_probs(std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.5);
  std::array<double, kNumStages> z{};
  for (double& v : z) v = g(rng);
  return nn::softmax(z);
}

// Toy 2-stage set: W epochs carry a 10 Hz tone, N3 epochs a 1.5 Hz tone,
// both in noise, standardized per epoch.
std::vector<dsp::Epoch> toy_set(const std::string& subject, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 0.3);
  std::uniform_real_distribution<double> ph(0.0, 2.0 * std::numbers::pi);
  std::vector<dsp::Epoch> out;
  for (std::size_t i = 0; i < n; ++i) {
    const bool wake = i % 2 == 0;
    const double f = wake ? 10.0 : 1.5;
    const double p0 = ph(rng);
    dsp::Epoch e;
    e.subject_id = subject;
    e.index = i;
    e.label = wake ? StageLabel::W : StageLabel::N3;
    e.samples.resize(kEpochSamples);
    for (std::size_t t = 0; t < kEpochSamples; ++t) {
      e.samples[t] = std::sin(2.0 * std::numbers::pi * f * static_cast<double>(t) / 100.0 + p0) + g(rng);
    }
    dsp::StreamingStandardizer st;
    e.samples = dsp::standardize_stream(st, e.samples).samples;
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace

TEST_CASE("focal loss reduces to cross-entropy") {
  std::mt19937_64 rng(1);
  std::vector<ClassVector> probs;
  std::vector<StageLabel> labels;
  std::uniform_int_distribution<int> lab(0, 4);
  double ce = 0.0;
  for (int i = 0; i < 64; ++i) {
    probs.push_back(random_probs(rng));
    labels.push_back(stage_from_index(lab(rng)));
    ce -= std::log(probs.back()[static_cast<std::size_t>(to_index(labels.back()))]) / 64.0;
  }
  FocalConfig cfg;
  cfg.gamma = 0.0;
  CHECK(std::abs(focal_loss(probs, labels, cfg).loss - ce) < 1e-12);
}

TEST_CASE("focal loss worked values") {
  FocalConfig cfg;  // gamma 2, alpha 1
  const std::vector<ClassVector> half = {{0.5, 0.5, 0.0, 0.0, 0.0}};
  const std::vector<StageLabel> w = {StageLabel::W};
  CHECK(std::abs(focal_loss(half, w, cfg).loss - 0.25 * std::log(2.0)) < 1e-15);
  CHECK(std::abs(0.25 * std::log(2.0) - 0.173287) < 1e-6);

  const std::vector<ClassVector> sure = {{1.0, 0.0, 0.0, 0.0, 0.0}};
  CHECK(focal_loss(sure, w, cfg).loss == 0.0);

  std::mt19937_64 rng(2);
  for (int i = 0; i < 50; ++i) {
    const std::vector<ClassVector> p = {random_probs(rng)};
    CHECK(focal_loss(p, std::vector<StageLabel>{StageLabel::N2}, cfg).loss > 0.0);
  }

  const std::vector<ClassVector> two_hot = {{1.0, 1.0, 0.0, 0.0, 0.0}};
  CHECK(code_of([&] { focal_loss(half, two_hot, cfg); }) == Errc::NotOneHot);
  const std::vector<ClassVector> bad = {{0.5, 0.4, 0.0, 0.0, 0.0}};
  CHECK(code_of([&] { focal_loss(bad, w, cfg); }) == Errc::NotADistribution);
  CHECK(code_of([&] { focal_loss(std::vector<ClassVector>{}, std::vector<StageLabel>{}, cfg); }) ==
        Errc::EmptyBatch);
}

TEST_CASE("focal gradient matches finite differences in the logits") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g(0.0, 1.5);
  FocalConfig cfg;
  cfg.alpha = {0.6, 1.7, 0.9, 1.1, 0.7};
  for (double gamma : {0.0, 0.5, 2.0, 3.0}) {
    cfg.gamma = gamma;
    std::vector<std::array<double, kNumStages>> z(4);
    for (auto& row : z) {
      for (double& v : row) v = g(rng);
    }
    const std::vector<StageLabel> y = {StageLabel::W, StageLabel::N1, StageLabel::REM, StageLabel::N3};
    auto loss_of = [&](const std::vector<std::array<double, kNumStages>>& zz) {
      std::vector<ClassVector> p;
      for (const auto& row : zz) p.push_back(nn::softmax(row));
      return focal_loss(p, y, cfg);
    };
    const auto r = loss_of(z);
    for (std::size_t b = 0; b < z.size(); ++b) {
      for (std::size_t j = 0; j < kNumStages; ++j) {
        auto zp = z, zm = z;
        zp[b][j] += 1e-6;
        zm[b][j] -= 1e-6;
        const double num = (loss_of(zp).loss - loss_of(zm).loss) / 2e-6;
        CHECK(gradcheck::rel_error(r.dlogits[b * kNumStages + j], num) < 1e-4);
      }
    }
  }
}

TEST_CASE("class weights") {
  const std::vector<std::int64_t> eq = {7, 7, 7, 7, 7};
  for (double a : class_weights(eq)) CHECK(a == doctest::Approx(1.0).epsilon(1e-15));
  const std::vector<std::int64_t> c = {100, 50, 100, 100, 100};
  const auto a = class_weights(c);
  const double expect[] = {5.0 / 6.0, 10.0 / 6.0, 5.0 / 6.0, 5.0 / 6.0, 5.0 / 6.0};
  for (std::size_t i = 0; i < kNumStages; ++i) CHECK(std::abs(a[i] - expect[i]) < 1e-12);

  std::mt19937_64 rng(4);
  std::uniform_int_distribution<std::int64_t> n(1, 100000);
  for (int t = 0; t < 100; ++t) {
    std::vector<std::int64_t> r(kNumStages);
    for (auto& v : r) v = n(rng);
    const auto w = class_weights(r);
    double m = 0.0;
    for (double v : w) m += v / kNumStages;
    CHECK(std::abs(m - 1.0) < 1e-12);
  }
  const std::vector<std::int64_t> zero = {3, 0, 1, 1, 1};
  CHECK(code_of([&] { class_weights(zero); }) == Errc::ZeroClassCount);
}

TEST_CASE("prior initialization") {
  const std::vector<double> uni(kNumStages, 0.2);
  const auto bu = prior_init(uni);
  for (double b : bu) CHECK(b == bu[0]);

  const std::vector<double> pri = {0.1, 0.05, 0.45, 0.2, 0.2};
  const auto b = prior_init(pri);
  const auto p = nn::softmax(b);
  for (std::size_t i = 0; i < kNumStages; ++i) CHECK(std::abs(p[i] - pri[i]) < 1e-12);

  CHECK(code_of([] { prior_init(std::vector<double>{0.0, 0.25, 0.25, 0.25, 0.25}); }) == Errc::DegeneratePrior);
  CHECK(code_of([] { prior_init(std::vector<double>{0.2, 0.2, 0.2, 0.2, 0.3}); }) == Errc::DegeneratePrior);

  // Zero weights + prior bias: cross-entropy on prior-distributed labels is
  // the entropy of the prior.
  nn::Model m;
  m.init(3);
  std::fill(m.classifier().weight.value.begin(), m.classifier().weight.value.end(), 0.0);
  std::copy(b.begin(), b.end(), m.classifier().bias.value.begin());
  m.touch();
  const int per[] = {2, 1, 9, 4, 4};
  std::vector<StageLabel> y;
  for (int c = 0; c < 5; ++c) {
    for (int k = 0; k < per[c]; ++k) y.push_back(stage_from_index(c));
  }
  const auto preds = m.predict(gradcheck::random_input(y.size(), kEpochSamples, 8));
  std::vector<ClassVector> probs;
  for (const auto& q : preds) probs.push_back(q.probs);
  FocalConfig ce;
  ce.gamma = 0.0;
  double h = 0.0;
  for (double q : pri) h -= q * std::log(q);
  CHECK(std::abs(focal_loss(probs, y, ce).loss - h) < 1e-6);
}

TEST_CASE("Adam steps") {
  OptimState opt;
  std::vector<double> x = {0.5};
  const std::vector<double> one = {1.0};
  std::vector<std::span<double>> ps = {x};
  std::vector<std::span<const double>> gs = {one};
  adam_step(opt, ps, gs);
  // m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
  CHECK(std::abs((x[0] - 0.5) - (-1e-3 / (1.0 + 1e-8))) < 1e-15);
  CHECK(std::abs((x[0] - 0.5) + 1e-3) < 1e-10);

  OptimState z;
  std::vector<double> w = {1.0, -2.0, 3.0};
  const std::vector<double> zero(3, 0.0);
  std::vector<std::span<double>> pw = {w};
  std::vector<std::span<const double>> gz = {zero};
  for (int i = 0; i < 10; ++i) adam_step(z, pw, gz);
  CHECK(w == std::vector<double>{1.0, -2.0, 3.0});

  OptimState warm;
  warm.warmup_steps = 10;
  CHECK(warm.lr_at(5) == doctest::Approx(warm.base_lr / 2));
  CHECK(warm.lr_at(10) == warm.base_lr);
  CHECK(warm.lr_at(30) == warm.base_lr);

  std::vector<double> other = {1.0, 2.0};
  std::vector<std::span<double>> po = {other};
  const std::vector<double> g2 = {0.1, 0.1};
  std::vector<std::span<const double>> go = {g2};
  CHECK(code_of([&] { adam_step(opt, po, go); }) == Errc::ShapeMismatch);
}

TEST_CASE("augmentations") {
  std::mt19937_64 rng(5);
  dsp::Epoch e;
  e.samples.resize(kEpochSamples);
  std::normal_distribution<double> g(0.0, 1.0);
  for (double& v : e.samples) v = g(rng) + 0.1;

  AugmentConfig off;
  off.p_jitter = off.p_scale = off.p_mask = 0.0;
  CHECK(augment(e, rng, off).samples == e.samples);

  AugmentConfig scale = off;
  scale.p_scale = 1.0;
  auto rms = [](const std::vector<double>& x) {
    double s = 0.0;
    for (double v : x) s += v * v;
    return std::sqrt(s / static_cast<double>(x.size()));
  };
  for (int t = 0; t < 20; ++t) {
    const auto out = augment(e, rng, scale);
    const double s = out.samples[0] / e.samples[0];
    CHECK(s >= 0.8);
    CHECK(s <= 1.2);
    CHECK(std::abs(rms(out.samples) - s * rms(e.samples)) < 1e-9);
  }

  AugmentConfig mask = off;
  mask.p_mask = 1.0;
  for (int t = 0; t < 200; ++t) {
    const auto out = augment(e, rng, mask);
    REQUIRE(out.samples.size() == kEpochSamples);
    std::size_t runs = 0, len = 0;
    for (std::size_t i = 0; i < kEpochSamples; ++i) {
      if (out.samples[i] != e.samples[i]) {
        CHECK(out.samples[i] == 0.0);
        if (i == 0 || out.samples[i - 1] == e.samples[i - 1]) ++runs;
        ++len;
      }
    }
    CHECK(runs == 1);
    CHECK(len >= 1);
    CHECK(len <= 300);
  }

  AugmentConfig jit = off;
  jit.p_jitter = 1.0;
  const auto j = augment(e, rng, jit);
  std::vector<double> d(kEpochSamples);
  for (std::size_t i = 0; i < kEpochSamples; ++i) d[i] = j.samples[i] - e.samples[i];
  CHECK(rms(d) == doctest::Approx(0.05 * rms(e.samples)).epsilon(0.1));

  AugmentConfig all;
  for (int t = 0; t < 50; ++t) CHECK(augment(e, rng, all).samples.size() == kEpochSamples);
}

TEST_CASE("training on separable toy data") {
  const auto train = toy_set("a", 32, 1);
  const auto val = toy_set("b", 16, 2);
  nn::Model m;
  m.init(7);
  TrainConfig cfg;
  cfg.max_epochs = 20;
  cfg.batch_size = 8;
  cfg.warmup_epochs = 1;
  cfg.lr = 3e-3;
  cfg.patience = 20;
  cfg.seed = 7;
  cfg.augment = false;
  std::vector<EpochLog> seen;
  const auto r = train_source(m, train, val, cfg, [&](const EpochLog& l) { seen.push_back(l); });
  CHECK(seen.size() == r.log.size());
  REQUIRE_FALSE(r.log.empty());
  double best_train = 0.0;
  for (const auto& l : r.log) best_train = std::max(best_train, l.train_accuracy);
  CHECK(best_train >= 0.99);

  const auto preds = predict_epochs(m, train);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < train.size(); ++i) hit += preds[i].argmax() == to_index(*train[i].label) ? 1 : 0;
  CHECK(static_cast<double>(hit) / static_cast<double>(train.size()) >= 0.99);
}

TEST_CASE("training is deterministic and checks its split") {
  const auto train = toy_set("a", 12, 3);
  const auto val = toy_set("b", 6, 4);
  TrainConfig cfg;
  cfg.max_epochs = 2;
  cfg.batch_size = 4;
  cfg.seed = 11;
  auto run = [&] {
    nn::Model m;
    m.init(11);
    auto r = train_source(m, train, val, cfg);
    return std::make_pair(r, nn::full_hash(m));
  };
  const auto [a, ha] = run();
  const auto [b, hb] = run();
  REQUIRE(a.log.size() == b.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i) CHECK(a.log[i].train_loss == b.log[i].train_loss);
  CHECK(ha == hb);

  nn::Model m;
  m.init(1);
  const auto leak = toy_set("a", 4, 9);
  CHECK(code_of([&] { train_source(m, train, leak, cfg); }) == Errc::SplitOverlap);
  CHECK(code_of([&] { train_source(m, {}, val, cfg); }) == Errc::EmptyDataset);
}
