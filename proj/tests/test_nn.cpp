#include <cmath>
#include <random>

#include "doctest.h"
#include "driftguard/error.hpp"
#include "driftguard/nn.hpp"
#include "json.hpp"
#include "support/expect.hpp"
#include "support/gradcheck.hpp"

using namespace driftguard;
using namespace driftguard::nn;

TEST_CASE("softmax and entropy basics") {
  auto p = softmax({0, 0, 0, 0, 0});
  for (double v : p) CHECK(v == doctest::Approx(0.2).epsilon(1e-15));
  CHECK(std::abs(entropy(p) - std::log(5.0)) < 1e-12);
  CHECK(entropy(std::array<double, 5>{1, 0, 0, 0, 0}) == 0.0);
  CHECK(std::abs(entropy(std::array<double, 5>{0.5, 0.5, 0, 0, 0}) - std::log(2.0)) < 1e-15);
  CHECK(code_of([] { entropy(std::array<double, 5>{0.5, 0.4, 0, 0, 0}); }) == Errc::NotADistribution);
  CHECK(code_of([] { entropy(std::array<double, 5>{1.5, -0.5, 0, 0, 0}); }) == Errc::NotADistribution);

  std::array<double, 5> z = {1.5, -2.0, 0.3, 4.0, -1.0};
  auto a = softmax(z);
  for (double& v : z) v += 123.0;
  auto b = softmax(z);
  double s = 0.0;
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(std::abs(a[i] - b[i]) < 1e-12);
    s += a[i];
  }
  CHECK(std::abs(s - 1.0) < 1e-12);
  // huge logits stay finite
  auto c = softmax({1000.0, 0, 0, 0, -1000.0});
  CHECK(c[0] == doctest::Approx(1.0));
}

TEST_CASE("entropy gradient matches finite differences") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g(0.0, 2.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::array<double, 5> z{};
    for (double& v : z) v = g(rng);
    const auto grad = entropy_grad_logits(softmax(z));
    for (std::size_t j = 0; j < 5; ++j) {
      auto zp = z, zm = z;
      zp[j] += 1e-5;
      zm[j] -= 1e-5;
      const double num = (entropy(softmax(zp)) - entropy(softmax(zm))) / 2e-5;
      CHECK(gradcheck::rel_error(grad[j], num) < 1e-6);
    }
  }
}

TEST_CASE("batch norm fixed point and train statistics") {
  BatchNorm1d bn("bn", 3, 0.1, 1e-5);
  bn.running_mean.value = {1.0, -2.0, 0.5};
  bn.running_var.value = {4.0, 0.25, 1.0};
  bn.beta.value = {0.3, -0.7, 1.1};
  bn.gamma.value = {2.0, 0.5, -1.0};
  Tensor x(2, 3, 4);
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t t = 0; t < 4; ++t) x.at(b, c, t) = bn.running_mean.value[c];
    }
  }
  BatchNorm1d::Cache cache;
  auto y = bn.forward(x, BnMode::Eval, cache);
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t t = 0; t < 4; ++t) CHECK(y.at(b, c, t) == bn.beta.value[c]);
    }
  }

  std::mt19937_64 rng(8);
  std::normal_distribution<double> g(5.0, 4.0);
  Tensor z(4, 3, 50);
  for (double& v : z.data) v = g(rng);
  BatchNorm1d::Cache tc;
  bn.forward(z, BnMode::Train, tc);
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0.0, v = 0.0;
    for (std::size_t b = 0; b < 4; ++b) {
      for (std::size_t t = 0; t < 50; ++t) m += tc.xhat.at(b, c, t);
    }
    m /= 200.0;
    for (std::size_t b = 0; b < 4; ++b) {
      for (std::size_t t = 0; t < 50; ++t) v += (tc.xhat.at(b, c, t) - m) * (tc.xhat.at(b, c, t) - m);
    }
    v /= 200.0;
    CHECK(std::abs(m) < 1e-6);
    CHECK(std::abs(v - 1.0) < 1e-5);
  }

  const auto before = bn.running_mean.value;
  bn.update_running(tc);
  for (std::size_t c = 0; c < 3; ++c) {
    CHECK(bn.running_mean.value[c] == doctest::Approx(0.9 * before[c] + 0.1 * tc.batch_mean[c]));
  }
}

TEST_CASE("attention pooling of a constant map returns the constant") {
  AttentionPool pool("attn", 3);
  pool.score.value = {0.4, -1.3, 2.0};
  Tensor h(2, 3, 7);
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t t = 0; t < 7; ++t) h.at(b, c, t) = 1.5 * static_cast<double>(c) - static_cast<double>(b);
    }
  }
  AttentionPool::Cache cache;
  auto out = pool.forward(h, cache);
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t c = 0; c < 3; ++c) {
      CHECK(out[b * 3 + c] == doctest::Approx(1.5 * static_cast<double>(c) - static_cast<double>(b)).epsilon(1e-14));
    }
  }
}

TEST_CASE("reference architecture") {
  Model m;
  m.init(1);
  CHECK(m.parameter_count() < 100000);
  Conv1d stem("s", 1, 16, 7, 2, false);
  Conv1d dw("d", 16, 16, 5, 2, true);
  std::size_t len = stem.out_length(3000);
  CHECK(len == 1500);
  for (int k = 0; k < 3; ++k) len = dw.out_length(len);
  CHECK(len == 188);
  for (const auto* bn : m.batch_norms()) {
    for (double v : bn->running_var.value) CHECK(v >= 0.0);
  }
}

TEST_CASE("forward errors and stale caches") {
  Model m(gradcheck::tiny_arch());
  m.init(2);
  CHECK(code_of([&] { m.forward(Tensor(0, 1, 64), BnMode::Eval); }) == Errc::EmptyBatch);
  CHECK(code_of([&] { m.forward(Tensor(1, 1, 64), BnMode::Train); }) == Errc::TrainModeBatchTooSmall);
  auto fr = m.forward(gradcheck::random_input(3, 64, 1), BnMode::Train);
  m.touch();
  std::vector<double> d(15, 0.1);
  CHECK(code_of([&] { m.backward(fr.cache, d); }) == Errc::StaleCache);
}

TEST_CASE("zero upstream gradient gives zero parameter gradients") {
  Model m(gradcheck::tiny_arch());
  gradcheck::randomize(m, 4);
  auto fr = m.forward(gradcheck::random_input(3, 64, 2), BnMode::Train, false);
  std::vector<double> d(15, 0.0);
  m.backward(fr.cache, d);
  for (const auto* p : m.params()) {
    for (double g : p->grad) CHECK(g == 0.0);
  }
}

TEST_CASE("gradients match central finite differences") {
  Model m(gradcheck::tiny_arch());
  gradcheck::randomize(m, 11);
  const Tensor x = gradcheck::random_input(3, 64, 5);
  const std::vector<StageLabel> y = {StageLabel::N2, StageLabel::W, StageLabel::REM};

  SUBCASE("focal loss, Train-mode BN") {
    auto w = gradcheck::check(m, x, BnMode::Train, gradcheck::focal(y, 2.0));
    INFO(w.param, "[", w.index, "] analytic ", w.analytic, " numeric ", w.numeric);
    CHECK(w.checked == m.parameter_count());
    CHECK(w.rel_err < 1e-4);
  }
  SUBCASE("focal loss, Eval-mode BN") {
    auto w = gradcheck::check(m, x, BnMode::Eval, gradcheck::focal(y, 2.0));
    INFO(w.param, "[", w.index, "] analytic ", w.analytic, " numeric ", w.numeric);
    CHECK(w.rel_err < 1e-4);
  }
  SUBCASE("entropy loss, Train-mode BN") {
    auto w = gradcheck::check(m, x, BnMode::Train, gradcheck::mean_entropy());
    INFO(w.param, "[", w.index, "] analytic ", w.analytic, " numeric ", w.numeric);
    CHECK(w.rel_err < 1e-4);
  }
}

TEST_CASE("BN-affine scope restricts gradients") {
  Model m(gradcheck::tiny_arch());
  gradcheck::randomize(m, 12);
  const Tensor x = gradcheck::random_input(4, 64, 6);
  auto fr = m.forward(x, BnMode::Train, false);
  const auto loss = gradcheck::mean_entropy()(fr.predictions);
  m.backward(fr.cache, loss.dlogits, GradScope::All);
  std::vector<std::vector<double>> full;
  for (const auto* p : m.params()) full.push_back(p->grad);
  m.backward(fr.cache, loss.dlogits, GradScope::BnAffine);
  std::size_t i = 0;
  for (const auto* p : m.params()) {
    if (p->is_bn_affine()) {
      CHECK(p->grad == full[i]);
    } else {
      for (double g : p->grad) CHECK(g == 0.0);
    }
    ++i;
  }
}

TEST_CASE("Eval outputs do not depend on batch composition") {
  Model m(gradcheck::tiny_arch());
  gradcheck::randomize(m, 13);
  const Tensor x = gradcheck::random_input(5, 64, 7);
  const auto all = m.predict(x);
  for (std::size_t b = 0; b < 5; ++b) {
    Tensor one(1, 1, 64);
    std::copy(x.row(b, 0), x.row(b, 0) + 64, one.data.begin());
    const auto p = m.predict(one);
    CHECK(p[0].logits == all[b].logits);
  }
  // Train forward with update_stats leaves Eval predictions consistent with
  // the new running stats only.
  auto before = m.predict(x);
  m.forward(x, BnMode::Train, false);
  CHECK(m.predict(x)[0].logits == before[0].logits);
}

TEST_CASE("checkpoint round trip") {
  Model m;
  m.init(21);
  gradcheck::randomize(m, 21);
  const std::string text = checkpoint_json(m);
  Model r = checkpoint_from_json(text);
  CHECK(full_hash(r) == full_hash(m));
  CHECK(backbone_hash(r) == backbone_hash(m));
  CHECK(r.arch() == m.arch());
  const Tensor x = gradcheck::random_input(2, 3000, 1);
  CHECK(r.predict(x)[1].logits == m.predict(x)[1].logits);

  auto doc = nlohmann::json::parse(text);
  auto bad = doc;
  bad["tensors"]["bogus"] = {{"shape", {1}}, {"values", {0.0}}};
  CHECK(code_of([&] { checkpoint_from_json(bad.dump()); }) == Errc::CheckpointFormat);
  auto missing = doc;
  missing["tensors"].erase("classifier.bias");
  CHECK(code_of([&] { checkpoint_from_json(missing.dump()); }) == Errc::CheckpointFormat);
  auto shape = doc;
  shape["tensors"]["classifier.bias"]["shape"] = {4};
  CHECK(code_of([&] { checkpoint_from_json(shape.dump()); }) == Errc::CheckpointFormat);
  CHECK(code_of([&] { checkpoint_from_json("{not json"); }) == Errc::CheckpointFormat);
}

TEST_CASE("backbone hash ignores BN parameters") {
  Model m;
  m.init(5);
  const auto h = backbone_hash(m);
  const auto f = full_hash(m);
  m.batch_norms()[1]->gamma.value[0] += 0.5;
  CHECK(backbone_hash(m) == h);
  CHECK(full_hash(m) != f);
  m.classifier().bias.value[0] += 1e-12;
  CHECK(backbone_hash(m) != h);
}
