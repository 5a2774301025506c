// Acceptance checks. One PASS/FAIL line per criterion; exit status 1 when any
// criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "driftguard/cli.hpp"
#include "driftguard/edfio.hpp"
#include "driftguard/metrics.hpp"
#include "driftguard/nn.hpp"
#include "driftguard/synth.hpp"
#include "driftguard/tta.hpp"
#include "json.hpp"
#include "support/gradcheck.hpp"
#include "support/metric_oracles.hpp"
#include "support/shift_experiment.hpp"

namespace fs = std::filesystem;
using namespace driftguard;
using Json = nlohmann::ordered_json;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;

void verdict(const std::string& name, bool pass, const std::string& detail) {
  std::printf("%s  %s: %s\n", pass ? "PASS" : "FAIL", name.c_str(), detail.c_str());
  std::fflush(stdout);
  failures += pass ? 0 : 1;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::vector<std::vector<double>> noise_epochs(std::size_t n, std::size_t len, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<std::vector<double>> out(n, std::vector<double>(len));
  for (auto& e : out) {
    for (double& v : e) v = g(rng);
  }
  return out;
}

std::vector<std::vector<double>> structured_epochs(std::size_t n, std::size_t len, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.2, 3.0);
  std::vector<std::vector<double>> out(n, std::vector<double>(len));
  for (auto& e : out) {
    const double a = u(rng), f = u(rng);
    for (std::size_t t = 0; t < len; ++t) e[t] = a * std::sin(f * static_cast<double>(t)) + 0.5 * g(rng);
  }
  return out;
}

// ------------------------------------------------------------------ metrics

void metric_oracle() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(77);
  std::uniform_int_distribution<std::size_t> len(1, 200);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto inst = oracle::random_instance(rng, len(rng));
    const auto r = metrics::evaluate(inst.y_true, inst.y_pred, inst.conf);
    const auto o = oracle::brute_force(inst);
    for (double d : {r.accuracy - o.accuracy, r.macro_f1 - o.macro_f1, r.weighted_f1 - o.weighted_f1,
                     r.balanced_accuracy - o.balanced_accuracy, r.kappa - o.kappa, r.mcc - o.mcc, r.ece - o.ece}) {
      worst = std::max(worst, std::isnan(d) ? INFINITY : std::abs(d));
    }
  }
  const double secs = seconds_since(t0);
  verdict("metric oracle equivalence", worst < 1e-9 && secs < 10.0,
          fmt("1000 instances, max |diff| %.3g (tol 1e-9), %.2f s (limit 10 s)", worst, secs));
}

void worked_values() {
  auto lab = [](std::initializer_list<int> v) {
    std::vector<StageLabel> out;
    for (int i : v) out.push_back(stage_from_index(i));
    return out;
  };
  const auto cm = metrics::confusion(lab({0, 0, 1, 1}), lab({0, 1, 1, 1}));
  const double k = metrics::kappa(cm).kappa;
  const double f1 = metrics::f1_suite(cm).macro_f1;
  const double e = metrics::ece(std::vector<double>{0.8, 0.6}, {true, false}, 15).ece;
  const double h = nn::entropy(std::array<double, kNumStages>{0.2, 0.2, 0.2, 0.2, 0.2});
  const bool ok = std::abs(k - 0.5) < 1e-12 && std::abs(f1 - 11.0 / 15.0) < 1e-12 && std::abs(e - 0.4) < 1e-12 &&
                  std::abs(h - std::log(5.0)) < 1e-12;
  verdict("worked metric values", ok,
          fmt("kappa %.15g (0.5), macro-F1 %.15g (11/15), ECE %.15g (0.4), H(uniform) - ln 5 = %.3g", k, f1, e,
              h - std::log(5.0)));
}

// ------------------------------------------------------------------ gradients

void gradients() {
  const auto t0 = Clock::now();
  nn::Model m(gradcheck::tiny_arch());
  gradcheck::randomize(m, 11);
  const nn::Tensor x = gradcheck::random_input(3, 64, 5);
  const std::vector<StageLabel> y = {StageLabel::N2, StageLabel::W, StageLabel::REM};
  struct Case {
    const char* name;
    nn::BnMode mode;
    gradcheck::LossFn loss;
  };
  const Case cases[] = {{"focal/train-BN", nn::BnMode::Train, gradcheck::focal(y, 2.0)},
                        {"focal/eval-BN", nn::BnMode::Eval, gradcheck::focal(y, 2.0)},
                        {"entropy/train-BN", nn::BnMode::Train, gradcheck::mean_entropy()}};
  double worst = 0.0;
  std::size_t checked = 0;
  std::string where;
  for (const auto& c : cases) {
    const auto w = gradcheck::check(m, x, c.mode, c.loss);
    checked += w.checked;
    if (w.rel_err >= worst) {
      worst = w.rel_err;
      where = std::string(c.name) + " " + w.param;
    }
  }
  const double secs = seconds_since(t0);
  verdict("gradient correctness", worst < 1e-4 && secs < 60.0,
          fmt("%zu parameter entries over %zu parameters x 3 losses, worst rel err %.3g at %s (tol 1e-4), %.2f s",
              checked, m.parameter_count(), worst, where.c_str(), secs));
}

// ------------------------------------------------------------------ shift

void synthetic_shift() {
  const auto t0 = Clock::now();
  const shift::Setup st;
  constexpr int kSeeds = 10;
  double clean = 0, frozen = 0, bn = 0, tent = 0, worst_clean = 1.0;
  int tent_wins = 0;
  for (int s = 0; s < kSeeds; ++s) {
    const auto o = shift::run_seed(static_cast<std::uint64_t>(s), st);
    std::printf("      seed %d: clean %.4f frozen %.4f bn-only %.4f tent %.4f\n", s, o.clean, o.frozen, o.bn_only,
                o.tent);
    std::fflush(stdout);
    clean += o.clean;
    frozen += o.frozen;
    bn += o.bn_only;
    tent += o.tent;
    worst_clean = std::min(worst_clean, o.clean);
    tent_wins += o.tent > o.bn_only ? 1 : 0;
  }
  clean /= kSeeds;
  frozen /= kSeeds;
  bn /= kSeeds;
  tent /= kSeeds;
  const double secs = seconds_since(t0);
  const double drop = clean - frozen;
  const double recovered = drop > 0 ? (bn - frozen) / drop : 0.0;
  verdict("synthetic shift: clean accuracy >= 90%", clean >= 0.90,
          fmt("mean clean %.4f, lowest seed %.4f", clean, worst_clean));
  verdict("synthetic shift (a): frozen drops >= 15 points", drop >= 0.15,
          fmt("clean %.4f, frozen %.4f, drop %.2f points", clean, frozen, 100.0 * drop));
  verdict("synthetic shift (b): BN-only recovers >= 50% of the drop", recovered >= 0.5,
          fmt("bn-only %.4f, recovered %.1f%%", bn, 100.0 * recovered));
  verdict("synthetic shift (c): Tent >= BN-only - 1 point and strictly greater in >= 6/10 seeds",
          tent >= bn - 0.01 && tent_wins >= 6,
          fmt("tent %.4f vs bn-only %.4f (diff %+.2f points), strictly greater in %d/10 seeds", tent, bn,
              100.0 * (tent - bn), tent_wins));
  verdict("synthetic shift runtime < 15 min", secs < 900.0, fmt("%.1f s for 10 seeds", secs));
}

// ------------------------------------------------------------------ adaptation safeguards

void gate() {
  bool ok = true;
  std::string detail;
  for (tta::Mode mode : {tta::Mode::Tent, tta::Mode::BnOnly}) {
    nn::Model m;
    m.init(10);
    const auto eps = noise_epochs(64, kEpochSamples, 10);
    tta::AdaptConfig cfg;
    cfg.mode = mode;
    const std::string bb = nn::backbone_hash(m);
    const auto res = tta::adapt_stream(m, eps, cfg);
    const bool same = nn::backbone_hash(m) == bb;
    ok = ok && res.state.updates_applied == 0 && same;
    detail += fmt("%s: updates_applied %zu, backbone %s; ", tta::mode_name(mode).c_str(), res.state.updates_applied,
                  same ? "unchanged" : "CHANGED");
  }
  verdict("gate on white noise", ok, detail + "64 epochs of unit white noise");
}

void reset() {
  nn::Model m(gradcheck::tiny_arch());
  gradcheck::randomize(m, 2);
  tta::AdaptConfig cfg;
  tta::AdaptState s = tta::init_state(m);
  for (auto* bn : m.batch_norms()) {
    for (double& v : bn->beta.value) v += 0.01;
    for (double& v : bn->running_mean.value) v += 0.02;
  }
  m.touch();
  const bool quiet = !tta::snapshot_update_and_maybe_reset(m, s, cfg, true).fired;
  const tta::BnSnapshot snap = s.snapshot;
  auto* layer = m.batch_norms()[1];
  for (double& v : layer->gamma.value) v *= 100.0;
  m.touch();
  const auto rc = tta::snapshot_update_and_maybe_reset(m, s, cfg, true);
  const auto live = tta::capture_bn(m);
  const bool exact = live.gamma == snap.gamma && live.beta == snap.beta && live.mean == snap.mean && live.var == snap.var;
  verdict("reset after x100 gamma", quiet && rc.fired && rc.reason == tta::ResetReason::Drift && exact,
          fmt("reset %s, live BN parameters %s the snapshot bit for bit", rc.fired ? "fired" : "did not fire",
              exact ? "equal" : "differ from"));
}

void causality() {
  std::mt19937_64 rng(12);
  std::uniform_int_distribution<std::size_t> len(3, 30);
  std::uniform_int_distribution<int> mode(0, 2);
  std::uniform_int_distribution<std::size_t> mb(2, 6);
  std::size_t prefixes = 0, mismatched = 0;
  for (int s = 0; s < 100; ++s) {
    const auto eps = structured_epochs(len(rng), 64, rng);
    tta::AdaptConfig cfg;
    cfg.mode = static_cast<tta::Mode>(mode(rng));
    cfg.micro_batch = mb(rng);
    cfg.tta_lr = 1e-2;
    cfg.h_min = 0.0;
    cfg.h_max = tta::kLn5;
    nn::Model base(gradcheck::tiny_arch());
    gradcheck::randomize(base, 2000 + static_cast<std::uint64_t>(s));
    nn::Model full_m = base;
    const auto full = tta::adapt_stream(full_m, eps, cfg).outputs;
    for (std::size_t t = 1; t < eps.size(); ++t) {
      nn::Model m = base;
      const auto part = tta::adapt_stream(m, std::span(eps).first(t), cfg).outputs;
      ++prefixes;
      bool same = part.size() == t;
      for (std::size_t i = 0; same && i < t; ++i) {
        same = part[i].prediction.probs == full[i].prediction.probs && part[i].raw == full[i].raw &&
               part[i].smoothed == full[i].smoothed;
      }
      mismatched += same ? 0 : 1;
    }
  }
  verdict("causality", mismatched == 0,
          fmt("100 random streams, %zu prefixes, %zu differ from the full-stream outputs", prefixes, mismatched));
}

void latency_memory() {
  nn::Model m;
  m.init(14);
  auto eps = noise_epochs(64, kEpochSamples, 14);
  for (auto& e : eps) {
    for (std::size_t t = 0; t < e.size(); ++t) e[t] += 2.0 * std::sin(0.3 * static_cast<double>(t));
  }
  tta::AdaptConfig cfg;
  cfg.h_min = 0.0;
  cfg.h_max = tta::kLn5;
  tta::StreamAdapter ad(m, cfg);
  const auto t0 = Clock::now();
  for (auto& e : eps) ad.push(e);
  ad.finish();
  const double ms = 1000.0 * seconds_since(t0) / 64.0;
  const std::size_t bytes = ad.state_bytes();
  verdict("latency/memory", ms < 100.0 && bytes < 1024 * 1024 && ad.state().updates_applied == 8,
          fmt("Tent %.2f ms per epoch (limit 100), %zu updates, adaptation state %zu bytes (limit 1 MiB)", ms,
              ad.state().updates_applied, bytes));
}

// ------------------------------------------------------------------ files

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

int dg(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  if (code != 0) std::printf("      driftguard %s exited %d: %s", args[0].c_str(), code, err.str().c_str());
  return code;
}

void edf_round_trip(const fs::path& scratch) {
  bool ok = true;
  std::mt19937_64 rng(6);
  auto rec = synth::gen_subject("sub01", 40, synth::StageModel::defaults(), synth::default_transition(), rng);
  synth::quantize_to_edf(rec.samples);
  const auto bytes = edfio::write_edf(synth::to_edf(rec));
  const auto meta = edfio::parse_header(bytes);
  const auto sig = edfio::read_signal(bytes, meta, synth::kEdfSignalLabel);
  const auto hyp = edfio::align_hypnogram(edfio::read_annotations(bytes, meta), rec.hypnogram.size());
  ok = ok && sig.samples == rec.samples && hyp == std::vector<MaybeStage>(rec.hypnogram.begin(), rec.hypnogram.end());

  // files written by the synth command
  const fs::path dir = scratch / "synth";
  ok = ok && dg({"synth", "--out", dir.string(), "--subjects", "2", "--epochs", "100", "--seed", "3"}) == 0;
  std::size_t files = 0;
  for (const char* s : {"synth-000", "synth-001"}) {
    if (!fs::exists(dir / (std::string(s) + ".edf"))) {
      ok = false;
      continue;
    }
    const auto b = edfio::read_file((dir / (std::string(s) + ".edf")).string());
    const auto mt = edfio::parse_header(b);
    const auto x = edfio::read_signal(b, mt, synth::kEdfSignalLabel);
    // re-encoding the decoded samples reproduces the file's sample bytes
    edfio::EdfWriteSpec again;
    again.signals.push_back({mt.signals[0], x.samples});
    again.with_annotation_signal = false;
    const auto rb = edfio::write_edf(again);
    const auto rmeta = edfio::parse_header(rb);
    ok = ok && edfio::read_signal(rb, rmeta, synth::kEdfSignalLabel).samples == x.samples;
    const auto h = edfio::align_hypnogram(edfio::read_annotations(b, mt), 100);
    std::istringstream labels(slurp(dir / (std::string(s) + ".labels.csv")));
    std::string line;
    std::getline(labels, line);
    for (std::size_t i = 0; i < h.size() && std::getline(labels, line); ++i) {
      const std::string stage = line.substr(line.find(',') + 1);
      ok = ok && h[i] && stage == stage_name(*h[i]);
    }
    ++files;
  }
  const bool map_ok = edfio::map_stage("Sleep stage 4") == MaybeStage(StageLabel::N3);
  verdict("EDF round trip", ok && files == 2 && map_ok,
          fmt("samples and hypnogram identical after write/read; %zu synth files parsed; map_stage(\"Sleep stage 4\") %s",
              files, map_ok ? "= N3" : "!= N3"));
}

void report_schema(const fs::path& scratch) {
  bool ok = true;
  const std::string ckpt = (scratch / "train" / "checkpoint.json").string();
  ok = ok && dg({"train", "--synth-subjects", "4", "--synth-epochs", "40", "--epochs", "2", "--out",
                 (scratch / "train").string()}) == 0;
  std::vector<std::string> report = {"report", "--out", (scratch / "report").string(), "--runs"};
  for (const char* mode : {"frozen", "bn-only", "tent"}) {
    const fs::path run = scratch / mode;
    ok = ok && dg({"adapt", "--checkpoint", ckpt, "--synth-subjects", "2", "--synth-epochs", "40", "--mode", mode,
                   "--out", run.string()}) == 0;
    report.push_back(run.string());
  }
  ok = ok && dg({"eval", "--predictions", "test=" + (scratch / "tent" / "predictions.csv").string(), "--predictions",
                 "frozen=" + (scratch / "frozen" / "predictions.csv").string(), "--out",
                 (scratch / "eval").string()}) == 0;
  ok = ok && dg(report) == 0;
  if (!ok) {
    verdict("report schema", false, "a CLI command failed");
    return;
  }
  const std::vector<std::string> want(metrics::kMetricKeys.begin(), metrics::kMetricKeys.end());
  const Json ev = Json::parse(slurp(scratch / "eval" / "report.json"));
  bool eval_ok = ev["splits"].size() == 2;
  for (const auto& [name, m] : ev["splits"].items()) {
    std::vector<std::string> keys;
    for (const auto& [k, v] : m.items()) keys.push_back(k);
    eval_ok = eval_ok && keys == want;
  }
  const Json rp = Json::parse(slurp(scratch / "report" / "report.json"));
  bool rep_ok = rp["rows"].size() == 3 && rp["columns"] == Json(want);
  const char* modes[] = {"frozen", "bn-only", "tent"};
  for (std::size_t i = 0; rep_ok && i < 3; ++i) {
    rep_ok = rp["rows"][i]["mode"] == modes[i];
    for (const auto& k : want) rep_ok = rep_ok && rp["rows"][i].contains(k);
  }
  rep_ok = rep_ok && fs::exists(scratch / "report" / "comparison.csv") && fs::exists(scratch / "report" / "comparison.md");
  std::string cols;
  for (const auto& k : want) cols += (cols.empty() ? "" : " ") + k;
  verdict("report schema", eval_ok && rep_ok,
          fmt("eval splits carry exactly {%s}: %s; report has frozen/bn-only/tent rows: %s", cols.c_str(),
              eval_ok ? "yes" : "no", rep_ok ? "yes" : "no"));
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  bool skip_shift = false;
  for (int i = 1; i < argc; ++i) skip_shift = skip_shift || std::string(argv[i]) == "--skip-shift";
  const fs::path scratch = fs::temp_directory_path() / "driftguard_acceptance";
  fs::remove_all(scratch);
  fs::create_directories(scratch);

  metric_oracle();
  worked_values();
  gradients();
  gate();
  reset();
  causality();
  latency_memory();
  edf_round_trip(scratch);
  report_schema(scratch);
  if (!skip_shift) synthetic_shift();

  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
