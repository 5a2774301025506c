#include <algorithm>
#include <cmath>
#include <random>

#include "cli_internal.hpp"
#include "driftguard/edfio.hpp"
#include "driftguard/nn.hpp"
#include "driftguard/synth.hpp"
#include "driftguard/train.hpp"

namespace driftguard::cli {

namespace {

constexpr std::uint64_t kTrainSalt = 0x747261696e000000ULL;
constexpr std::uint64_t kStreamSalt = 0x73747265616d0000ULL;

struct StreamRun {
  tta::StreamResult result;
  bool backbone_unchanged{true};
};

// Labels never reach the adapter: only the samples are pushed.
StreamRun stream_recording(const nn::Model& source, const Recording& rec, const tta::AdaptConfig& cfg) {
  nn::Model m = source;
  StreamRun run;
  std::vector<std::vector<double>> samples;
  samples.reserve(rec.epochs.size());
  for (const auto& e : rec.epochs) samples.push_back(e.samples);
  run.result = tta::adapt_stream(m, samples, cfg);
  run.backbone_unchanged = nn::backbone_hash(m) == nn::backbone_hash(source);
  return run;
}

double stream_accuracy(const nn::Model& source, const Recording& rec, const tta::AdaptConfig& cfg) {
  const auto run = stream_recording(source, rec, cfg);
  std::size_t hit = 0, n = 0;
  for (std::size_t i = 0; i < rec.epochs.size(); ++i) {
    if (!rec.epochs[i].label) continue;
    ++n;
    hit += run.result.outputs[i].raw == *rec.epochs[i].label ? 1 : 0;
  }
  return n ? static_cast<double>(hit) / static_cast<double>(n) : 0.0;
}

Json log_json(const train::EpochLog& l) {
  Json j;
  j["epoch"] = l.epoch;
  j["train_loss"] = l.train_loss;
  j["train_accuracy"] = l.train_accuracy;
  j["val_accuracy"] = l.val_accuracy;
  j["val_macro_f1"] = l.val_macro_f1;
  j["lr"] = l.lr;
  j["improved"] = l.improved;
  return j;
}

}  // namespace

void cmd_train(const TrainOptions& o, std::ostream& log) {
  if (!(o.val_fraction >= 0.0 && o.val_fraction < 1.0)) throw Failure(kExitConfig, "--val-fraction must be in [0, 1)");
  DataSource src = o.data;
  src.salt = kTrainSalt;
  src.synth_prefix = "train";
  auto recs = load_recordings(src, {});
  std::erase_if(recs, [](const Recording& r) { return !r.labeled; });
  if (recs.empty()) throw Error(Errc::EmptyDataset, "no labeled recordings");

  std::size_t n_val = 0;
  if (o.val_fraction > 0.0 && recs.size() >= 2) {
    n_val = static_cast<std::size_t>(std::llround(o.val_fraction * static_cast<double>(recs.size())));
    n_val = std::clamp<std::size_t>(n_val, 1, recs.size() - 1);
  }
  const std::size_t n_train = recs.size() - n_val;
  std::vector<dsp::Epoch> train_set, val_set;
  Json subjects_train = Json::array(), subjects_val = Json::array();
  for (std::size_t i = 0; i < recs.size(); ++i) {
    auto& dst = i < n_train ? train_set : val_set;
    dst.insert(dst.end(), recs[i].epochs.begin(), recs[i].epochs.end());
    (i < n_train ? subjects_train : subjects_val).push_back(recs[i].subject);
  }

  train::TrainConfig tc;
  tc.max_epochs = o.epochs;
  tc.batch_size = o.batch_size;
  tc.lr = o.lr;
  tc.gamma = o.gamma;
  tc.warmup_epochs = o.warmup;
  tc.patience = o.patience;
  tc.seed = o.data.seed;
  tc.class_balanced = o.class_balance;
  tc.use_prior_init = o.prior_init;
  tc.augment = o.augment;

  const fs::path out(o.out);
  fs::create_directories(out);
  nn::Model model;
  model.init(o.data.seed);
  std::string log_lines;
  const auto res = train::train_source(model, train_set, val_set, tc, [&](const train::EpochLog& l) {
    log << "epoch " << l.epoch << "  loss " << l.train_loss << "  train acc " << l.train_accuracy;
    if (!val_set.empty()) log << "  val acc " << l.val_accuracy << "  val F1 " << l.val_macro_f1;
    log << "\n";
    log_lines += log_json(l).dump() + "\n";
  });
  write_text(out / "train_log.jsonl", log_lines);
  nn::save_checkpoint(model, (out / "checkpoint.json").string());

  // Adaptation hyperparameters picked on validation streams and frozen into
  // the sidecar for every later adapt run.
  tta::AdaptConfig cfg;
  Json selection = nullptr;
  if (!o.select_lr.empty() || !o.select_bn_momentum.empty()) {
    if (n_val == 0) throw Failure(kExitConfig, "hyperparameter selection needs validation subjects");
    auto drifted = load_recordings(src, parse_drifts(o.val_drift));
    std::erase_if(drifted, [](const Recording& r) { return !r.labeled; });
    const std::vector<Recording> val_recs(drifted.begin() + static_cast<std::ptrdiff_t>(n_train), drifted.end());
    const auto lrs = o.select_lr.empty() ? std::vector<double>{cfg.tta_lr} : o.select_lr;
    const auto moms = o.select_bn_momentum.empty() ? std::vector<double>{cfg.bn_momentum} : o.select_bn_momentum;
    Json cands = Json::array();
    double best = -1.0;
    tta::AdaptConfig chosen = cfg;
    for (double m : moms) {
      for (double lr : lrs) {
        tta::AdaptConfig c = cfg;
        c.mode = tta::Mode::Tent;
        c.bn_momentum = m;
        c.tta_lr = lr;
        c.validate();
        double score = 0.0;
        for (const auto& r : val_recs) score += stream_accuracy(model, r, c) / static_cast<double>(val_recs.size());
        cands.push_back({{"bn_momentum", m}, {"tta_lr", lr}, {"accuracy", score}});
        log << "select bn_momentum " << m << " lr " << lr << ": val acc " << score << "\n";
        if (score > best) {
          best = score;
          chosen = c;
        }
      }
    }
    cfg.bn_momentum = chosen.bn_momentum;
    cfg.tta_lr = chosen.tta_lr;
    selection = {{"split", "validation"}, {"mode", "tent"}, {"metric", "accuracy"},
                 {"drift", o.val_drift}, {"candidates", cands}};
  }

  Json side;
  side["format"] = "driftguard-adapt";
  side["version"] = 1;
  side["checkpoint_sha256"] = nn::full_hash(model);
  side["adapt"] = adapt_config_json(cfg);
  side["selection"] = selection;
  write_json(sidecar_path(out / "checkpoint.json"), side);

  Json summary;
  summary["train_subjects"] = subjects_train;
  summary["val_subjects"] = subjects_val;
  summary["epochs_run"] = res.log.size();
  summary["best_epoch"] = res.best_epoch;
  summary["best_val_macro_f1"] = res.best_val_macro_f1;
  summary["parameters"] = model.parameter_count();
  summary["checkpoint_sha256"] = nn::full_hash(model);
  write_json(out / "train_summary.json", summary);
  log << "checkpoint " << (out / "checkpoint.json").string() << "\n";
}

void cmd_adapt(AdaptOptions& o, std::ostream& log) {
  const nn::Model source = nn::load_checkpoint(o.checkpoint);
  tta::AdaptConfig cfg;
  std::string origin = "defaults";
  if (const fs::path sc = sidecar_path(o.checkpoint); fs::exists(sc)) {
    const Json j = read_json(sc, kExitCheckpoint);
    if (!j.is_object() || j.value("format", "") != "driftguard-adapt" || !j.contains("adapt")) {
      throw Failure(kExitCheckpoint, sc.string() + ": not an adaptation sidecar");
    }
    if (j.value("checkpoint_sha256", "") != nn::full_hash(source)) {
      throw Failure(kExitCheckpoint, sc.string() + " was written for a different checkpoint");
    }
    try {
      cfg = adapt_config_from_json(j["adapt"]);
    } catch (const Error& e) {
      throw Failure(kExitCheckpoint, sc.string() + ": " + e.what());
    }
    origin = "sidecar";
  }
  o.adapt.apply(cfg);
  cfg.mode = tta::parse_mode(o.mode);
  cfg.validate();
  o.adapt.fill_from(cfg);

  DataSource src = o.data;
  src.salt = kStreamSalt;
  src.synth_prefix = "stream";
  const auto recs = load_recordings(src, parse_drifts(o.drift));

  const fs::path out(o.out);
  fs::create_directories(out);
  std::string preds = predictions_header();
  std::string trace;
  Json subjects = Json::array();
  std::size_t tot_epochs = 0, tot_batches = 0, tot_updates = 0, tot_resets = 0;
  bool backbone_ok = true;
  for (const auto& rec : recs) {
    if (rec.subject.find(',') != std::string::npos) throw Failure(kExitData, "subject id with a comma: " + rec.subject);
    const auto run = stream_recording(source, rec, cfg);
    const auto& r = run.result;
    for (std::size_t i = 0; i < r.outputs.size(); ++i) {
      const auto& e = rec.epochs[i];
      if (rec.labeled && !e.label) continue;  // excluded epoch: adapted on, not reported
      PredictionRow row;
      row.subject = rec.subject;
      row.epoch = r.outputs[i].index;
      row.raw = r.outputs[i].raw;
      row.smoothed = r.outputs[i].smoothed;
      row.confidence = r.outputs[i].prediction.probs[static_cast<std::size_t>(to_index(row.raw))];
      row.probs = r.outputs[i].prediction.probs;
      row.label = e.label;
      preds += prediction_line(row);
    }
    for (const auto& t : r.trace) {
      Json j;
      j["subject"] = rec.subject;
      const Json tj = tta::trace_json(t);
      for (const auto& [k, v] : tj.items()) j[k] = v;
      trace += j.dump() + "\n";
    }
    subjects.push_back({{"subject", rec.subject},
                        {"epochs", rec.epochs.size()},
                        {"batches", r.state.batches},
                        {"updates_applied", r.state.updates_applied},
                        {"resets", r.state.resets},
                        {"backbone_unchanged", run.backbone_unchanged}});
    log << rec.subject << ": " << rec.epochs.size() << " epochs, " << r.state.updates_applied << " updates, "
        << r.state.resets << " resets\n";
    tot_epochs += rec.epochs.size();
    tot_batches += r.state.batches;
    tot_updates += r.state.updates_applied;
    tot_resets += r.state.resets;
    backbone_ok = backbone_ok && run.backbone_unchanged;
  }
  write_text(out / "predictions.csv", preds);
  write_text(out / "trace.jsonl", trace);

  Json summary;
  summary["mode"] = o.mode;
  summary["hyperparameters"] = origin;
  summary["adapt"] = adapt_config_json(cfg);
  summary["drift"] = o.drift;
  summary["subjects"] = subjects;
  summary["epochs"] = tot_epochs;
  summary["batches"] = tot_batches;
  summary["updates_applied"] = tot_updates;
  summary["resets"] = tot_resets;
  summary["backbone_unchanged"] = backbone_ok;
  write_json(out / "summary.json", summary);
}

void cmd_synth(const SynthOptions& o, std::ostream& log) {
  if (o.subjects == 0 || o.epochs == 0) throw Failure(kExitConfig, "--subjects and --epochs must be positive");
  const auto drifts = parse_drifts(o.drift);
  std::mt19937_64 rng(o.seed);
  const auto model = synth::StageModel::defaults();
  const auto trans = synth::default_transition(o.stay);
  const fs::path out(o.out);
  fs::create_directories(out);
  for (std::size_t i = 0; i < o.subjects; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "synth-%03zu", i);
    auto rec = synth::gen_subject(id, o.epochs, model, trans, rng);
    apply_drifts(rec.samples, rec.fs_hz, drifts, o.seed + 7919 * (i + 1));
    synth::quantize_to_edf(rec.samples);
    const auto bytes = edfio::write_edf(synth::to_edf(rec));
    edfio::write_file((out / (std::string(id) + ".edf")).string(), bytes);
    write_text(out / (std::string(id) + ".labels.csv"),
               labels_csv(std::vector<MaybeStage>(rec.hypnogram.begin(), rec.hypnogram.end())));
    log << id << ".edf: " << o.epochs << " epochs\n";
  }
}

}  // namespace driftguard::cli
