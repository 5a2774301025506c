#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "cli_internal.hpp"
#include "driftguard/edfio.hpp"
#include "driftguard/synth.hpp"

namespace driftguard::cli {

std::string read_text(const fs::path& path, int code_if_missing) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Failure(code_if_missing, "cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, std::string_view text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw Failure(kExitFailure, "cannot write " + path.string());
}

Json read_json(const fs::path& path, int code_if_bad) {
  try {
    return Json::parse(read_text(path, code_if_bad));
  } catch (const Json::parse_error& e) {
    throw Failure(code_if_bad, path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const Json& j) { write_text(path, j.dump(2) + "\n"); }

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const auto p = s.find(sep, start);
    out.emplace_back(s.substr(start, p == std::string_view::npos ? std::string_view::npos : p - start));
    if (p == std::string_view::npos) break;
    start = p + 1;
  }
  return out;
}

std::string num(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

// ------------------------------------------------------------------ data

std::vector<synth::DriftSpec> parse_drifts(const std::vector<std::string>& texts) {
  std::vector<synth::DriftSpec> out;
  for (const auto& t : texts) out.push_back(parse_drift_spec(t));
  return out;
}

void apply_drifts(std::vector<double>& samples, double fs_hz, const std::vector<synth::DriftSpec>& drifts,
                  std::uint64_t seed) {
  const double len = fs_hz * kEpochSeconds;
  if (drifts.empty()) return;
  if (std::abs(len - std::round(len)) > 1e-9) {
    throw Error(Errc::InvalidConfig, "drift needs an integer number of samples per epoch");
  }
  for (std::size_t k = 0; k < drifts.size(); ++k) {
    std::mt19937_64 rng(seed + 0x2545F4914F6CDD1DULL * (k + 1));
    samples = synth::inject_drift(samples, drifts[k], rng, fs_hz, static_cast<std::size_t>(std::llround(len)));
  }
}

namespace {

bool is_stage_text(const std::string& t) { return t.rfind("Sleep stage", 0) == 0 || t == "Movement time"; }

std::vector<edfio::Annotation> stage_annotations(const std::vector<edfio::Annotation>& all) {
  std::vector<edfio::Annotation> out;
  for (const auto& a : all) {
    if (is_stage_text(a.text)) out.push_back(a);
  }
  return out;
}

bool has_annotation_signal(const edfio::RecordingMeta& meta) {
  return std::any_of(meta.signals.begin(), meta.signals.end(), [](const auto& s) { return s.is_annotation(); });
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

// PSG "SC4001E0-PSG.edf" pairs with the hypnogram "SC4001EC-Hypnogram.edf":
// same name up to the last character before "-PSG".
std::optional<fs::path> hypnogram_partner(const fs::path& psg, const std::vector<fs::path>& hypnograms) {
  std::string stem = psg.stem().string();
  if (const auto p = lower(stem).rfind("-psg"); p != std::string::npos) stem = stem.substr(0, p);
  const std::string key = stem.size() > 1 ? stem.substr(0, stem.size() - 1) : stem;
  for (const auto& h : hypnograms) {
    if (h.filename().string().rfind(key, 0) == 0) return h;
  }
  return std::nullopt;
}

std::string subject_of(const fs::path& psg) {
  std::string stem = psg.stem().string();
  if (const auto p = lower(stem).rfind("-psg"); p != std::string::npos) stem = stem.substr(0, p);
  return stem;
}

Recording finish(std::string subject, const SampleSeries& raw, const std::vector<MaybeStage>* labels,
                 const std::vector<edfio::Annotation>* annotations) {
  Recording r;
  r.subject = std::move(subject);
  dsp::PreprocessConfig pc;
  r.epochs = dsp::preprocess_record(raw, pc, r.subject);
  if (labels != nullptr) {
    for (std::size_t i = 0; i < r.epochs.size() && i < labels->size(); ++i) r.epochs[i].label = (*labels)[i];
    r.labeled = true;
  } else if (annotations != nullptr) {
    const auto aligned = edfio::align_hypnogram(*annotations, r.epochs.size());
    for (std::size_t i = 0; i < r.epochs.size(); ++i) r.epochs[i].label = aligned[i];
    r.labeled = true;
  }
  return r;
}

}  // namespace

std::vector<Recording> load_recordings(const DataSource& src, const std::vector<synth::DriftSpec>& drifts) {
  std::vector<Recording> out;
  if (src.synth_subjects > 0) {
    if (!src.data_dir.empty()) throw Failure(kExitConfig, "give either --data or --synth-subjects, not both");
    std::mt19937_64 rng(src.seed ^ src.salt);
    const auto model = synth::StageModel::defaults();
    const auto trans = synth::default_transition();
    for (std::size_t i = 0; i < src.synth_subjects; ++i) {
      char id[32];
      std::snprintf(id, sizeof id, "%s-%03zu", src.synth_prefix.c_str(), i);
      auto rec = synth::gen_subject(id, src.synth_epochs, model, trans, rng);
      apply_drifts(rec.samples, rec.fs_hz, drifts, src.seed + 7919 * (i + 1));
      std::vector<MaybeStage> labels(rec.hypnogram.begin(), rec.hypnogram.end());
      out.push_back(finish(rec.subject_id, {rec.samples, rec.fs_hz}, &labels, nullptr));
    }
    return out;
  }

  if (src.data_dir.empty()) throw Failure(kExitConfig, "no data source: give --data or --synth-subjects");
  if (!fs::is_directory(src.data_dir)) throw Failure(kExitData, "data directory " + src.data_dir + " not found");
  std::vector<fs::path> psg, hyp;
  for (const auto& e : fs::directory_iterator(src.data_dir)) {
    if (!e.is_regular_file() || lower(e.path().extension().string()) != ".edf") continue;
    (lower(e.path().filename().string()).find("hypnogram") != std::string::npos ? hyp : psg).push_back(e.path());
  }
  std::sort(psg.begin(), psg.end());
  std::sort(hyp.begin(), hyp.end());
  if (psg.empty()) throw Failure(kExitData, "no EDF recordings in " + src.data_dir);

  for (std::size_t i = 0; i < psg.size(); ++i) {
    const auto bytes = edfio::read_file(psg[i].string());
    const auto meta = edfio::parse_header(bytes);
    SampleSeries raw = edfio::read_signal(bytes, meta, src.channel);
    apply_drifts(raw.samples, raw.fs_hz, drifts, src.seed + 7919 * (i + 1));
    std::optional<std::vector<edfio::Annotation>> anns;
    if (has_annotation_signal(meta)) {
      anns = stage_annotations(edfio::read_annotations(bytes, meta));
    }
    if ((!anns || anns->empty())) {
      if (const auto partner = hypnogram_partner(psg[i], hyp)) {
        const auto hb = edfio::read_file(partner->string());
        anns = stage_annotations(edfio::read_annotations(hb, edfio::parse_header(hb)));
      }
    }
    const bool labeled = anns && !anns->empty();
    out.push_back(finish(subject_of(psg[i]), raw, nullptr, labeled ? &*anns : nullptr));
  }
  std::sort(out.begin(), out.end(), [](const Recording& a, const Recording& b) { return a.subject < b.subject; });
  return out;
}

// ------------------------------------------------------------------ predictions

std::string predictions_header() {
  std::string h = "subject,epoch,raw,smoothed,confidence";
  for (auto s : kAllStages) h += ",p_" + std::string(stage_name(s));
  return h + ",label\n";
}

std::string prediction_line(const PredictionRow& r) {
  std::string s = r.subject + "," + std::to_string(r.epoch) + "," + std::string(stage_name(r.raw)) + "," +
                  std::string(stage_name(r.smoothed)) + "," + num(r.confidence);
  for (double p : r.probs) s += "," + num(p);
  s += ",";
  if (r.label) s += stage_name(*r.label);
  return s + "\n";
}

namespace {

double parse_double(const std::string& s, const std::string& where) {
  double v = 0.0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw Failure(kExitData, where + ": bad number '" + s + "'");
  return v;
}

std::size_t parse_count(const std::string& s, const std::string& where) {
  std::size_t v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw Failure(kExitData, where + ": bad index '" + s + "'");
  return v;
}

StageLabel parse_stage(const std::string& s, const std::string& where) {
  const auto st = parse_stage_name(s);
  if (!st) throw Failure(kExitData, where + ": unknown stage '" + s + "'");
  return *st;
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  for (auto& l : split(text, '\n')) {
    if (!l.empty() && l.back() == '\r') l.pop_back();
    if (!l.empty()) out.push_back(std::move(l));
  }
  return out;
}

}  // namespace

std::vector<PredictionRow> read_predictions(const fs::path& path) {
  const auto lines = lines_of(read_text(path, kExitData));
  if (lines.empty() || lines[0] + "\n" != predictions_header()) {
    throw Failure(kExitData, path.string() + ": not a predictions file");
  }
  std::vector<PredictionRow> rows;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const std::string where = path.string() + ":" + std::to_string(i + 1);
    const auto f = split(lines[i], ',');
    if (f.size() != 6 + kNumStages) throw Failure(kExitData, where + ": expected " + std::to_string(6 + kNumStages) + " fields");
    PredictionRow r;
    r.subject = f[0];
    r.epoch = parse_count(f[1], where);
    r.raw = parse_stage(f[2], where);
    r.smoothed = parse_stage(f[3], where);
    r.confidence = parse_double(f[4], where);
    for (std::size_t c = 0; c < kNumStages; ++c) r.probs[c] = parse_double(f[5 + c], where);
    if (!f.back().empty()) r.label = parse_stage(f.back(), where);
    rows.push_back(std::move(r));
  }
  return rows;
}

std::string labels_csv(const std::vector<MaybeStage>& labels) {
  std::string s = "epoch,stage\n";
  for (std::size_t i = 0; i < labels.size(); ++i) {
    s += std::to_string(i) + "," + (labels[i] ? std::string(stage_name(*labels[i])) : std::string("-")) + "\n";
  }
  return s;
}

std::vector<MaybeStage> read_labels_csv(const fs::path& path) {
  const auto lines = lines_of(read_text(path, kExitAlignment));
  if (lines.empty() || lines[0] != "epoch,stage") throw Failure(kExitData, path.string() + ": not a labels file");
  std::vector<MaybeStage> out;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const std::string where = path.string() + ":" + std::to_string(i + 1);
    const auto f = split(lines[i], ',');
    if (f.size() != 2 || parse_count(f[0], where) != i - 1) throw Failure(kExitData, where + ": malformed row");
    out.push_back(f[1] == "-" ? MaybeStage{} : MaybeStage{parse_stage(f[1], where)});
  }
  return out;
}

// ------------------------------------------------------------------ adaptation config

Json adapt_config_json(const tta::AdaptConfig& c) {
  Json j;
  j["micro_batch"] = c.micro_batch;
  j["bn_momentum"] = c.bn_momentum;
  j["tta_lr"] = c.tta_lr;
  j["sgd_momentum"] = c.sgd_momentum;
  j["h_min"] = c.h_min;
  j["h_max"] = c.h_max;
  j["ema_entropy_momentum"] = c.ema_entropy_momentum;
  j["snapshot_decay"] = c.snapshot_decay;
  j["drift_delta"] = c.drift_delta;
  j["gate_streak_reset"] = c.gate_streak_reset;
  j["median_width"] = c.median_width;
  j["gate_enabled"] = c.gate_enabled;
  j["reset_enabled"] = c.reset_enabled;
  j["gate_blocks_stats"] = c.gate_blocks_stats;
  j["gate_signal"] = c.gate_signal == tta::GateSignal::Ema ? "ema" : "raw";
  j["tent_norm"] = c.tent_norm == tta::TentNorm::Batch ? "batch" : "running";
  return j;
}

tta::AdaptConfig adapt_config_from_json(const Json& j, tta::AdaptConfig c) {
  if (!j.is_object()) throw Error(Errc::InvalidConfig, "adaptation config must be an object");
  try {
    for (const auto& [k, v] : j.items()) {
      if (k == "micro_batch") c.micro_batch = v.get<std::size_t>();
      else if (k == "bn_momentum") c.bn_momentum = v.get<double>();
      else if (k == "tta_lr") c.tta_lr = v.get<double>();
      else if (k == "sgd_momentum") c.sgd_momentum = v.get<double>();
      else if (k == "h_min") c.h_min = v.get<double>();
      else if (k == "h_max") c.h_max = v.get<double>();
      else if (k == "ema_entropy_momentum") c.ema_entropy_momentum = v.get<double>();
      else if (k == "snapshot_decay") c.snapshot_decay = v.get<double>();
      else if (k == "drift_delta") c.drift_delta = v.get<double>();
      else if (k == "gate_streak_reset") c.gate_streak_reset = v.get<std::size_t>();
      else if (k == "median_width") c.median_width = v.get<std::size_t>();
      else if (k == "gate_enabled") c.gate_enabled = v.get<bool>();
      else if (k == "reset_enabled") c.reset_enabled = v.get<bool>();
      else if (k == "gate_blocks_stats") c.gate_blocks_stats = v.get<bool>();
      else if (k == "gate_signal") c.gate_signal = v.get<std::string>() == "raw" ? tta::GateSignal::Raw : tta::GateSignal::Ema;
      else if (k == "tent_norm") c.tent_norm = v.get<std::string>() == "running" ? tta::TentNorm::Running : tta::TentNorm::Batch;
      else throw Error(Errc::InvalidConfig, "unknown adaptation key '" + k + "'");
    }
  } catch (const Json::exception& e) {
    throw Error(Errc::InvalidConfig, std::string("adaptation config: ") + e.what());
  }
  return c;
}

fs::path sidecar_path(const fs::path& checkpoint) {
  fs::path p = checkpoint;
  if (p.extension() == ".json") p.replace_extension();
  p += ".adapt.json";
  return p;
}

void AdaptOverrides::apply(tta::AdaptConfig& c) const {
  if (micro_batch) c.micro_batch = *micro_batch;
  if (bn_momentum) c.bn_momentum = *bn_momentum;
  if (lr) c.tta_lr = *lr;
  if (sgd_momentum) c.sgd_momentum = *sgd_momentum;
  if (h_min) c.h_min = *h_min;
  if (h_max) c.h_max = *h_max;
  if (ema_momentum) c.ema_entropy_momentum = *ema_momentum;
  if (snapshot_decay) c.snapshot_decay = *snapshot_decay;
  if (drift_delta) c.drift_delta = *drift_delta;
  if (streak_reset) c.gate_streak_reset = *streak_reset;
  if (median_width) c.median_width = *median_width;
  if (gate) c.gate_enabled = *gate;
  if (reset) c.reset_enabled = *reset;
  if (gate_stats) c.gate_blocks_stats = *gate_stats;
  if (gate_signal) c.gate_signal = *gate_signal == "raw" ? tta::GateSignal::Raw : tta::GateSignal::Ema;
  if (tent_norm) c.tent_norm = *tent_norm == "running" ? tta::TentNorm::Running : tta::TentNorm::Batch;
}

void AdaptOverrides::fill_from(const tta::AdaptConfig& c) {
  micro_batch = c.micro_batch;
  bn_momentum = c.bn_momentum;
  lr = c.tta_lr;
  sgd_momentum = c.sgd_momentum;
  h_min = c.h_min;
  h_max = c.h_max;
  ema_momentum = c.ema_entropy_momentum;
  snapshot_decay = c.snapshot_decay;
  drift_delta = c.drift_delta;
  streak_reset = c.gate_streak_reset;
  median_width = c.median_width;
  gate = c.gate_enabled;
  reset = c.reset_enabled;
  gate_stats = c.gate_blocks_stats;
  gate_signal = c.gate_signal == tta::GateSignal::Raw ? "raw" : "ema";
  tent_norm = c.tent_norm == tta::TentNorm::Running ? "running" : "batch";
}

}  // namespace driftguard::cli
