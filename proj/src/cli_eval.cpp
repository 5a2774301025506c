#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>

#include "cli_internal.hpp"

namespace driftguard::cli {

using Counts5 = std::array<std::array<std::int64_t, kNumStages>, kNumStages>;

namespace {

metrics::Matrix5 normalize_rows(const Counts5& c) {
  metrics::Matrix5 m{};
  for (std::size_t i = 0; i < kNumStages; ++i) {
    std::int64_t s = 0;
    for (auto v : c[i]) s += v;
    if (s == 0) continue;
    for (std::size_t j = 0; j < kNumStages; ++j) m[i][j] = static_cast<double>(c[i][j]) / static_cast<double>(s);
  }
  return m;
}

Json metric_values(const metrics::MetricsReport& r) { return metrics::metrics_object(r); }

std::string metrics_csv_cells(const metrics::MetricsReport& r) {
  std::string s;
  const Json j = metric_values(r);
  for (const char* k : metrics::kMetricKeys) s += "," + num(j[k].get<double>());
  return s;
}

std::string metrics_csv_header() {
  std::string s;
  for (const char* k : metrics::kMetricKeys) s += std::string(",") + k;
  return s;
}

std::string fixed(double v, int digits = 3) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

SplitEval evaluate_rows(const std::vector<PredictionRow>& rows, bool smoothed, std::size_t bins) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<const PredictionRow*>> by_subject;
  for (const auto& r : rows) {
    if (!r.label) continue;
    auto& v = by_subject[r.subject];
    if (v.empty()) order.push_back(r.subject);
    if (!v.empty() && r.epoch <= v.back()->epoch) {
      throw Failure(kExitAlignment, "subject " + r.subject + ": epochs out of order at " + std::to_string(r.epoch));
    }
    v.push_back(&r);
  }
  if (order.empty()) throw Failure(kExitAlignment, "no labeled epochs to evaluate");

  SplitEval out;
  std::vector<StageLabel> all_true, all_pred;
  std::vector<double> all_conf;
  std::vector<bool> all_raw_ok;
  std::vector<metrics::MetricsReport> reports;
  for (const auto& subject : order) {
    const auto& v = by_subject[subject];
    SubjectEval se;
    se.subject = subject;
    std::vector<StageLabel> yt, yp;
    std::vector<double> conf;
    std::vector<bool> raw_ok;
    for (std::size_t i = 0; i < v.size(); ++i) {
      const auto& r = *v[i];
      yt.push_back(*r.label);
      yp.push_back(smoothed ? r.smoothed : r.raw);
      conf.push_back(r.confidence);
      raw_ok.push_back(r.raw == *r.label);
      ++se.true_counts[static_cast<std::size_t>(to_index(yt.back()))];
      ++se.pred_counts[static_cast<std::size_t>(to_index(yp.back()))];
      if (i > 0 && r.epoch == v[i - 1]->epoch + 1) {
        ++se.true_transitions[static_cast<std::size_t>(to_index(yt[i - 1]))][static_cast<std::size_t>(to_index(yt[i]))];
        ++se.pred_transitions[static_cast<std::size_t>(to_index(yp[i - 1]))][static_cast<std::size_t>(to_index(yp[i]))];
      }
    }
    se.report = metrics::evaluate(yt, yp, conf, bins);
    if (smoothed) {
      // calibration always refers to the raw prediction the confidence came from
      const auto e = metrics::ece(conf, raw_ok, bins);
      se.report.ece = e.ece;
      se.report.reliability = e.bins;
    }
    reports.push_back(se.report);
    all_true.insert(all_true.end(), yt.begin(), yt.end());
    all_pred.insert(all_pred.end(), yp.begin(), yp.end());
    all_conf.insert(all_conf.end(), conf.begin(), conf.end());
    all_raw_ok.insert(all_raw_ok.end(), raw_ok.begin(), raw_ok.end());
    out.subjects.push_back(std::move(se));
  }
  out.aggregate = metrics::aggregate_subjects(order, reports);
  out.pooled = metrics::evaluate(all_true, all_pred, all_conf, bins);
  if (smoothed) {
    const auto e = metrics::ece(all_conf, all_raw_ok, bins);
    out.pooled.ece = e.ece;
    out.pooled.reliability = e.bins;
  }
  return out;
}

// ------------------------------------------------------------------ eval

namespace {

struct SplitInput {
  std::string name;
  fs::path path;
};

std::vector<SplitInput> parse_split_inputs(const std::vector<std::string>& specs) {
  std::vector<SplitInput> out;
  std::set<std::string> seen;
  for (const auto& s : specs) {
    SplitInput in;
    const auto eq = s.find('=');
    if (eq != std::string::npos && s.substr(0, eq).find('/') == std::string::npos) {
      in.name = s.substr(0, eq);
      in.path = s.substr(eq + 1);
    } else {
      if (specs.size() > 1) throw Failure(kExitConfig, "name each split when giving several: split=path");
      in.name = "test";
      in.path = s;
    }
    if (in.name.empty() || !seen.insert(in.name).second) throw Failure(kExitConfig, "bad or repeated split name '" + in.name + "'");
    out.push_back(in);
  }
  return out;
}

// Replaces the label column from <dir>/<subject>.labels.csv. Predictions and
// non-excluded labels must cover exactly the same epochs.
void attach_labels(std::vector<PredictionRow>& rows, const fs::path& dir) {
  std::map<std::string, std::vector<MaybeStage>> labels;
  std::map<std::string, std::set<std::size_t>> predicted;
  std::vector<PredictionRow> kept;
  for (auto& r : rows) {
    auto it = labels.find(r.subject);
    if (it == labels.end()) {
      const fs::path p = dir / (r.subject + ".labels.csv");
      if (!fs::exists(p)) throw Failure(kExitAlignment, "no labels for subject " + r.subject + " (" + p.string() + ")");
      it = labels.emplace(r.subject, read_labels_csv(p)).first;
    }
    if (r.epoch >= it->second.size()) {
      throw Failure(kExitAlignment, "subject " + r.subject + ": prediction for epoch " + std::to_string(r.epoch) +
                                        " beyond the " + std::to_string(it->second.size()) + " labeled epochs");
    }
    predicted[r.subject].insert(r.epoch);
    r.label = it->second[r.epoch];
    if (r.label) kept.push_back(r);
  }
  for (const auto& [subject, ls] : labels) {
    for (std::size_t i = 0; i < ls.size(); ++i) {
      if (ls[i] && !predicted[subject].count(i)) {
        throw Failure(kExitAlignment, "subject " + subject + ": labeled epoch " + std::to_string(i) + " has no prediction");
      }
    }
  }
  rows = std::move(kept);
}

void write_split_files(const fs::path& out, const std::string& name, const SplitEval& ev) {
  std::string per = "subject" + metrics_csv_header() + ",n_epochs\n";
  for (const auto& s : ev.subjects) per += s.subject + metrics_csv_cells(s.report) + "," + std::to_string(s.report.n_epochs) + "\n";
  write_text(out / (name + "_per_subject.csv"), per);

  write_text(out / (name + "_confusion.csv"), metrics::confusion_csv(ev.pooled.confusion));
  const auto norm = ev.pooled.confusion.row_normalized();
  write_text(out / (name + "_confusion_normalized.csv"), metrics::matrix_csv(norm));
  write_text(out / (name + "_confusion.svg"), svg_confusion(norm));

  Counts5 tt{}, tp{};
  for (const auto& s : ev.subjects) {
    for (std::size_t i = 0; i < kNumStages; ++i) {
      for (std::size_t j = 0; j < kNumStages; ++j) {
        tt[i][j] += s.true_transitions[i][j];
        tp[i][j] += s.pred_transitions[i][j];
      }
    }
  }
  write_text(out / (name + "_transitions_true.csv"), metrics::matrix_csv(normalize_rows(tt)));
  write_text(out / (name + "_transitions_pred.csv"), metrics::matrix_csv(normalize_rows(tp)));

  write_text(out / (name + "_reliability.csv"), metrics::reliability_csv(ev.pooled.reliability));
  write_text(out / (name + "_reliability.svg"), svg_reliability(ev.pooled.reliability));

  std::string dist = "subject";
  for (auto st : kAllStages) dist += ",true_" + std::string(stage_name(st));
  for (auto st : kAllStages) dist += ",pred_" + std::string(stage_name(st));
  dist += "\n";
  for (const auto& s : ev.subjects) {
    std::int64_t n = 0;
    for (auto c : s.true_counts) n += c;
    dist += s.subject;
    for (auto c : s.true_counts) dist += "," + num(static_cast<double>(c) / static_cast<double>(n));
    for (auto c : s.pred_counts) dist += "," + num(static_cast<double>(c) / static_cast<double>(n));
    dist += "\n";
  }
  write_text(out / (name + "_distribution.csv"), dist);
}

}  // namespace

void cmd_eval(const EvalOptions& o, std::ostream& log) {
  if (o.bins == 0) throw Failure(kExitConfig, "--bins must be positive");
  const auto inputs = parse_split_inputs(o.predictions);
  const fs::path out(o.out);
  fs::create_directories(out);

  Json report;
  report["metrics"] = metrics::kMetricKeys;
  report["labels"] = o.smoothed ? "smoothed" : "raw";
  Json splits = Json::object(), pooled = Json::object(), subjects = Json::object();
  for (const auto& in : inputs) {
    auto rows = read_predictions(in.path);
    if (!o.labels_dir.empty()) attach_labels(rows, o.labels_dir);
    const SplitEval ev = evaluate_rows(rows, o.smoothed, o.bins);
    splits[in.name] = metric_values(ev.aggregate.mean);
    pooled[in.name] = metrics::report_json(ev.pooled);
    Json per = Json::array();
    for (const auto& s : ev.subjects) {
      Json j;
      j["subject"] = s.subject;
      const Json m = metric_values(s.report);
      for (const auto& [k, v] : m.items()) j[k] = v;
      j["n_epochs"] = s.report.n_epochs;
      j["classes_excluded"] = s.report.classes_excluded;
      per.push_back(j);
    }
    subjects[in.name] = per;
    write_split_files(out, in.name, ev);
    log << in.name << ":";
    for (const char* k : metrics::kMetricKeys) log << " " << k << " " << fixed(splits[in.name][k].get<double>());
    log << "\n";
  }
  report["splits"] = splits;
  report["pooled"] = pooled;
  report["subjects"] = subjects;
  write_json(out / "report.json", report);
}

// ------------------------------------------------------------------ report

void cmd_report(const ReportOptions& o, std::ostream& log) {
  struct Run {
    std::string name;
    std::string mode;
    Json summary;
    SplitEval eval;
    std::vector<Json> trace;
  };
  std::vector<Run> runs;
  std::set<std::string> names;
  for (const auto& dir : o.runs) {
    const fs::path d = fs::path(dir).lexically_normal();
    for (const char* f : {"summary.json", "predictions.csv", "trace.jsonl"}) {
      if (!fs::exists(d / f)) throw Failure(kExitMissingArtifacts, "run " + dir + " has no " + f);
    }
    Run r;
    std::string base = (d.has_filename() ? d.filename() : d.parent_path().filename()).string();
    if (base.empty() || base == ".") base = "run";
    r.name = base;
    for (int k = 2; !names.insert(r.name).second; ++k) r.name = base + "-" + std::to_string(k);
    r.summary = read_json(d / "summary.json", kExitMissingArtifacts);
    r.mode = r.summary.value("mode", "unknown");
    r.eval = evaluate_rows(read_predictions(d / "predictions.csv"), o.smoothed, metrics::kDefaultEceBins);
    for (const auto& line : split(read_text(d / "trace.jsonl", kExitMissingArtifacts), '\n')) {
      if (line.empty()) continue;
      try {
        r.trace.push_back(Json::parse(line));
      } catch (const Json::parse_error& e) {
        throw Failure(kExitMissingArtifacts, dir + "/trace.jsonl: " + e.what());
      }
    }
    runs.push_back(std::move(r));
  }

  const fs::path out(o.out);
  fs::create_directories(out);
  Json rows = Json::array();
  std::string csv = "run,mode" + metrics_csv_header() + ",updates_applied,resets\n";
  std::string md = "| run | mode |";
  for (const char* k : metrics::kMetricKeys) md += std::string(" ") + k + " |";
  md += "\n|---|---|";
  for (std::size_t i = 0; i < metrics::kMetricKeys.size(); ++i) md += "---|";
  md += "\n";
  for (const auto& r : runs) {
    const Json m = metric_values(r.eval.aggregate.mean);
    Json row;
    row["run"] = r.name;
    row["mode"] = r.mode;
    for (const auto& [k, v] : m.items()) row[k] = v;
    row["updates_applied"] = r.summary.value("updates_applied", 0);
    row["resets"] = r.summary.value("resets", 0);
    rows.push_back(row);
    csv += r.name + "," + r.mode + metrics_csv_cells(r.eval.aggregate.mean) + "," +
           std::to_string(row["updates_applied"].get<std::size_t>()) + "," +
           std::to_string(row["resets"].get<std::size_t>()) + "\n";
    md += "| " + r.name + " | " + r.mode + " |";
    for (const char* k : metrics::kMetricKeys) md += " " + fixed(m[k].get<double>()) + " |";
    md += "\n";

    std::string tl = "subject,batch_index,first_epoch,size,entropy,ema_entropy,gate,updated,reset,reset_reason,loss\n";
    std::vector<double> ent, ema;
    std::vector<bool> upd;
    for (const auto& t : r.trace) {
      auto s = [&](const char* k) -> std::string {
        const auto& v = t.at(k);
        if (v.is_null()) return "";
        if (v.is_string()) return v.get<std::string>();
        if (v.is_number_float()) return num(v.get<double>());
        return v.dump();
      };
      tl += s("subject") + "," + s("batch_index") + "," + s("first_epoch") + "," + s("size") + "," + s("entropy") +
            "," + s("ema_entropy") + "," + s("gate") + "," + s("updated") + "," + s("reset") + "," +
            s("reset_reason") + "," + s("loss") + "\n";
      ent.push_back(t.at("entropy").get<double>());
      ema.push_back(t.at("ema_entropy").get<double>());
      upd.push_back(t.at("updated").get<bool>());
    }
    write_text(out / (r.name + "_timeline.csv"), tl);
    const Json adapt = r.summary.value("adapt", Json::object());
    write_text(out / (r.name + "_entropy.svg"),
               svg_timeline(ent, ema, upd, adapt.value("h_min", 0.05 * tta::kLn5), adapt.value("h_max", 0.9 * tta::kLn5)));
    log << r.name << " (" << r.mode << "): accuracy " << fixed(m["accuracy"].get<double>()) << ", macro F1 "
        << fixed(m["macro_f1"].get<double>()) << ", kappa " << fixed(m["kappa"].get<double>()) << "\n";
  }
  Json report;
  report["columns"] = metrics::kMetricKeys;
  report["labels"] = o.smoothed ? "smoothed" : "raw";
  report["rows"] = rows;
  write_json(out / "report.json", report);
  write_text(out / "comparison.csv", csv);
  write_text(out / "comparison.md", md);
}

// ------------------------------------------------------------------ plots

namespace {

std::string svg_open(int w, int h) {
  return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(w) + "\" height=\"" +
         std::to_string(h) + "\" viewBox=\"0 0 " + std::to_string(w) + " " + std::to_string(h) +
         "\" font-family=\"sans-serif\" font-size=\"11\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
}

std::string text(double x, double y, const std::string& s, const char* anchor = "middle") {
  return "<text x=\"" + fixed(x, 1) + "\" y=\"" + fixed(y, 1) + "\" text-anchor=\"" + anchor + "\">" + s + "</text>\n";
}

std::string polyline(const std::vector<std::pair<double, double>>& pts, const char* color, double width = 1.5) {
  std::string s = "<polyline fill=\"none\" stroke=\"" + std::string(color) + "\" stroke-width=\"" + fixed(width, 1) +
                  "\" points=\"";
  for (const auto& [x, y] : pts) s += fixed(x, 1) + "," + fixed(y, 1) + " ";
  return s + "\"/>\n";
}

}  // namespace

std::string svg_reliability(const std::vector<metrics::ReliabilityBin>& bins) {
  const double x0 = 50, y0 = 330, side = 280;
  std::string s = svg_open(360, 370);
  s += "<rect x=\"50\" y=\"50\" width=\"280\" height=\"280\" fill=\"none\" stroke=\"black\"/>\n";
  s += polyline({{x0, y0}, {x0 + side, y0 - side}}, "gray", 1.0);
  std::vector<std::pair<double, double>> pts;
  for (const auto& b : bins) {
    if (b.count == 0) continue;
    const double bx = x0 + b.lo * side, bw = (b.hi - b.lo) * side, bh = b.accuracy * side;
    s += "<rect x=\"" + fixed(bx, 1) + "\" y=\"" + fixed(y0 - bh, 1) + "\" width=\"" + fixed(bw, 1) + "\" height=\"" +
         fixed(bh, 1) + "\" fill=\"steelblue\" fill-opacity=\"0.5\" stroke=\"steelblue\"/>\n";
    pts.emplace_back(x0 + b.mean_confidence * side, y0 - b.accuracy * side);
  }
  if (!pts.empty()) s += polyline(pts, "darkred");
  s += text(190, 30, "Reliability");
  s += text(190, 360, "confidence");
  s += "<text x=\"15\" y=\"190\" transform=\"rotate(-90 15 190)\" text-anchor=\"middle\">accuracy</text>\n";
  return s + "</svg>\n";
}

std::string svg_confusion(const metrics::Matrix5& m) {
  const double x0 = 60, y0 = 50, cell = 56;
  std::string s = svg_open(360, 360);
  for (std::size_t i = 0; i < kNumStages; ++i) {
    const std::string name(stage_name(stage_from_index(static_cast<int>(i))));
    s += text(x0 - 8, y0 + cell * (static_cast<double>(i) + 0.5) + 4, name, "end");
    s += text(x0 + cell * (static_cast<double>(i) + 0.5), y0 - 8, name);
    for (std::size_t j = 0; j < kNumStages; ++j) {
      const double v = std::clamp(m[i][j], 0.0, 1.0);
      const int shade = static_cast<int>(std::lround(255.0 * (1.0 - v)));
      char fill[16];
      std::snprintf(fill, sizeof fill, "#%02x%02xff", shade, shade);
      const double x = x0 + cell * static_cast<double>(j), y = y0 + cell * static_cast<double>(i);
      s += "<rect x=\"" + fixed(x, 1) + "\" y=\"" + fixed(y, 1) + "\" width=\"" + fixed(cell, 1) + "\" height=\"" +
           fixed(cell, 1) + "\" fill=\"" + fill + "\" stroke=\"white\"/>\n";
      s += text(x + cell / 2, y + cell / 2 + 4, fixed(m[i][j], 2));
    }
  }
  s += text(x0 + cell * 2.5, 350, "predicted (rows: true)");
  return s + "</svg>\n";
}

std::string svg_timeline(const std::vector<double>& entropy, const std::vector<double>& ema,
                         const std::vector<bool>& updated, double h_min, double h_max) {
  const double x0 = 50, y0 = 230, w = 600, h = 200;
  std::string s = svg_open(680, 270);
  const double n = std::max<double>(1.0, static_cast<double>(entropy.size()) - 1.0);
  auto X = [&](std::size_t i) { return x0 + w * static_cast<double>(i) / n; };
  auto Y = [&](double v) { return y0 - h * std::clamp(v / tta::kLn5, 0.0, 1.0); };
  s += "<rect x=\"" + fixed(x0, 1) + "\" y=\"" + fixed(Y(h_max), 1) + "\" width=\"" + fixed(w, 1) + "\" height=\"" +
       fixed(Y(h_min) - Y(h_max), 1) + "\" fill=\"palegreen\" fill-opacity=\"0.4\"/>\n";
  for (std::size_t i = 0; i < updated.size(); ++i) {
    if (updated[i]) {
      s += "<line x1=\"" + fixed(X(i), 1) + "\" y1=\"" + fixed(y0, 1) + "\" x2=\"" + fixed(X(i), 1) + "\" y2=\"" +
           fixed(y0 + 6, 1) + "\" stroke=\"black\"/>\n";
    }
  }
  std::vector<std::pair<double, double>> pe, pm;
  for (std::size_t i = 0; i < entropy.size(); ++i) {
    pe.emplace_back(X(i), Y(entropy[i]));
    pm.emplace_back(X(i), Y(ema[i]));
  }
  if (!pe.empty()) {
    s += polyline(pe, "steelblue", 1.0);
    s += polyline(pm, "darkred");
  }
  s += "<rect x=\"" + fixed(x0, 1) + "\" y=\"" + fixed(y0 - h, 1) + "\" width=\"" + fixed(w, 1) + "\" height=\"" +
       fixed(h, 1) + "\" fill=\"none\" stroke=\"black\"/>\n";
  s += text(x0 - 6, y0 - h + 4, "ln 5", "end");
  s += text(x0 - 6, y0 + 4, "0", "end");
  s += text(x0 + w / 2, 20, "batch entropy (blue), EMA (red), gate band (green), updates (ticks)");
  s += text(x0 + w / 2, 260, "micro-batch");
  return s + "</svg>\n";
}

}  // namespace driftguard::cli
