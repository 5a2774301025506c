#include <algorithm>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>

#include "CLI11.hpp"
#include "cli_internal.hpp"

namespace driftguard::cli {

int exit_code_for(Errc code) {
  switch (code) {
    case Errc::InvalidConfig:
    case Errc::NotStochastic:
    case Errc::OnsetOutOfRange:
    case Errc::InvalidBand:
    case Errc::InvalidFrequency:
    case Errc::IrrationalRatio:
      return kExitConfig;
    case Errc::TruncatedHeader:
    case Errc::NonNumericField:
    case Errc::SignalCountMismatch:
    case Errc::InvalidHeaderField:
    case Errc::DiscontinuousRecording:
    case Errc::UnknownSignal:
    case Errc::TruncatedRecord:
    case Errc::MalformedTAL:
    case Errc::UnknownStageText:
    case Errc::OverlappingAnnotations:
    case Errc::EmptyDataset:
    case Errc::SplitOverlap:
    case Errc::ZeroClassCount:
    case Errc::DegeneratePrior:
    case Errc::ShapeMismatch:
      return kExitData;
    case Errc::CheckpointFormat:
      return kExitCheckpoint;
    case Errc::LengthMismatch:
    case Errc::Empty:
    case Errc::TooShort:
      return kExitAlignment;
    default:
      return kExitFailure;
  }
}

synth::DriftSpec parse_drift_spec(const std::string& text) {
  auto bad = [&] {
    return Error(Errc::InvalidConfig, "drift '" + text + "' is not kind:magnitude@onset[+ramp]");
  };
  const auto colon = text.find(':');
  const auto at = text.find('@');
  if (colon == std::string::npos || at == std::string::npos || at < colon) throw bad();
  synth::DriftSpec d;
  try {
    d.kind = synth::parse_drift_kind(text.substr(0, colon));
  } catch (const Error&) {
    throw bad();
  }
  const std::string mag = text.substr(colon + 1, at - colon - 1);
  std::string rest = text.substr(at + 1);
  std::optional<std::string> ramp;
  if (const auto plus = rest.find('+'); plus != std::string::npos) {
    ramp = rest.substr(plus + 1);
    rest = rest.substr(0, plus);
  }
  try {
    std::size_t used = 0;
    d.magnitude = std::stod(mag, &used);
    if (used != mag.size() || !std::isfinite(d.magnitude)) throw bad();
    auto count = [&](const std::string& s) {
      if (s.empty() || !std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c); })) {
        throw bad();
      }
      return static_cast<std::size_t>(std::stoull(s));
    };
    d.onset_epoch = count(rest);
    if (ramp) d.ramp_epochs = count(*ramp);
  } catch (const std::logic_error&) {
    throw bad();
  }
  return d;
}

namespace {

template <class T>
struct is_optional : std::false_type {};
template <class T>
struct is_optional<std::optional<T>> : std::true_type {};

// Registers options on a subcommand and remembers how to echo each one.
class Options {
 public:
  explicit Options(CLI::App* app) : app_(app) {}

  template <class T>
  CLI::Option* value(const std::string& name, T& ref, const std::string& help) {
    CLI::Option* o = app_->add_option("--" + name, ref, help);
    if constexpr (!is_optional<T>::value) o->capture_default_str();
    echo_.emplace_back(name, [&ref]() -> Json {
      if constexpr (is_optional<T>::value) {
        return ref ? Json(*ref) : Json();
      } else {
        return Json(ref);
      }
    });
    return o;
  }

  template <class T>
  CLI::Option* flag(const std::string& name, T& ref, const std::string& help) {
    CLI::Option* o = app_->add_flag("--" + name + ",!--no-" + name, ref, help);
    if constexpr (is_optional<T>::value) {
      o->option_text(" ");
    } else {
      o->option_text(ref ? "[on]" : "[off]");
    }
    echo_.emplace_back(name, [&ref]() -> Json {
      if constexpr (is_optional<T>::value) {
        return ref ? Json(*ref) : Json();
      } else {
        return Json(ref);
      }
    });
    return o;
  }

  Json echo() const {
    Json j = Json::object();
    for (const auto& [name, get] : echo_) {
      Json v = get();
      if (!v.is_null()) j[name] = std::move(v);
    }
    return j;
  }

  CLI::App* app() const { return app_; }

 private:
  CLI::App* app_;
  std::vector<std::pair<std::string, std::function<Json()>>> echo_;
};

void add_data_options(Options& o, DataSource& d, bool with_seed) {
  o.value("data", d.data_dir, "directory of EDF recordings");
  o.value("synth-subjects", d.synth_subjects, "use this many synthetic subjects instead of --data");
  o.value("synth-epochs", d.synth_epochs, "epochs per synthetic subject");
  o.value("channel", d.channel, "EEG signal label");
  if (with_seed) o.value("seed", d.seed, "random seed");
}

void add_adapt_options(Options& o, AdaptOverrides& a) {
  o.value("micro-batch", a.micro_batch, "epochs per adaptation batch");
  o.value("bn-momentum", a.bn_momentum, "BN running-statistics momentum");
  o.value("lr", a.lr, "Tent learning rate");
  o.value("sgd-momentum", a.sgd_momentum, "Tent SGD momentum");
  o.value("h-min", a.h_min, "gate lower entropy bound (nats)");
  o.value("h-max", a.h_max, "gate upper entropy bound (nats)");
  o.value("ema-momentum", a.ema_momentum, "weight of the previous entropy EMA");
  o.value("snapshot-decay", a.snapshot_decay, "BN snapshot EMA decay");
  o.value("drift-delta", a.drift_delta, "relative BN distance that triggers a reset");
  o.value("streak-reset", a.streak_reset, "closed-gate streak that triggers a reset");
  o.value("median-width", a.median_width, "causal median filter width");
  o.flag("gate", a.gate, "entropy gate");
  o.flag("reset", a.reset, "snapshot reset");
  o.flag("gate-stats", a.gate_stats, "a closed gate also blocks the BN statistics refresh");
  o.value("gate-signal", a.gate_signal, "ema or raw")->check(CLI::IsMember({"ema", "raw"}));
  o.value("tent-norm", a.tent_norm, "batch or running")->check(CLI::IsMember({"batch", "running"}));
}

bool mentioned(const std::vector<std::string>& args, const std::string& name) {
  const std::string a = "--" + name, b = "--no-" + name;
  return std::any_of(args.begin(), args.end(), [&](const std::string& s) {
    return s == a || s == b || s.rfind(a + "=", 0) == 0 || s.rfind(b + "=", 0) == 0;
  });
}

// Turns a JSON config into leading arguments. Keys given on the command line
// win; unknown keys are an error.
std::vector<std::string> config_arguments(const CLI::App& sub, const std::string& path,
                                          const std::vector<std::string>& cli_args) {
  Json j;
  try {
    j = Json::parse(read_text(path, kExitConfig));
  } catch (const Json::parse_error& e) {
    throw Failure(kExitConfig, "config " + path + ": " + e.what());
  }
  if (!j.is_object()) throw Failure(kExitConfig, "config " + path + " must be a JSON object");
  std::vector<std::string> out;
  for (const auto& [key, v] : j.items()) {
    const CLI::Option* opt = key == "config" ? nullptr : sub.get_option_no_throw("--" + key);
    if (opt == nullptr) throw Failure(kExitConfig, "config " + path + ": unknown key '" + key + "'");
    if (mentioned(cli_args, key) || v.is_null()) continue;
    auto text = [&](const Json& x) -> std::string {
      if (x.is_string()) return x.get<std::string>();
      if (x.is_object() || x.is_array()) throw Failure(kExitConfig, "config key '" + key + "' has a nested value");
      return x.dump();
    };
    if (v.is_boolean()) {
      out.push_back("--" + key + "=" + (v.get<bool>() ? "true" : "false"));
    } else if (v.is_array()) {
      for (const auto& e : v) {
        out.push_back("--" + key);
        out.push_back(text(e));
      }
    } else {
      out.push_back("--" + key);
      out.push_back(text(v));
    }
  }
  return out;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app("Streaming test-time adaptation for single-lead EEG sleep staging", "driftguard");
  app.require_subcommand(1, 1);
  app.set_version_flag("--version", "driftguard 1.0.0");

  TrainOptions train;
  AdaptOptions adapt;
  EvalOptions eval;
  SynthOptions synth;
  ReportOptions report;
  std::string config;

  auto* sub_train = app.add_subcommand("train", "train the source model");
  Options ot(sub_train);
  add_data_options(ot, train.data, true);
  ot.value("out", train.out, "output directory")->required();
  ot.value("epochs", train.epochs, "maximum training epochs")->check(CLI::PositiveNumber);
  ot.value("batch-size", train.batch_size, "training batch size")->check(CLI::PositiveNumber);
  ot.value("lr", train.lr, "Adam base learning rate");
  ot.value("gamma", train.gamma, "focal loss gamma");
  ot.value("warmup", train.warmup, "linear warmup epochs");
  ot.value("patience", train.patience, "early-stopping patience (epochs)");
  ot.flag("augment", train.augment, "jitter/scale/mask augmentation");
  ot.flag("class-balance", train.class_balance, "inverse-frequency focal alpha");
  ot.flag("prior-init", train.prior_init, "classifier bias from the label prior");
  ot.value("val-fraction", train.val_fraction, "fraction of subjects held out for validation");
  ot.value("select-lr", train.select_lr, "Tent learning rates to choose from on validation")->delimiter(',');
  ot.value("select-bn-momentum", train.select_bn_momentum, "BN momenta to choose from on validation")
      ->delimiter(',');
  ot.value("val-drift", train.val_drift, "drift applied to validation streams during selection");

  auto* sub_adapt = app.add_subcommand("adapt", "stream recordings through a checkpoint with adaptation");
  Options oa(sub_adapt);
  oa.value("checkpoint", adapt.checkpoint, "checkpoint.json from train")->required();
  add_data_options(oa, adapt.data, true);
  oa.value("out", adapt.out, "output directory")->required();
  oa.value("mode", adapt.mode, "frozen, bn-only or tent")->check(CLI::IsMember({"frozen", "bn-only", "tent"}));
  oa.value("drift", adapt.drift, "inject drift kind:magnitude@onset[+ramp] before preprocessing");
  add_adapt_options(oa, adapt.adapt);

  auto* sub_eval = app.add_subcommand("eval", "score predictions against labels");
  Options oe(sub_eval);
  oe.value("predictions", eval.predictions, "[split=]predictions.csv")->required();
  oe.value("labels", eval.labels_dir, "directory of <subject>.labels.csv overriding the label column");
  oe.value("out", eval.out, "output directory")->required();
  oe.flag("smoothed", eval.smoothed, "score the median-smoothed labels");
  oe.value("bins", eval.bins, "ECE bins");

  auto* sub_synth = app.add_subcommand("synth", "write synthetic EDF recordings");
  Options os(sub_synth);
  os.value("out", synth.out, "output directory")->required();
  os.value("subjects", synth.subjects, "number of subjects")->check(CLI::PositiveNumber);
  os.value("epochs", synth.epochs, "epochs per subject")->check(CLI::PositiveNumber);
  os.value("seed", synth.seed, "random seed");
  os.value("stay", synth.stay, "hypnogram self-transition probability");
  os.value("drift", synth.drift, "drift kind:magnitude@onset[+ramp]");

  auto* sub_report = app.add_subcommand("report", "compare adaptation runs");
  Options orp(sub_report);
  orp.value("runs", report.runs, "adapt output directories")->required();
  orp.value("out", report.out, "output directory")->required();
  orp.flag("smoothed", report.smoothed, "score the median-smoothed labels");

  std::vector<Options*> all = {&ot, &oa, &oe, &os, &orp};
  for (auto* o : all) o->app()->add_option("--config", config, "JSON file of option values");

  std::vector<std::string> full = args;
  try {
    if (!full.empty()) {
      const CLI::App* sub = nullptr;
      for (auto* o : all) {
        if (o->app()->get_name() == full[0]) sub = o->app();
      }
      const auto it = std::find(full.begin(), full.end(), "--config");
      if (sub != nullptr && it != full.end() && it + 1 != full.end()) {
        const std::vector<std::string> given(full.begin() + 1, full.end());
        auto extra = config_arguments(*sub, *(it + 1), given);
        full.insert(full.begin() + 1, extra.begin(), extra.end());
      }
    }
    std::vector<std::string> rev(full.rbegin(), full.rend());
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  } catch (const Failure& f) {
    err << "driftguard: " << f.what() << "\n";
    return f.code();
  }

  try {
    if (sub_train->parsed()) {
      cmd_train(train, out);
      write_json(fs::path(train.out) / "config.echo.json", ot.echo());
    } else if (sub_adapt->parsed()) {
      cmd_adapt(adapt, out);
      write_json(fs::path(adapt.out) / "config.echo.json", oa.echo());
    } else if (sub_eval->parsed()) {
      cmd_eval(eval, out);
      write_json(fs::path(eval.out) / "config.echo.json", oe.echo());
    } else if (sub_synth->parsed()) {
      cmd_synth(synth, out);
      write_json(fs::path(synth.out) / "config.echo.json", os.echo());
    } else if (sub_report->parsed()) {
      cmd_report(report, out);
      write_json(fs::path(report.out) / "config.echo.json", orp.echo());
    }
  } catch (const Failure& f) {
    err << "driftguard: " << f.what() << "\n";
    return f.code();
  } catch (const Error& e) {
    err << "driftguard: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    err << "driftguard: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitOk;
}

}  // namespace driftguard::cli
