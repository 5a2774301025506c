#pragma once

// Command-line front end: driftguard {train|adapt|eval|synth|report}.

#include <iosfwd>
#include <string>
#include <vector>

#include "driftguard/error.hpp"
#include "driftguard/synth.hpp"

namespace driftguard::cli {

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitConfig = 2,
  kExitData = 3,
  kExitCheckpoint = 4,
  kExitAlignment = 5,
  kExitMissingArtifacts = 6,
};

int exit_code_for(Errc code);

// Arguments without the program name, e.g. {"train", "--out", "run1"}.
// Progress goes to `out`, diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// "kind:magnitude@onset_epoch" with an optional "+ramp_epochs", e.g.
// "gain:3.0@50" or "noise:20@10+5". Throws InvalidConfig.
synth::DriftSpec parse_drift_spec(const std::string& text);

}  // namespace driftguard::cli
