#pragma once

#include <vector>

namespace driftguard {

// A uniformly sampled single-channel signal.
struct SampleSeries {
  std::vector<double> samples;
  double fs_hz{0.0};
};

}  // namespace driftguard
