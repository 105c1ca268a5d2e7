#pragma once

#include <cstddef>
#include <random>
#include <vector>

#include "flatkit/matrix.hpp"
#include "flatkit/model.hpp"

namespace flatkit {

/// Stand-in for calibration text: embedded random token sequences with a few
/// high-magnitude channels and an amplified first token per sequence.
struct SyntheticConfig {
  std::size_t samples = 32;
  std::size_t outlier_channels = 4;
  double outlier_ratio = 50.0;
  /// Multiplier on the first token's outlier channels; <= 0 disables the pivot token.
  double pivot_ratio = 0.25;

  void validate(const ModelConfig& model) const;
};

struct SyntheticData {
  std::vector<Matrix> samples;  // seq_len x hidden each
  std::vector<std::size_t> outlier_channels;
};

SyntheticData synthetic_samples(const TinyModel& model, const SyntheticConfig& cfg, std::mt19937_64& rng);

}  // namespace flatkit
