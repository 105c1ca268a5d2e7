#include "flatkit/synthetic.hpp"

#include <algorithm>
#include <numeric>

#include "flatkit/error.hpp"

namespace flatkit {

void SyntheticConfig::validate(const ModelConfig& model) const {
  if (samples == 0) throw ConfigError("data.samples", "must be positive");
  if (outlier_channels > model.hidden)
    throw ConfigError("data.outlier_channels", "exceeds the hidden width");
  if (!(outlier_ratio > 0.0)) throw ConfigError("data.outlier_ratio", "must be positive");
}

SyntheticData synthetic_samples(const TinyModel& model, const SyntheticConfig& cfg, std::mt19937_64& rng) {
  const ModelConfig& mc = model.config;
  cfg.validate(mc);
  SyntheticData out;
  std::vector<std::size_t> all(mc.hidden);
  std::iota(all.begin(), all.end(), 0);
  // Partial Fisher-Yates with explicit draws keeps the choice platform independent.
  for (std::size_t i = 0; i < cfg.outlier_channels; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng() % (mc.hidden - i));
    std::swap(all[i], all[j]);
  }
  out.outlier_channels.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(cfg.outlier_channels));
  std::sort(out.outlier_channels.begin(), out.outlier_channels.end());

  const std::optional<double> pivot = cfg.pivot_ratio > 0.0 ? std::optional<double>(cfg.pivot_ratio) : std::nullopt;
  for (std::size_t s = 0; s < cfg.samples; ++s) {
    Matrix x(mc.seq_len, mc.hidden);
    for (std::size_t t = 0; t < mc.seq_len; ++t) {
      const std::size_t token = static_cast<std::size_t>(rng() % mc.vocab);
      set_rows(x, t, slice_rows(model.embedding, token, 1));
    }
    out.samples.push_back(plant_outliers(x, out.outlier_channels, cfg.outlier_ratio, pivot, mc.seq_len));
  }
  return out;
}

}  // namespace flatkit
