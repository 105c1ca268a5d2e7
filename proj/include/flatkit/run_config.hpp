#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "flatkit/calibrate.hpp"
#include "flatkit/model.hpp"
#include "flatkit/synthetic.hpp"

namespace flatkit {

enum class TransformVariant { Identity, Scaling, Hadamard, Flat };
TransformVariant parse_transform_variant(const std::string& s);
const char* transform_variant_name(TransformVariant v);

/// Named quantization presets: w4a4kv4, w4, kv4, off.
QuantMode parse_quant_mode(const std::string& s, const ModelConfig& cfg, bool gptq = false);

/// Everything a run needs. Unknown keys and ill-typed values are rejected with the
/// dotted path of the offending field.
struct RunConfig {
  std::uint64_t seed = 0;
  ModelConfig model;
  SyntheticConfig data;
  std::string mode = "w4a4kv4";
  bool gptq = false;
  TransformVariant transform = TransformVariant::Flat;
  CalibConfig calib;

  static RunConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  QuantMode quant_mode() const { return parse_quant_mode(mode, model, gptq); }
  void validate() const;
};

ModelConfig model_config_from_json(const nlohmann::json& j, const std::string& path = "model");
nlohmann::json model_config_to_json(const ModelConfig& cfg);

/// Throws IoError if the file cannot be read and ConfigError if it is not a valid config.
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace flatkit
