#include "flatkit/run_config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "flatkit/error.hpp"

namespace flatkit {

using nlohmann::json;

TransformVariant parse_transform_variant(const std::string& s) {
  if (s == "identity") return TransformVariant::Identity;
  if (s == "scaling") return TransformVariant::Scaling;
  if (s == "hadamard") return TransformVariant::Hadamard;
  if (s == "flat") return TransformVariant::Flat;
  throw ConfigError("transform", "unknown variant '" + s + "' (identity|scaling|hadamard|flat)");
}

const char* transform_variant_name(TransformVariant v) {
  switch (v) {
    case TransformVariant::Identity: return "identity";
    case TransformVariant::Scaling: return "scaling";
    case TransformVariant::Hadamard: return "hadamard";
    case TransformVariant::Flat: return "flat";
  }
  return "unknown";
}

QuantMode parse_quant_mode(const std::string& s, const ModelConfig& cfg, bool gptq) {
  QuantMode m;
  if (s == "w4a4kv4") {
    m = QuantMode::w4a4kv4(cfg.head_dim());
  } else if (s == "w4") {
    m = QuantMode::weight_only(4);
  } else if (s == "kv4") {
    m = QuantMode::kv_only(4, cfg.head_dim());
  } else if (s != "off") {
    throw ConfigError("quant.mode", "unknown mode '" + s + "' (w4a4kv4|w4|kv4|off)");
  }
  m.use_gptq = gptq && m.weights.has_value();
  return m;
}

namespace {

bool is_non_negative_integer(const json& v) {
  return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

/// Reads the members of one JSON object, checking types and rejecting unknown keys.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json* find(const std::string& key) {
    known_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void read(const std::string& key, std::size_t& dst) {
    if (const json* v = find(key)) {
      if (!is_non_negative_integer(*v)) throw ConfigError(field(key), "expected a non-negative integer");
      dst = v->get<std::size_t>();
    }
  }
  void read(const std::string& key, std::uint64_t& dst, int) {
    if (const json* v = find(key)) {
      if (!is_non_negative_integer(*v)) throw ConfigError(field(key), "expected a non-negative integer");
      dst = v->get<std::uint64_t>();
    }
  }
  void read(const std::string& key, double& dst) {
    if (const json* v = find(key)) {
      if (!v->is_number()) throw ConfigError(field(key), "expected a number");
      dst = v->get<double>();
    }
  }
  void read(const std::string& key, bool& dst) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) throw ConfigError(field(key), "expected true or false");
      dst = v->get<bool>();
    }
  }
  void read(const std::string& key, std::string& dst) {
    if (const json* v = find(key)) {
      if (!v->is_string()) throw ConfigError(field(key), "expected a string");
      dst = v->get<std::string>();
    }
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!known_.contains(k)) throw ConfigError(field(k), "unknown key");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> known_;
};

}  // namespace

ModelConfig model_config_from_json(const json& j, const std::string& path) {
  ModelConfig m;
  ObjectReader r(j, path);
  r.read("hidden", m.hidden);
  r.read("intermediate", m.intermediate);
  r.read("heads", m.heads);
  r.read("layers", m.layers);
  r.read("vocab", m.vocab);
  r.read("seq_len", m.seq_len);
  r.read("rope_base", m.rope_base);
  r.read("norm_eps", m.norm_eps);
  r.finish();
  m.validate();
  return m;
}

json model_config_to_json(const ModelConfig& m) {
  return {{"hidden", m.hidden}, {"intermediate", m.intermediate}, {"heads", m.heads},
          {"layers", m.layers}, {"vocab", m.vocab},               {"seq_len", m.seq_len},
          {"rope_base", m.rope_base}, {"norm_eps", m.norm_eps}};
}

RunConfig RunConfig::from_json(const json& j) {
  RunConfig c;
  ObjectReader r(j, "");
  r.read("seed", c.seed, 0);
  if (const json* m = r.find("model")) c.model = model_config_from_json(*m, "model");
  if (const json* d = r.find("data")) {
    ObjectReader dr(*d, "data");
    dr.read("samples", c.data.samples);
    dr.read("outlier_channels", c.data.outlier_channels);
    dr.read("outlier_ratio", c.data.outlier_ratio);
    dr.read("pivot_ratio", c.data.pivot_ratio);
    dr.finish();
  }
  if (const json* q = r.find("quant")) {
    ObjectReader qr(*q, "quant");
    qr.read("mode", c.mode);
    qr.read("gptq", c.gptq);
    qr.finish();
  }
  std::string transform = transform_variant_name(c.transform);
  r.read("transform", transform);
  c.transform = parse_transform_variant(transform);
  if (const json* k = r.find("calib")) {
    ObjectReader kr(*k, "calib");
    CalibConfig& cc = c.calib;
    kr.read("epochs", cc.epochs);
    kr.read("lr_transforms", cc.lr_transforms);
    kr.read("lr_clip", cc.lr_clip);
    kr.read("batch", cc.batch);
    kr.read("samples", cc.samples);
    kr.read("learn_transforms", cc.learn_transforms);
    kr.read("per_channel_scaling", cc.per_channel_scaling);
    kr.read("learnable_clipping", cc.learnable_clipping);
    kr.read("propagate_quantized_inputs", cc.propagate_quantized_inputs);
    kr.read("init_skew_stddev", cc.init_skew_stddev);
    kr.read("init_clip_ratio", cc.init_clip_ratio);
    kr.read("log_sigma_bound", cc.log_sigma_bound);
    kr.read("divergence_factor", cc.divergence_factor);
    kr.finish();
  }
  r.finish();
  c.calib.seed = c.seed;
  c.validate();
  return c;
}

json RunConfig::to_json() const {
  return {{"seed", seed},
          {"model", model_config_to_json(model)},
          {"data",
           {{"samples", data.samples},
            {"outlier_channels", data.outlier_channels},
            {"outlier_ratio", data.outlier_ratio},
            {"pivot_ratio", data.pivot_ratio}}},
          {"quant", {{"mode", mode}, {"gptq", gptq}}},
          {"transform", transform_variant_name(transform)},
          {"calib",
           {{"epochs", calib.epochs},
            {"lr_transforms", calib.lr_transforms},
            {"lr_clip", calib.lr_clip},
            {"batch", calib.batch},
            {"samples", calib.samples},
            {"learn_transforms", calib.learn_transforms},
            {"per_channel_scaling", calib.per_channel_scaling},
            {"learnable_clipping", calib.learnable_clipping},
            {"propagate_quantized_inputs", calib.propagate_quantized_inputs},
            {"init_skew_stddev", calib.init_skew_stddev},
            {"init_clip_ratio", calib.init_clip_ratio},
            {"log_sigma_bound", calib.log_sigma_bound},
            {"divergence_factor", calib.divergence_factor}}}};
}

void RunConfig::validate() const {
  model.validate();
  data.validate(model);
  calib.validate();
  (void)quant_mode();
  if (transform == TransformVariant::Hadamard) {
    if (!is_power_of_two(model.hidden)) throw ConfigError("model.hidden", "hadamard variant needs a power of two");
    if (!is_power_of_two(model.intermediate))
      throw ConfigError("model.intermediate", "hadamard variant needs a power of two");
    if (!is_power_of_two(model.heads) || !is_power_of_two(model.head_dim()))
      throw ConfigError("model.heads", "hadamard variant needs power-of-two heads and head_dim");
  }
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw ConfigError("<root>", std::string("invalid JSON: ") + e.what());
  }
  return RunConfig::from_json(j);
}

}  // namespace flatkit
