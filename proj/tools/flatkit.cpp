#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "flatkit/analysis.hpp"
#include "flatkit/calibrate.hpp"
#include "flatkit/container.hpp"
#include "flatkit/error.hpp"
#include "flatkit/kernels.hpp"
#include "flatkit/run_config.hpp"
#include "flatkit/synthetic.hpp"
#include "flatkit/transforms.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace flatkit;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitIo = 4;

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string mode;
  std::string transform;
  std::string report;
  std::string model;
  std::string data;
  std::string transforms;
  std::string summary;
};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

RunConfig load(const Options& o) {
  RunConfig rc = o.config.empty() ? RunConfig{} : load_run_config(o.config);
  if (o.seed) {
    rc.seed = *o.seed;
    rc.calib.seed = *o.seed;
  }
  if (!o.mode.empty()) rc.mode = o.mode;
  if (!o.transform.empty()) rc.transform = parse_transform_variant(o.transform);
  rc.validate();
  return rc;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f << text;
  if (!f) throw IoError("write failed: " + path.string());
}

void emit_json(const Options& o, const json& j) {
  const std::string text = j.dump(2) + "\n";
  if (o.summary.empty()) {
    std::cout << text;
  } else {
    write_text(o.summary, text);
  }
}

std::vector<Matrix> take(const std::vector<Matrix>& v, std::size_t n) {
  return {v.begin(), v.begin() + static_cast<std::ptrdiff_t>(std::min(n, v.size()))};
}

int cmd_gen(const Options& o) {
  const RunConfig rc = load(o);
  if (o.out.empty()) throw ConfigError("--out", "output directory required");
  std::mt19937_64 rng(rc.seed);
  const TinyModel model = random_model(rc.model, rng);
  const SyntheticData data = synthetic_samples(model, rc.data, rng);
  fs::create_directories(o.out);
  write_container(fs::path(o.out) / "model.flatkit", model_to_container(model));
  write_container(fs::path(o.out) / "data.flatkit", samples_to_container(data.samples, data.outlier_channels));
  emit_json(o, {{"model", (fs::path(o.out) / "model.flatkit").string()},
                {"data", (fs::path(o.out) / "data.flatkit").string()},
                {"samples", data.samples.size()},
                {"outlier_channels", data.outlier_channels},
                {"config", rc.to_json()}});
  return 0;
}

struct Inputs {
  TinyModel model;
  std::vector<Matrix> samples;
};

Inputs load_inputs(const Options& o) {
  if (o.model.empty()) throw ConfigError("--model", "model container required");
  if (o.data.empty()) throw ConfigError("--data", "data container required");
  Inputs in;
  in.model = model_from_container(read_container(o.model));
  in.samples = samples_from_container(read_container(o.data), in.model.config);
  if (in.samples.empty()) throw ConfigError("--data", "data container holds no samples");
  return in;
}

std::string trace_csv(const std::vector<TraceRow>& rows) {
  std::string s = "epoch,block,loss,flatness\n";
  for (const auto& r : rows)
    s += std::to_string(r.epoch) + "," + std::to_string(r.block) + "," + fmt(r.loss) + "," + fmt(r.flatness) + "\n";
  return s;
}

int cmd_calibrate(const Options& o) {
  RunConfig rc = load(o);
  const Inputs in = load_inputs(o);
  rc.model = in.model.config;
  if (o.out.empty()) throw ConfigError("--out", "output transforms path required");
  const QuantMode mode = rc.quant_mode();
  const std::vector<Matrix> samples = take(in.samples, rc.calib.samples);
  const ModelCalibResult r = calibrate_model(in.model, samples, mode, rc.calib);
  write_container(o.out, transforms_to_container(r.transforms, in.model.config));
  const std::string csv = trace_csv(r.trace);
  if (o.report.empty()) {
    std::cout << csv;
  } else {
    write_text(o.report, csv);
  }
  if (!o.summary.empty())
    emit_json(o, {{"transforms", o.out},
                  {"mode", rc.mode},
                  {"initial_loss", r.initial_loss},
                  {"final_loss", r.final_loss},
                  {"input_gap", r.input_gap}});
  return 0;
}

int cmd_eval(const Options& o) {
  RunConfig rc = load(o);
  const Inputs in = load_inputs(o);
  const TinyModel& model = in.model;
  const ModelConfig& cfg = model.config;
  const QuantMode mode = parse_quant_mode(rc.mode, cfg, rc.gptq);

  std::vector<RealizedBlockTransforms> ts;
  switch (rc.transform) {
    case TransformVariant::Identity:
      ts.assign(cfg.layers, RealizedBlockTransforms::identity(cfg));
      break;
    case TransformVariant::Hadamard:
      ts.assign(cfg.layers, RealizedBlockTransforms::hadamard(cfg));
      break;
    case TransformVariant::Scaling:
      ts = smooth_model_transforms(model, stack_rows(take(in.samples, rc.calib.samples)));
      break;
    case TransformVariant::Flat: {
      if (o.transforms.empty()) throw ConfigError("--transforms", "the flat variant needs a transforms container");
      for (const auto& s : transforms_from_container(read_container(o.transforms), cfg)) ts.push_back(s.realize(cfg));
      break;
    }
  }

  const MseLandscape land = mse_landscape(model, in.samples, mode, &ts);
  if (!o.report.empty()) {
    std::string csv = "layer,token,mse\n";
    for (std::size_t l = 0; l < land.layers; ++l)
      for (std::size_t t = 0; t < land.tokens; ++t)
        csv += std::to_string(l) + "," + std::to_string(t) + "," + fmt(land.at(l, t)) + "\n";
    write_text(o.report, csv);
  }

  json layers = json::array();
  Matrix h = in.samples.front();
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    double mean = 0.0;
    for (std::size_t t = 0; t < land.tokens; ++t) mean += land.at(l, t) / static_cast<double>(land.tokens);
    const PreparedBlock pb = prepare_block(cfg, model.blocks[l], ts[l], QuantMode::off());
    BlockTaps taps;
    const Matrix next = run_block(pb, h, &taps);
    json flat = json::object();
    flat["qkv_in"] = flatness_report("qkv_in", taps.qkv_in).flatness;
    flat["o_in"] = flatness_report("o_in", taps.o_in).flatness;
    flat["ug_in"] = flatness_report("ug_in", taps.ug_in).flatness;
    flat["down_in"] = flatness_report("down_in", taps.down_in).flatness;
    flat["block_sum"] = block_flatness(cfg, model.blocks[l], ts[l], h);
    layers.push_back({{"layer", l}, {"mean_mse", mean}, {"flatness", flat}});
    h = next;
  }
  emit_json(o, {{"mode", rc.mode},
                {"transform", transform_variant_name(rc.transform)},
                {"samples", in.samples.size()},
                {"grid_sum", land.sum()},
                {"final_layer_mse",
                 [&] {
                   double s = 0.0;
                   for (std::size_t t = 0; t < land.tokens; ++t) s += land.at(land.layers - 1, t);
                   return s / static_cast<double>(land.tokens);
                 }()},
                {"layers", layers}});
  return 0;
}

int cmd_overhead(const Options& o) {
  const RunConfig rc = load(o);
  std::ostringstream out;
  json j;

  out << "# decomposition: n,n1,n2,memory_saving,flops_saving\n";
  json dec = json::array();
  for (std::size_t n : {64u, 128u, 2048u, 4096u, 5120u, 8192u, 11008u, 13824u, 14336u, 28672u}) {
    const DecompositionChoice d = choose_decomposition(n);
    const KronSaving s = kron_saving(d.n1, d.n2);
    out << n << "," << d.n1 << "," << d.n2 << "," << fmt(s.mem_factor) << "," << fmt(s.flops_factor) << "\n";
    dec.push_back({{"n", n}, {"n1", d.n1}, {"n2", d.n2}, {"memory_saving", s.mem_factor}, {"flops_saving", s.flops_factor}});
  }
  j["decomposition"] = dec;

  ModelConfig llama;
  llama.hidden = 4096;
  llama.intermediate = 11008;
  llama.heads = 32;
  llama.layers = 32;
  const double seq = 2048.0;
  const double ratio = online_transform_flops(llama, 1.0, seq) / block_flops(llama, 1.0, seq);
  const double mem = transform_memory_bytes(llama, llama.layers);
  out << "# llama-2-7b (hd=4096, hi=11008, a=32, s=2048)\n";
  out << "online_flops_ratio_percent," << fmt(100.0 * ratio) << "\n";
  out << "online_flops_ratio_gated_percent,"
      << fmt(100.0 * online_transform_flops(llama, 1.0, seq) / block_flops_gated(llama, 1.0, seq)) << "\n";
  out << "transform_memory_mib," << fmt(mem / (1024.0 * 1024.0)) << "\n";
  j["llama2_7b"] = {{"online_flops", online_transform_flops(llama, 1.0, seq)},
                    {"block_flops", block_flops(llama, 1.0, seq)},
                    {"ratio_percent", 100.0 * ratio},
                    {"memory_bytes", mem},
                    {"memory_mib", mem / (1024.0 * 1024.0)}};

  const ModelConfig& t = rc.model;
  const double tiny_formula = online_transform_flops(t, 1.0, static_cast<double>(t.seq_len));
  const double tiny_exact = online_transform_flops_exact(t, 1.0, static_cast<double>(t.seq_len));
  out << "# configured model: formula_flops,exact_flops\n" << fmt(tiny_formula) << "," << fmt(tiny_exact) << "\n";
  j["model"] = {{"config", model_config_to_json(t)}, {"formula_flops", tiny_formula}, {"exact_flops", tiny_exact}};

  const double sram = 101376.0;
  out << "# kernel cases at " << sram << " bytes: n,n1,n2,case,t_n1,b_n1,b_n2\n";
  json kc = json::array();
  const auto tiles = default_tile_options();
  for (std::size_t n : {2048u, 4096u, 5120u, 8192u, 11008u, 13824u, 28672u, 28900u}) {
    const DecompositionChoice d = choose_decomposition(n);
    std::string name;
    json row = {{"n", n}, {"n1", d.n1}, {"n2", d.n2}};
    try {
      const KernelCase k = select_kernel_case(d.n1, d.n2, sram, tiles);
      name = kernel_case_name(k.kind);
      row["case"] = name;
      row["t_n1"] = k.t_n1;
      row["b_n1"] = k.b_n1;
      row["b_n2"] = k.b_n2;
      out << n << "," << d.n1 << "," << d.n2 << "," << name << "," << k.t_n1 << "," << k.b_n1 << "," << k.b_n2 << "\n";
    } catch (const NumericalError&) {
      row["case"] = "infeasible";
      out << n << "," << d.n1 << "," << d.n2 << ",infeasible,0,0,0\n";
    }
    kc.push_back(row);
  }
  j["kernel_cases"] = kc;

  std::cout << out.str();
  if (!o.report.empty()) write_text(o.report, j.dump(2) + "\n");
  return 0;
}

const char* kCsvHelp =
    "CSV outputs:\n"
    "  calibrate --report: epoch,block,loss,flatness (epoch 0 = before training)\n"
    "  eval --report:      layer,token,mse (layers x seq_len rows)\n"
    "Exit codes: 0 ok, 2 configuration error, 3 numerical failure, 4 I/O error.\n"
    "FLATKIT_THREADS caps the OpenMP thread count.";

}  // namespace

int main(int argc, char** argv) {
  configure_threads_from_env();
  CLI::App app{"FlatQuant-style post-training quantization on synthetic tiny transformers"};
  app.footer(kCsvHelp);
  app.require_subcommand(1);
  Options o;
  std::uint64_t seed = 0;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "Run configuration JSON")->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "Override the configured seed")->each([&](const std::string&) { o.seed = seed; });
    sub->add_option("--mode", o.mode, "Quantization mode")->check(CLI::IsMember({"w4a4kv4", "w4", "kv4", "off"}));
    sub->add_option("--summary", o.summary, "Write the JSON summary here instead of stdout");
  };

  CLI::App* gen = app.add_subcommand("gen", "Synthesize a tiny model and calibration data");
  common(gen);
  gen->add_option("--out", o.out, "Output directory (model.flatkit, data.flatkit)")->required();

  CLI::App* cal = app.add_subcommand("calibrate", "Learn per-block transforms, scales and clipping");
  common(cal);
  cal->add_option("--model", o.model, "Model container")->required();
  cal->add_option("--data", o.data, "Data container")->required();
  cal->add_option("--out", o.out, "Output transforms container")->required();
  cal->add_option("--report", o.report, "Trace CSV path (stdout if omitted)");

  CLI::App* ev = app.add_subcommand("eval", "Quantization error landscape and flatness for a transform variant");
  common(ev);
  ev->add_option("--model", o.model, "Model container")->required();
  ev->add_option("--data", o.data, "Data container")->required();
  ev->add_option("--transforms", o.transforms, "Transforms container (flat variant)");
  ev->add_option("--transform", o.transform, "Transform variant")
      ->check(CLI::IsMember({"identity", "scaling", "hadamard", "flat"}));
  ev->add_option("--report", o.report, "Landscape CSV path");

  CLI::App* ov = app.add_subcommand("overhead", "FLOPs, memory and kernel-case tables");
  common(ov);
  ov->add_option("--report", o.report, "JSON report path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (gen->parsed()) return cmd_gen(o);
    if (cal->parsed()) return cmd_calibrate(o);
    if (ev->parsed()) return cmd_eval(o);
    if (ov->parsed()) return cmd_overhead(o);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DimensionError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitIo;
  }
  return 0;
}
