#include "flatkit/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>
#include <unordered_set>

#include "flatkit/error.hpp"
#include "flatkit/run_config.hpp"

namespace flatkit {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'F', 'L', 'A', 'T', 'K', 'I', 'T', '\0'};

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_u64(const std::string& in, std::size_t pos) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(in[pos + static_cast<std::size_t>(i)]);
  return v;
}

std::size_t element_count(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) {
    if (d != 0 && n > (std::numeric_limits<std::size_t>::max() / 4) / d)
      throw IoError("container: tensor shape overflows");
    n *= d;
  }
  return n;
}

}  // namespace

bool Container::has(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return true;
  return false;
}

const Container::Tensor& Container::get(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t;
  throw IoError("container: missing tensor '" + name + "'");
}

void Container::add(std::string name, std::vector<std::size_t> shape, std::vector<float> data) {
  if (has(name)) throw IoError("container: duplicate tensor '" + name + "'");
  if (element_count(shape) != data.size())
    throw DimensionError("container: tensor '" + name + "' data does not match its shape");
  tensors.push_back({std::move(name), std::move(shape), std::move(data)});
}

void Container::add(std::string name, const Matrix& m) {
  std::vector<float> data(m.data().begin(), m.data().end());
  add(std::move(name), {m.rows(), m.cols()}, std::move(data));
}

void Container::add(std::string name, const std::vector<double>& v) {
  add(std::move(name), {v.size()}, std::vector<float>(v.begin(), v.end()));
}

Matrix Container::matrix(const std::string& name) const {
  const Tensor& t = get(name);
  if (t.shape.size() != 2) throw IoError("container: tensor '" + name + "' is not a matrix");
  return Matrix(t.shape[0], t.shape[1], std::vector<double>(t.data.begin(), t.data.end()));
}

std::vector<double> Container::vector(const std::string& name) const {
  const Tensor& t = get(name);
  return {t.data.begin(), t.data.end()};
}

std::string serialize(const Container& c) {
  json manifest = json::array();
  std::uint64_t offset = 0;
  for (const auto& t : c.tensors) {
    manifest.push_back({{"name", t.name}, {"shape", t.shape}, {"dtype", "f32le"}, {"offset", offset}});
    offset += 4 * t.data.size();
  }
  const json header = {{"format", "flatkit"}, {"version", Container::kFormatVersion}, {"kind", c.kind},
                       {"meta", c.meta}, {"payload_bytes", offset}, {"tensors", manifest}};
  const std::string text = header.dump();
  std::string out(kMagic, sizeof kMagic);
  put_u64(out, text.size());
  out += text;
  out.reserve(out.size() + offset);
  for (const auto& t : c.tensors)
    for (float f : t.data) {
      const auto bits = std::bit_cast<std::uint32_t>(f);
      for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
    }
  return out;
}

Container deserialize(const std::string& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0)
    throw IoError("container: bad magic");
  const std::uint64_t hlen = get_u64(bytes, 8);
  if (hlen > bytes.size() - 16) throw IoError("container: header length out of bounds");
  json header;
  try {
    header = json::parse(bytes.substr(16, hlen));
  } catch (const json::exception& e) {
    throw IoError(std::string("container: malformed header: ") + e.what());
  }
  Container c;
  try {
    if (header.at("version").get<int>() != Container::kFormatVersion)
      throw IoError("container: unsupported format version");
    c.kind = header.at("kind").get<std::string>();
    c.meta = header.at("meta");
    const std::size_t payload_start = 16 + hlen;
    const std::uint64_t payload = bytes.size() - payload_start;
    if (header.at("payload_bytes").get<std::uint64_t>() != payload)
      throw IoError("container: payload size mismatch");
    std::unordered_set<std::string> names;
    std::vector<std::pair<std::uint64_t, std::uint64_t>> spans;
    for (const auto& e : header.at("tensors")) {
      Container::Tensor t;
      t.name = e.at("name").get<std::string>();
      for (const auto& d : e.at("shape"))
        if (!d.is_number_unsigned()) throw IoError("container: shape of " + t.name + " must be non-negative integers");
      t.shape = e.at("shape").get<std::vector<std::size_t>>();
      if (e.at("dtype").get<std::string>() != "f32le") throw IoError("container: unsupported dtype for " + t.name);
      if (!names.insert(t.name).second) throw IoError("container: duplicate tensor name " + t.name);
      const std::uint64_t off = e.at("offset").get<std::uint64_t>();
      const std::uint64_t len = 4 * static_cast<std::uint64_t>(element_count(t.shape));
      if (off > payload || len > payload - off) throw IoError("container: tensor " + t.name + " out of bounds");
      spans.emplace_back(off, len);
      t.data.resize(len / 4);
      for (std::size_t i = 0; i < t.data.size(); ++i) {
        std::uint32_t bits = 0;
        for (int b = 3; b >= 0; --b)
          bits = (bits << 8) | static_cast<unsigned char>(bytes[payload_start + off + 4 * i + static_cast<std::size_t>(b)]);
        t.data[i] = std::bit_cast<float>(bits);
      }
      c.tensors.push_back(std::move(t));
    }
    std::sort(spans.begin(), spans.end());
    for (std::size_t i = 1; i < spans.size(); ++i)
      if (spans[i - 1].first + spans[i - 1].second > spans[i].first)
        throw IoError("container: overlapping tensors");
  } catch (const json::exception& e) {
    throw IoError(std::string("container: malformed manifest: ") + e.what());
  }
  return c;
}

void write_container(const std::filesystem::path& path, const Container& c) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  const std::string bytes = serialize(c);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

Container read_container(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return deserialize(ss.str());
}

Container model_to_container(const TinyModel& model) {
  Container c;
  c.kind = "model";
  c.meta = {{"config", model_config_to_json(model.config)}};
  c.add("embedding", model.embedding);
  for (std::size_t l = 0; l < model.blocks.size(); ++l) {
    const BlockWeights& b = model.blocks[l];
    const std::string p = "block" + std::to_string(l) + ".";
    c.add(p + "attn_norm", b.attn_norm);
    c.add(p + "ffn_norm", b.ffn_norm);
    c.add(p + "wq", b.wq);
    c.add(p + "wk", b.wk);
    c.add(p + "wv", b.wv);
    c.add(p + "wo", b.wo);
    c.add(p + "w_gate", b.w_gate);
    c.add(p + "w_up", b.w_up);
    c.add(p + "w_down", b.w_down);
  }
  return c;
}

namespace {

void expect_kind(const Container& c, const char* kind) {
  if (c.kind != kind) throw IoError("container holds '" + c.kind + "', expected '" + kind + "'");
}

void expect_shape(const Matrix& m, std::size_t r, std::size_t cols, const std::string& name) {
  if (m.rows() != r || m.cols() != cols) throw IoError("container: tensor " + name + " has the wrong shape");
}

}  // namespace

TinyModel model_from_container(const Container& c) {
  expect_kind(c, "model");
  TinyModel m;
  try {
    m.config = model_config_from_json(c.meta.at("config"));
  } catch (const json::exception& e) {
    throw IoError(std::string("model container: ") + e.what());
  }
  const ModelConfig& cfg = m.config;
  m.embedding = c.matrix("embedding");
  expect_shape(m.embedding, cfg.vocab, cfg.hidden, "embedding");
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string p = "block" + std::to_string(l) + ".";
    BlockWeights b;
    b.attn_norm = c.vector(p + "attn_norm");
    b.ffn_norm = c.vector(p + "ffn_norm");
    if (b.attn_norm.size() != cfg.hidden || b.ffn_norm.size() != cfg.hidden)
      throw IoError("container: norm gains of " + p + " have the wrong length");
    auto load = [&](const char* name, std::size_t r, std::size_t cols) {
      Matrix w = c.matrix(p + name);
      expect_shape(w, r, cols, p + name);
      return w;
    };
    b.wq = load("wq", cfg.hidden, cfg.hidden);
    b.wk = load("wk", cfg.hidden, cfg.hidden);
    b.wv = load("wv", cfg.hidden, cfg.hidden);
    b.wo = load("wo", cfg.hidden, cfg.hidden);
    b.w_gate = load("w_gate", cfg.intermediate, cfg.hidden);
    b.w_up = load("w_up", cfg.intermediate, cfg.hidden);
    b.w_down = load("w_down", cfg.hidden, cfg.intermediate);
    m.blocks.push_back(std::move(b));
  }
  return m;
}

Container samples_to_container(const std::vector<Matrix>& samples, const std::vector<std::size_t>& outlier_channels) {
  Container c;
  c.kind = "data";
  c.meta = {{"samples", samples.size()}, {"outlier_channels", outlier_channels}};
  for (std::size_t i = 0; i < samples.size(); ++i) c.add("sample" + std::to_string(i), samples[i]);
  return c;
}

std::vector<Matrix> samples_from_container(const Container& c, const ModelConfig& cfg) {
  expect_kind(c, "data");
  std::size_t n = 0;
  try {
    n = c.meta.at("samples").get<std::size_t>();
  } catch (const json::exception& e) {
    throw IoError(std::string("data container: ") + e.what());
  }
  std::vector<Matrix> out;
  for (std::size_t i = 0; i < n; ++i) {
    const std::string name = "sample" + std::to_string(i);
    out.push_back(c.matrix(name));
    expect_shape(out.back(), cfg.seq_len, cfg.hidden, name);
  }
  return out;
}

Container transforms_to_container(const std::vector<BlockTransformSet>& sets, const ModelConfig& cfg) {
  Container c;
  c.kind = "transforms";
  json blocks = json::array();
  for (std::size_t l = 0; l < sets.size(); ++l) {
    BlockTransformSet s = sets[l];
    auto kron = [](const std::optional<KroneckerTransform>& k) -> json {
      if (!k) return "identity";
      return {{"n1", k->p1.dim()}, {"n2", k->p2.dim()}};
    };
    auto svd = [](const std::optional<SvdInvertible>& p) -> json {
      if (!p) return "identity";
      return {{"n", p->dim()}};
    };
    auto vec = [](const std::optional<std::vector<double>>& v) -> json {
      if (!v) return "identity";
      return {{"n", v->size()}};
    };
    blocks.push_back({{"p_a", kron(s.p_a)},
                      {"p_ug", kron(s.p_ug)},
                      {"p_d", kron(s.p_d)},
                      {"p_o", svd(s.p_o)},
                      {"p_v", svd(s.p_v)},
                      {"p_h", s.p_h ? json{{"n", s.p_h->dim}} : json("identity")},
                      {"log_c_a", vec(s.log_c_a)},
                      {"log_c_ug", vec(s.log_c_ug)},
                      {"log_c_d", vec(s.log_c_d)},
                      {"clip_logits", vec(s.clip_logits)}});
    for (const ParamSlot& slot : parameter_slots(s))
      c.add("block" + std::to_string(l) + "." + slot.name, *slot.values);
  }
  c.meta = {{"config", model_config_to_json(cfg)}, {"blocks", blocks}};
  return c;
}

std::vector<BlockTransformSet> transforms_from_container(const Container& c, const ModelConfig& cfg) {
  expect_kind(c, "transforms");
  std::vector<BlockTransformSet> out;
  try {
    const json& blocks = c.meta.at("blocks");
    if (blocks.size() != cfg.layers) throw IoError("transforms container: block count does not match the model");
    for (std::size_t l = 0; l < blocks.size(); ++l) {
      const json& b = blocks[l];
      BlockTransformSet s;
      auto svd = [](std::size_t n) { return SvdInvertible(n); };
      auto kron = [&](const json& j) -> std::optional<KroneckerTransform> {
        if (j.is_string()) return std::nullopt;
        return KroneckerTransform{svd(j.at("n1").get<std::size_t>()), svd(j.at("n2").get<std::size_t>())};
      };
      auto vec = [](const json& j) -> std::optional<std::vector<double>> {
        if (j.is_string()) return std::nullopt;
        return std::vector<double>(j.at("n").get<std::size_t>(), 0.0);
      };
      s.p_a = kron(b.at("p_a"));
      s.p_ug = kron(b.at("p_ug"));
      s.p_d = kron(b.at("p_d"));
      if (!b.at("p_o").is_string()) s.p_o = svd(b.at("p_o").at("n").get<std::size_t>());
      if (!b.at("p_v").is_string()) s.p_v = svd(b.at("p_v").at("n").get<std::size_t>());
      if (!b.at("p_h").is_string()) {
        const std::size_t n = b.at("p_h").at("n").get<std::size_t>();
        s.p_h = SkewParam(n);
      }
      s.log_c_a = vec(b.at("log_c_a"));
      s.log_c_ug = vec(b.at("log_c_ug"));
      s.log_c_d = vec(b.at("log_c_d"));
      s.clip_logits = vec(b.at("clip_logits"));
      for (const ParamSlot& slot : parameter_slots(s)) {
        const std::vector<double> v = c.vector("block" + std::to_string(l) + "." + slot.name);
        if (v.size() != slot.values->size()) throw IoError("transforms container: " + slot.name + " has the wrong size");
        *slot.values = v;
      }
      s.realize(cfg);  // shape check against the model
      out.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    throw IoError(std::string("transforms container: ") + e.what());
  } catch (const DimensionError& e) {
    throw IoError(std::string("transforms container: ") + e.what());
  }
  return out;
}

}  // namespace flatkit
