#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "flatkit/calibrate.hpp"
#include "flatkit/matrix.hpp"
#include "flatkit/model.hpp"

namespace flatkit {

/// Tensor file: 8-byte magic, u64 little-endian header length, UTF-8 JSON header with a
/// manifest of {name, shape, dtype, offset}, then little-endian float32 payload.
/// Offsets are relative to the payload start.
struct Container {
  static constexpr int kFormatVersion = 1;

  struct Tensor {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<float> data;
  };

  std::string kind;       // "model", "data" or "transforms"
  nlohmann::json meta = nlohmann::json::object();
  std::vector<Tensor> tensors;

  bool has(const std::string& name) const;
  const Tensor& get(const std::string& name) const;
  void add(std::string name, std::vector<std::size_t> shape, std::vector<float> data);
  void add(std::string name, const Matrix& m);
  void add(std::string name, const std::vector<double>& v);
  Matrix matrix(const std::string& name) const;
  std::vector<double> vector(const std::string& name) const;
};

std::string serialize(const Container& c);
/// Throws IoError on a malformed or inconsistent byte stream.
Container deserialize(const std::string& bytes);
void write_container(const std::filesystem::path& path, const Container& c);
Container read_container(const std::filesystem::path& path);

Container model_to_container(const TinyModel& model);
TinyModel model_from_container(const Container& c);

Container samples_to_container(const std::vector<Matrix>& samples, const std::vector<std::size_t>& outlier_channels);
std::vector<Matrix> samples_from_container(const Container& c, const ModelConfig& cfg);

/// Absent transform components are stored as identity markers in the header.
Container transforms_to_container(const std::vector<BlockTransformSet>& sets, const ModelConfig& cfg);
std::vector<BlockTransformSet> transforms_from_container(const Container& c, const ModelConfig& cfg);


}  // namespace flatkit
