#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pem/losses.hpp"
#include "pem/pemca.hpp"
#include "pem/pixel_decoder.hpp"

namespace pem {

struct DecoderConfig {
  std::size_t stages = 2;  // three layers each, one per scale F4, F3, F2
  std::size_t queries = 100;
  std::size_t channels = 256;
  std::size_t heads = 8;
  std::size_t ffn_expansion = 8;
  std::size_t proj_dim = 0;  // 0 means channels
  AttentionVariant variant = AttentionVariant::pemca;
  bool zero_init_out = false;

  std::size_t layers() const { return 3 * stages; }
  std::size_t attention_dim() const { return proj_dim == 0 ? channels : proj_dim; }
};

struct InferenceThresholds {
  double confidence = 0.8;
  double overlap = 0.8;
};

struct ModelConfig {
  DecoderConfig decoder;
  PixelDecoderConfig pixel;
  std::size_t num_classes = 19;  // K, excluding "no object"
  std::uint64_t seed = 0;
  InferenceThresholds thresholds;
  std::vector<std::size_t> stuff_classes;
  LossConfig loss;

  PemcaConfig attention() const;
  std::vector<bool> thing_mask() const;
  void validate() const;
};

// Missing keys keep their defaults; unknown keys are rejected.
ModelConfig parse_model_config(std::string_view json_text);
ModelConfig load_model_config(const std::filesystem::path& path);
std::string to_json(const ModelConfig& config);

// FNV-1a over the canonical JSON form.
std::uint64_t config_hash(const ModelConfig& config);
std::string hex_hash(std::uint64_t hash);

}  // namespace pem
