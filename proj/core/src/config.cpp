#include "pem/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <nlohmann/json.hpp>
#include <set>
#include <stdexcept>

namespace pem {

namespace {

using nlohmann::json;

void reject_unknown(const json& object, const std::set<std::string>& allowed, const std::string& where) {
  for (const auto& [key, value] : object.items()) {
    if (!allowed.contains(key)) throw std::invalid_argument("unknown config key " + where + key);
  }
}

template <typename T>
void read(const json& object, const char* key, T& out) {
  if (auto it = object.find(key); it != object.end()) out = it->get<T>();
}

}  // namespace

PemcaConfig ModelConfig::attention() const {
  PemcaConfig c;
  c.channels = decoder.channels;
  c.feature_channels = pixel.pixel_channels;
  c.proj_dim = decoder.attention_dim();
  c.heads = decoder.heads;
  c.variant = decoder.variant;
  c.zero_init_out = decoder.zero_init_out;
  return c;
}

std::vector<bool> ModelConfig::thing_mask() const {
  std::vector<bool> things(num_classes, true);
  for (std::size_t c : stuff_classes) {
    if (c < num_classes) things[c] = false;
  }
  return things;
}

void ModelConfig::validate() const {
  if (decoder.queries == 0) throw std::invalid_argument("N must be at least 1");
  if (decoder.channels == 0 || decoder.ffn_expansion == 0) throw std::invalid_argument("decoder widths must be positive");
  if (decoder.channels % decoder.heads != 0) {
    throw std::invalid_argument("C must be divisible by the head count for self-attention");
  }
  if (num_classes == 0) throw std::invalid_argument("num_classes must be positive");
  for (std::size_t c : stuff_classes) {
    if (c >= num_classes) throw std::invalid_argument("stuff class " + std::to_string(c) + " out of range");
  }
  for (double t : {thresholds.confidence, thresholds.overlap}) {
    if (!(t > 0.0 && t < 1.0)) throw std::invalid_argument("inference thresholds must lie in (0,1)");
  }
  if (loss.no_object_weight < 0) throw std::invalid_argument("no_object_weight must be non-negative");
  attention().validate();
  pixel.validate();
}

ModelConfig parse_model_config(std::string_view json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw std::invalid_argument("config must be a JSON object");
  reject_unknown(j,
                 {"stages", "N", "C", "D", "heads", "ffn_expansion", "C_px", "variant", "num_classes", "seed",
                  "thresholds", "backbone_widths", "csm_ratio", "upsample", "norm", "zero_init_out",
                  "stuff_classes", "loss"},
                 "");
  ModelConfig c;
  try {
    read(j, "stages", c.decoder.stages);
    read(j, "N", c.decoder.queries);
    read(j, "C", c.decoder.channels);
    read(j, "D", c.decoder.proj_dim);
    read(j, "heads", c.decoder.heads);
    read(j, "ffn_expansion", c.decoder.ffn_expansion);
    read(j, "C_px", c.pixel.pixel_channels);
    read(j, "num_classes", c.num_classes);
    read(j, "seed", c.seed);
    read(j, "zero_init_out", c.decoder.zero_init_out);
    read(j, "csm_ratio", c.pixel.csm_ratio);
    read(j, "stuff_classes", c.stuff_classes);
    if (j.contains("variant")) c.decoder.variant = parse_variant(j["variant"].get<std::string>());
    if (j.contains("upsample")) c.pixel.upsample = parse_upsample(j["upsample"].get<std::string>());
    if (j.contains("norm")) c.pixel.norm = parse_feature_norm(j["norm"].get<std::string>());
    if (j.contains("backbone_widths")) {
      const auto widths = j["backbone_widths"].get<std::vector<std::size_t>>();
      if (widths.size() != 4) throw std::invalid_argument("backbone_widths needs four entries");
      std::copy(widths.begin(), widths.end(), c.pixel.backbone_widths.begin());
    }
    if (j.contains("thresholds")) {
      const json& t = j["thresholds"];
      reject_unknown(t, {"confidence", "overlap"}, "thresholds.");
      read(t, "confidence", c.thresholds.confidence);
      read(t, "overlap", c.thresholds.overlap);
    }
    if (j.contains("loss")) {
      const json& l = j["loss"];
      reject_unknown(l, {"weights", "classification", "no_object_weight", "supervise_bootstrap"}, "loss.");
      if (l.contains("weights")) {
        const json& w = l["weights"];
        reject_unknown(w, {"cls", "mask_bce", "dice"}, "loss.weights.");
        read(w, "cls", c.loss.weights.cls);
        read(w, "mask_bce", c.loss.weights.mask_bce);
        read(w, "dice", c.loss.weights.dice);
      }
      if (l.contains("classification")) {
        c.loss.classification = parse_classification_loss(l["classification"].get<std::string>());
      }
      read(l, "no_object_weight", c.loss.no_object_weight);
      read(l, "supervise_bootstrap", c.loss.supervise_bootstrap);
    }
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config field has the wrong type: ") + e.what());
  }
  c.validate();
  return c;
}

ModelConfig load_model_config(const std::filesystem::path& path) {
  std::ifstream file(path);
  if (!file) throw std::runtime_error("cannot open config: " + path.string());
  const std::string text((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
  return parse_model_config(text);
}

std::string to_json(const ModelConfig& c) {
  json j;
  j["stages"] = c.decoder.stages;
  j["N"] = c.decoder.queries;
  j["C"] = c.decoder.channels;
  j["D"] = c.decoder.attention_dim();
  j["heads"] = c.decoder.heads;
  j["ffn_expansion"] = c.decoder.ffn_expansion;
  j["C_px"] = c.pixel.pixel_channels;
  j["variant"] = std::string(to_string(c.decoder.variant));
  j["num_classes"] = c.num_classes;
  j["seed"] = c.seed;
  j["thresholds"] = {{"confidence", c.thresholds.confidence}, {"overlap", c.thresholds.overlap}};
  j["backbone_widths"] = c.pixel.backbone_widths;
  j["csm_ratio"] = c.pixel.csm_ratio;
  j["upsample"] = std::string(to_string(c.pixel.upsample));
  j["norm"] = std::string(to_string(c.pixel.norm));
  j["zero_init_out"] = c.decoder.zero_init_out;
  j["stuff_classes"] = c.stuff_classes;
  j["loss"] = {{"weights", {{"cls", c.loss.weights.cls}, {"mask_bce", c.loss.weights.mask_bce}, {"dice", c.loss.weights.dice}}},
               {"classification", std::string(to_string(c.loss.classification))},
               {"no_object_weight", c.loss.no_object_weight},
               {"supervise_bootstrap", c.loss.supervise_bootstrap}};
  return j.dump(2);
}

std::uint64_t config_hash(const ModelConfig& config) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : to_json(config)) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex_hash(std::uint64_t hash) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash));
  return buf;
}

}  // namespace pem
