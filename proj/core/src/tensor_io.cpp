#include "pem/tensor_io.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <nlohmann/json.hpp>
#include <unordered_set>

namespace pem {

namespace {

using nlohmann::json;

template <typename T>
T to_little(T value) {
  if constexpr (std::endian::native == std::endian::little) {
    return value;
  } else {
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    std::reverse(std::begin(bytes), std::end(bytes));
    std::memcpy(&value, bytes, sizeof(T));
    return value;
  }
}

template <typename T>
void put(std::string& out, T value) {
  value = to_little(value);
  const auto* p = reinterpret_cast<const char*>(&value);
  out.append(p, sizeof(T));
}

template <typename T>
T get(std::string_view bytes, std::size_t offset) {
  T value;
  std::memcpy(&value, bytes.data() + offset, sizeof(T));
  return to_little(value);
}

std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "f64") return 8;
  if (dtype == "f32") return 4;
  throw FormatError("unsupported dtype: " + dtype);
}

}  // namespace

std::string encode_tensors(const std::vector<NamedTensor>& tensors) {
  json header;
  header["tensors"] = json::array();
  std::uint64_t offset = 0;
  std::unordered_set<std::string> names;
  for (const auto& [name, tensor] : tensors) {
    if (!names.insert(name).second) throw FormatError("duplicate tensor name: " + name);
    header["tensors"].push_back(
        {{"name", name}, {"dtype", "f64"}, {"shape", tensor.shape()}, {"offset", offset}});
    offset += tensor.numel() * sizeof(double);
  }
  const std::string text = header.dump();
  std::string out(kTensorFileMagic);
  put<std::uint64_t>(out, text.size());
  out += text;
  out.reserve(out.size() + offset);
  for (const auto& item : tensors) {
    for (double v : item.tensor.values()) put<double>(out, v);
  }
  return out;
}

std::vector<NamedTensor> decode_tensors(std::string_view bytes) {
  const std::size_t prefix = kTensorFileMagic.size() + sizeof(std::uint64_t);
  if (bytes.size() < prefix || bytes.substr(0, kTensorFileMagic.size()) != kTensorFileMagic) {
    throw FormatError("not a PEMCKPT1 tensor file");
  }
  const auto header_len = get<std::uint64_t>(bytes, kTensorFileMagic.size());
  if (header_len > bytes.size() - prefix) throw FormatError("truncated header");
  json header;
  try {
    header = json::parse(bytes.substr(prefix, header_len));
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed header: ") + e.what());
  }
  const std::string_view payload = bytes.substr(prefix + header_len);
  std::vector<NamedTensor> out;
  try {
    for (const auto& entry : header.at("tensors")) {
      const auto name = entry.at("name").get<std::string>();
      const auto dtype = entry.at("dtype").get<std::string>();
      const auto shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("offset").get<std::uint64_t>();
      const std::size_t width = dtype_size(dtype);
      const std::size_t count = numel(shape);
      if (offset > payload.size() || count * width > payload.size() - offset) {
        throw FormatError("payload too short for tensor " + name);
      }
      std::vector<double> values(count);
      for (std::size_t i = 0; i < count; ++i) {
        values[i] = width == 8 ? get<double>(payload, offset + i * 8)
                               : static_cast<double>(get<float>(payload, offset + i * 4));
      }
      out.push_back({name, Tensor(shape, std::move(values))});
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed header entry: ") + e.what());
  } catch (const ShapeError& e) {
    throw FormatError(std::string("bad tensor shape: ") + e.what());
  }
  return out;
}

void save_tensors(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  const std::string bytes = encode_tensors(tensors);
  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw std::runtime_error("cannot open for writing: " + path.string());
  file.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!file) throw std::runtime_error("write failed: " + path.string());
}

std::vector<NamedTensor> load_tensors(const std::filesystem::path& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw std::runtime_error("cannot open for reading: " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
  return decode_tensors(bytes);
}

const Tensor& find_tensor(const std::vector<NamedTensor>& tensors, std::string_view name) {
  for (const auto& item : tensors) {
    if (item.name == name) return item.tensor;
  }
  throw FormatError("tensor file has no entry named " + std::string(name));
}

void save_checkpoint(const std::filesystem::path& path, const ParameterStore& params) {
  std::vector<NamedTensor> items;
  for (const auto& p : params.all()) items.push_back({p.name, p.tensor});
  save_tensors(path, items);
}

void restore_parameters(const std::vector<NamedTensor>& stored, ParameterStore& params) {
  if (stored.size() != params.size()) {
    throw FormatError("checkpoint has " + std::to_string(stored.size()) + " tensors, model expects " +
                      std::to_string(params.size()));
  }
  for (const auto& [name, tensor] : stored) {
    if (!params.contains(name)) throw FormatError("checkpoint tensor not in model: " + name);
    Tensor target = params.get(name);
    if (target.shape() != tensor.shape()) {
      throw FormatError("shape mismatch for " + name + ": checkpoint " + to_string(tensor.shape()) +
                        ", model " + to_string(target.shape()));
    }
  }
  for (const auto& [name, tensor] : stored) {
    Tensor target = params.get(name);
    std::ranges::copy(tensor.values(), target.mutable_values().begin());
  }
}

void load_checkpoint(const std::filesystem::path& path, ParameterStore& params) {
  restore_parameters(load_tensors(path), params);
}

}  // namespace pem
