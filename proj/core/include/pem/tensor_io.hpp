#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "pem/tensor.hpp"

namespace pem {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Container layout shared by checkpoints and CLI tensor files:
//   8 bytes   magic "PEMCKPT1"
//   u64 LE    header length in bytes
//   header    UTF-8 JSON {"tensors": [{"name", "dtype", "shape", "offset"}]}
//   payload   little-endian values; offsets are relative to payload start
inline constexpr std::string_view kTensorFileMagic = "PEMCKPT1";

std::string encode_tensors(const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> decode_tensors(std::string_view bytes);

void save_tensors(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_tensors(const std::filesystem::path& path);

// Finds `name` or throws FormatError.
const Tensor& find_tensor(const std::vector<NamedTensor>& tensors, std::string_view name);

void save_checkpoint(const std::filesystem::path& path, const ParameterStore& params);

// Copies every stored parameter into `params`. Missing names, extra names
// and shape mismatches are errors.
void load_checkpoint(const std::filesystem::path& path, ParameterStore& params);
void restore_parameters(const std::vector<NamedTensor>& stored, ParameterStore& params);

}  // namespace pem
