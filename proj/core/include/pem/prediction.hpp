#pragma once

#include <cstddef>

#include "pem/tensor.hpp"

namespace pem {

// One deep-supervision output.
struct MaskPrediction {
  Tensor mask_logits;   // [N, H_1, W_1]
  Tensor class_logits;  // [N, K+1]; column K is "no object"

  std::size_t queries() const { return mask_logits.size(0); }
  std::size_t height() const { return mask_logits.size(1); }
  std::size_t width() const { return mask_logits.size(2); }
  std::size_t num_classes() const { return class_logits.size(1) - 1; }
};

}  // namespace pem
