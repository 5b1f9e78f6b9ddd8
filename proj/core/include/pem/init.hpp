#pragma once

#include <cstdint>
#include <random>

#include "pem/tensor.hpp"

namespace pem {

// Deterministic weight source; one per model build.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : engine_(seed) {}

  Tensor uniform(Shape shape, double bound);
  Tensor normal(Shape shape, double stddev);
  // U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  Tensor fan_in_uniform(Shape shape, std::size_t fan_in);

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace pem
