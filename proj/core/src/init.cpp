#include "pem/init.hpp"

#include <cmath>

namespace pem {

Tensor Initializer::uniform(Shape shape, double bound) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> values(numel(shape));
  for (double& v : values) v = dist(engine_);
  return Tensor(std::move(shape), std::move(values));
}

Tensor Initializer::normal(Shape shape, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> values(numel(shape));
  for (double& v : values) v = dist(engine_);
  return Tensor(std::move(shape), std::move(values));
}

Tensor Initializer::fan_in_uniform(Shape shape, std::size_t fan_in) {
  return uniform(std::move(shape), 1.0 / std::sqrt(static_cast<double>(fan_in)));
}

}  // namespace pem
