#pragma once

#include <random>
#include <vector>

#include "pem/decoder.hpp"
#include "pem/losses.hpp"
#include "pem/train.hpp"
#include "support/oracles.hpp"

namespace pem::testing {

// Zero-initialized offsets put every deformable sample exactly on the pixel
// grid, where bilinear sampling has a kink. Small random offsets move the
// check to a generic, differentiable point.
inline void jitter_offsets(Model& model, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> mag(0.1, 0.4), small(-0.01, 0.01);
  for (const auto& p : model.parameters().all()) {
    if (p.name.find(".offset.") == std::string::npos) continue;
    Tensor t = p.tensor;
    for (double& v : t.mutable_values()) {
      v = p.name.ends_with(".bias") ? (rng() % 2 ? 1.0 : -1.0) * mag(rng) : small(rng);
    }
  }
}

// Finite-difference check of the summed deep-supervision loss with respect to
// `coords_per_param` random entries of every parameter tensor. Attention
// masks, prototype indices and the matching come from one recording pass and
// stay fixed.
inline GradCheck end_to_end_gradcheck(const Model& model, const Sample& sample, std::size_t coords_per_param,
                                      std::uint64_t seed) {
  const LossConfig& loss = model.config().loss;
  DecisionTrace trace;
  std::vector<Assignment> assignments;
  {
    NoGradGuard no_grad;
    ForwardOptions record;
    record.trace = &trace;
    const ForwardResult fwd = model.forward(sample.image, record);
    assignments = total_loss(fwd.predictions, sample.target, loss).assignments;
  }
  trace.frozen = true;
  ForwardOptions replay;
  replay.trace = &trace;
  std::vector<Tensor> leaves;
  for (const auto& p : model.parameters().all()) leaves.push_back(p.tensor);
  return gradcheck(
      [&] {
        const ForwardResult fwd = model.forward(sample.image, replay);
        return total_loss(fwd.predictions, sample.target, loss, &assignments).total;
      },
      leaves, 1e-5, coords_per_param, seed);
}

}  // namespace pem::testing
