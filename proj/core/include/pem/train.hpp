#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include "pem/config.hpp"
#include "pem/decoder.hpp"
#include "pem/losses.hpp"
#include "pem/metrics.hpp"

namespace pem {

struct AdamConfig {
  double lr = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(ParameterStore& params, AdamConfig config);
  // Applies one update from the accumulated gradients, then clears them.
  void step();
  std::size_t steps() const { return t_; }

 private:
  ParameterStore* params_;
  AdamConfig config_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

struct Sample {
  Tensor image;    // [3, H, W]
  Target target;   // at stride 4
  LabelMap labels; // at stride 4, with instance ids
};

// Two 64x64 images of axis-aligned rectangles on a noisy background. Class 0
// is the background (stuff); image A holds classes 1 and 2, image B 1, 2 and 3.
std::vector<Sample> make_toy_dataset(std::uint64_t seed = 7);

// N=8, C=32, stages=2, K=4 with class 0 as stuff.
ModelConfig toy_model_config();

struct TrainStep {
  std::size_t step = 0;
  double total = 0;               // summed over samples
  std::vector<LayerLoss> layers;  // summed over samples
};

struct TrainResult {
  std::vector<TrainStep> steps;  // loss before each update
  double final_loss = 0;         // after the last update
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(std::size_t step, const std::string& what);
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

using StepCallback = std::function<void(const TrainStep&)>;

// Full-batch Adam on the summed deep-supervision loss.
TrainResult train_toy(Model& model, std::span<const Sample> data, std::size_t steps, const AdamConfig& optimizer,
                      const StepCallback& on_step = {});

// Loss of the current weights, summed over samples, without recording a graph.
double evaluate_loss(const Model& model, std::span<const Sample> data, std::vector<LayerLoss>* layers = nullptr);

}  // namespace pem
