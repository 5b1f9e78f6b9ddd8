#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "pem/prediction.hpp"
#include "pem/tensor.hpp"

namespace pem {

enum class ClassificationLoss { bce, softmax_ce };

std::string_view to_string(ClassificationLoss kind);
ClassificationLoss parse_classification_loss(std::string_view name);

struct LossWeights {
  double cls = 2.0;
  double mask_bce = 5.0;
  double dice = 5.0;
};

struct LossConfig {
  LossWeights weights;
  ClassificationLoss classification = ClassificationLoss::bce;
  double no_object_weight = 1.0;  // weight of unmatched-query rows in cls_loss
  bool supervise_bootstrap = true;
};

struct GroundTruthSegment {
  std::size_t class_id = 0;
  std::vector<double> mask;  // [H_1 * W_1], entries 0 or 1
};

struct Target {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<GroundTruthSegment> segments;

  void validate(std::size_t num_classes) const;
};

using CostMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Assignment {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (query, segment), sorted by query
  std::vector<std::ptrdiff_t> segment_of_query;            // -1 = "no object"

  double total_cost(const CostMatrix& cost) const;
};

inline constexpr double kDiceSmoothing = 1.0;

// Mean over rows of 1 - (2 sum(sigmoid(x) t) + 1) / (sum sigmoid(x) + sum t + 1).
// A 1-D input is one row.
Tensor dice_loss(const Tensor& logits, const Tensor& target);

// Mean of softplus(x) - x t over every element.
Tensor mask_bce(const Tensor& logits, const Tensor& target);

// Unmatched queries target the "no object" column.
Tensor cls_loss(const Tensor& class_logits, const Assignment& assignment, std::span<const GroundTruthSegment> segments,
                const LossConfig& config);

// Class probabilities used by the matcher and by inference: sigmoid per column
// for bce, softmax over K+1 columns for softmax_ce.
std::vector<double> class_probabilities(const Tensor& class_logits, ClassificationLoss kind);

// cost[q,s] = w_cls * (-p_q(c_s)) + w_bce * bce(q,s) + w_dice * dice(q,s).
CostMatrix build_cost_matrix(const MaskPrediction& pred, const Target& target, const LossConfig& config);

// Minimum-cost injective matching of the smaller side into the larger.
Assignment hungarian_match(const CostMatrix& cost);

struct LayerLoss {
  double cls = 0;
  double mask_bce = 0;
  double dice = 0;
  double total = 0;  // weighted
  bool supervised = true;
};

struct LossResult {
  Tensor total;  // scalar, differentiable
  std::vector<LayerLoss> layers;
  std::vector<Assignment> assignments;
};

// Each prediction is matched independently and scored; the total sums the
// supervised layers; predictions[0] is the bootstrap output. Passing `frozen`
// reuses those assignments.
LossResult total_loss(std::span<const MaskPrediction> predictions, const Target& target, const LossConfig& config,
                      const std::vector<Assignment>* frozen = nullptr);

}  // namespace pem
