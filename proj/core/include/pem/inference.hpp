#pragma once

#include <cstdint>
#include <vector>

#include "pem/config.hpp"
#include "pem/losses.hpp"
#include "pem/metrics.hpp"
#include "pem/prediction.hpp"

namespace pem {

// label(pixel) = argmax_k sum_q p_q(k) * sigmoid(mask_q(pixel)) over the K
// real classes; ties go to the lowest class.
LabelMap semantic_inference(const MaskPrediction& pred, ClassificationLoss kind);

struct PanopticSegment {
  std::int32_t id = 0;  // instance id in the map, starting at 1
  std::int32_t class_id = 0;
  bool is_thing = true;
  std::size_t area = 0;
  double score = 0;
};

struct PanopticResult {
  LabelMap map;  // void where no segment survives
  std::vector<PanopticSegment> segments;
};

// Keeps queries whose best class is real with probability > confidence; each
// pixel goes to the kept query maximising score * sigmoid(mask). A segment
// survives when it keeps at least `overlap` of its own foreground. Stuff
// segments of one class merge.
PanopticResult panoptic_inference(const MaskPrediction& pred, const InferenceThresholds& thresholds,
                                  const std::vector<bool>& is_thing, ClassificationLoss kind);

}  // namespace pem
