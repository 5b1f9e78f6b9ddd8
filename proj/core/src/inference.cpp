#include "pem/inference.hpp"

#include <cmath>
#include <map>
#include <stdexcept>

namespace pem {

namespace {

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

LabelMap semantic_inference(const MaskPrediction& pred, ClassificationLoss kind) {
  const std::size_t n = pred.queries(), k = pred.num_classes(), k1 = k + 1;
  const std::size_t pixels = pred.height() * pred.width();
  const std::vector<double> prob = class_probabilities(pred.class_logits, kind);
  const auto logits = pred.mask_logits.values();
  std::vector<double> score(k * pixels, 0.0);  // class-major
  for (std::size_t q = 0; q < n; ++q) {
    for (std::size_t p = 0; p < pixels; ++p) {
      const double m = sigmoid_scalar(logits[q * pixels + p]);
      for (std::size_t c = 0; c < k; ++c) score[c * pixels + p] += prob[q * k1 + c] * m;
    }
  }
  LabelMap out{pred.height(), pred.width(), std::vector<std::int32_t>(pixels, 0), {}};
  for (std::size_t p = 0; p < pixels; ++p) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < k; ++c) {
      if (score[c * pixels + p] > score[best * pixels + p]) best = c;
    }
    out.classes[p] = static_cast<std::int32_t>(best);
  }
  return out;
}

PanopticResult panoptic_inference(const MaskPrediction& pred, const InferenceThresholds& thresholds,
                                  const std::vector<bool>& is_thing, ClassificationLoss kind) {
  const std::size_t n = pred.queries(), k = pred.num_classes(), k1 = k + 1;
  const std::size_t pixels = pred.height() * pred.width();
  if (is_thing.size() != k) throw std::invalid_argument("thing/stuff partition must cover every class");
  const std::vector<double> prob = class_probabilities(pred.class_logits, kind);
  const auto logits = pred.mask_logits.values();

  struct Kept {
    std::size_t query;
    std::size_t label;
    double score;
  };
  std::vector<Kept> kept;
  for (std::size_t q = 0; q < n; ++q) {
    std::size_t label = 0;
    for (std::size_t c = 1; c < k1; ++c) {
      if (prob[q * k1 + c] > prob[q * k1 + label]) label = c;
    }
    const double score = prob[q * k1 + label];
    if (label != k && score > thresholds.confidence) kept.push_back({q, label, score});
  }

  PanopticResult result;
  result.map = {pred.height(), pred.width(), std::vector<std::int32_t>(pixels, kVoidLabel),
                std::vector<std::int32_t>(pixels, 0)};
  if (kept.empty()) return result;

  std::vector<std::size_t> owner(pixels, 0);  // index into `kept`
  for (std::size_t p = 0; p < pixels; ++p) {
    double best = -1;
    for (std::size_t i = 0; i < kept.size(); ++i) {
      const double v = kept[i].score * sigmoid_scalar(logits[kept[i].query * pixels + p]);
      if (v > best) {
        best = v;
        owner[p] = i;
      }
    }
  }

  std::map<std::size_t, std::size_t> stuff_segment;  // class -> index into segments
  for (std::size_t i = 0; i < kept.size(); ++i) {
    const std::size_t q = kept[i].query;
    std::size_t original = 0, kept_fg = 0;
    for (std::size_t p = 0; p < pixels; ++p) {
      const bool fg = logits[q * pixels + p] > 0.0;  // sigmoid > 0.5
      original += fg;
      kept_fg += fg && owner[p] == i;
    }
    if (kept_fg == 0) continue;
    if (static_cast<double>(kept_fg) / static_cast<double>(original) < thresholds.overlap) continue;
    const std::size_t label = kept[i].label;
    const bool thing = is_thing[label];
    std::size_t seg;
    if (!thing && stuff_segment.contains(label)) {
      seg = stuff_segment[label];
    } else {
      seg = result.segments.size();
      result.segments.push_back({static_cast<std::int32_t>(seg + 1), static_cast<std::int32_t>(label), thing, 0,
                                 kept[i].score});
      if (!thing) stuff_segment[label] = seg;
    }
    PanopticSegment& s = result.segments[seg];
    for (std::size_t p = 0; p < pixels; ++p) {
      if (owner[p] == i && logits[q * pixels + p] > 0.0) {
        result.map.classes[p] = s.class_id;
        result.map.instances[p] = s.id;
        ++s.area;
      }
    }
  }
  return result;
}

}  // namespace pem
