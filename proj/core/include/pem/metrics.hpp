#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace pem {

inline constexpr std::int32_t kVoidLabel = -1;

// Per-pixel class ids (kVoidLabel = unlabeled) and, for panoptic maps,
// per-pixel instance ids. A segment is a distinct (class, instance) pair;
// without instance ids every class forms one segment.
struct LabelMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::int32_t> classes;
  std::vector<std::int32_t> instances;  // empty or height * width

  std::size_t size() const { return height * width; }
  void validate(std::size_t num_classes) const;
};

struct MiouResult {
  double miou = 0;
  std::vector<double> iou;       // per class; NaN when absent from both maps
  std::vector<bool> present;     // class occurs in gt or pred
};

// Pixels void in `gt` are ignored. Classes absent from both maps are
// excluded from the mean.
MiouResult miou(const LabelMap& pred, const LabelMap& gt, std::size_t num_classes);

struct PqClassStats {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  double iou_sum = 0;
};

struct PqResult {
  double pq = 0;
  double sq = 0;
  double rq = 0;
  double pq_things = 0;
  double pq_stuff = 0;
  double pq_class_mean = 0;  // mean of per-class PQ over classes with tp+fp+fn > 0
  std::vector<PqClassStats> per_class;
};

// Segments match when IoU > 0.5; PQ, SQ and RQ pool the counts over classes so
// PQ = SQ * RQ. A predicted segment lying mostly on void pixels is not a false
// positive. Empty denominators give 0.
PqResult panoptic_quality(const LabelMap& pred, const LabelMap& gt, std::size_t num_classes,
                          const std::vector<bool>& is_thing);

}  // namespace pem
