#include "pem/metrics.hpp"

#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>

namespace pem {

namespace {

using SegmentKey = std::pair<std::int32_t, std::int32_t>;  // (class, instance)

SegmentKey key_at(const LabelMap& map, std::size_t i) {
  return {map.classes[i], map.instances.empty() ? 0 : map.instances[i]};
}

struct PooledCounts {
  std::size_t tp = 0, fp = 0, fn = 0;
  double iou_sum = 0;

  void add(const PqClassStats& s) {
    tp += s.tp;
    fp += s.fp;
    fn += s.fn;
    iou_sum += s.iou_sum;
  }
  double denominator() const {
    return static_cast<double>(tp) + 0.5 * static_cast<double>(fp) + 0.5 * static_cast<double>(fn);
  }
  double pq() const { return denominator() > 0 ? iou_sum / denominator() : 0.0; }
  double sq() const { return tp > 0 ? iou_sum / static_cast<double>(tp) : 0.0; }
  double rq() const { return denominator() > 0 ? static_cast<double>(tp) / denominator() : 0.0; }
};

}  // namespace

void LabelMap::validate(std::size_t num_classes) const {
  if (classes.size() != size()) throw std::invalid_argument("label map class buffer has the wrong size");
  if (!instances.empty() && instances.size() != size()) {
    throw std::invalid_argument("label map instance buffer has the wrong size");
  }
  for (std::int32_t c : classes) {
    if (c != kVoidLabel && (c < 0 || static_cast<std::size_t>(c) >= num_classes)) {
      throw std::invalid_argument("label " + std::to_string(c) + " outside [0, " + std::to_string(num_classes) + ")");
    }
  }
}

MiouResult miou(const LabelMap& pred, const LabelMap& gt, std::size_t num_classes) {
  if (pred.height != gt.height || pred.width != gt.width) throw std::invalid_argument("label maps differ in shape");
  pred.validate(num_classes);
  gt.validate(num_classes);
  std::vector<std::size_t> inter(num_classes, 0), in_pred(num_classes, 0), in_gt(num_classes, 0);
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const std::int32_t g = gt.classes[i], p = pred.classes[i];
    if (g == kVoidLabel) continue;
    ++in_gt[static_cast<std::size_t>(g)];
    if (p == kVoidLabel) continue;
    ++in_pred[static_cast<std::size_t>(p)];
    if (p == g) ++inter[static_cast<std::size_t>(g)];
  }
  MiouResult r;
  r.iou.assign(num_classes, std::numeric_limits<double>::quiet_NaN());
  r.present.assign(num_classes, false);
  double sum = 0;
  std::size_t count = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    const std::size_t uni = in_pred[c] + in_gt[c] - inter[c];
    if (uni == 0) continue;
    r.present[c] = true;
    r.iou[c] = static_cast<double>(inter[c]) / static_cast<double>(uni);
    sum += r.iou[c];
    ++count;
  }
  r.miou = count > 0 ? sum / static_cast<double>(count) : 0.0;
  return r;
}

PqResult panoptic_quality(const LabelMap& pred, const LabelMap& gt, std::size_t num_classes,
                          const std::vector<bool>& is_thing) {
  if (pred.height != gt.height || pred.width != gt.width) throw std::invalid_argument("label maps differ in shape");
  if (is_thing.size() != num_classes) throw std::invalid_argument("thing/stuff partition must cover every class");
  pred.validate(num_classes);
  gt.validate(num_classes);

  std::map<SegmentKey, std::size_t> gt_area, pred_area, pred_void;
  std::map<std::pair<SegmentKey, SegmentKey>, std::size_t> overlap;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const bool gt_void = gt.classes[i] == kVoidLabel, pred_void_px = pred.classes[i] == kVoidLabel;
    if (!gt_void) ++gt_area[key_at(gt, i)];
    if (pred_void_px) continue;
    const SegmentKey pk = key_at(pred, i);
    ++pred_area[pk];
    if (gt_void) {
      ++pred_void[pk];
    } else {
      ++overlap[{key_at(gt, i), pk}];
    }
  }

  PqResult r;
  r.per_class.assign(num_classes, {});
  std::set<SegmentKey> matched_gt, matched_pred;
  for (const auto& [pair, inter] : overlap) {
    const auto& [gk, pk] = pair;
    if (gk.first != pk.first) continue;
    const auto void_px = pred_void.contains(pk) ? pred_void.at(pk) : 0;
    const std::size_t uni = gt_area.at(gk) + pred_area.at(pk) - inter - void_px;
    const double iou = static_cast<double>(inter) / static_cast<double>(uni);
    if (iou <= 0.5) continue;
    auto& stats = r.per_class[static_cast<std::size_t>(gk.first)];
    ++stats.tp;
    stats.iou_sum += iou;
    matched_gt.insert(gk);
    matched_pred.insert(pk);
  }
  for (const auto& [gk, area] : gt_area) {
    if (!matched_gt.contains(gk)) ++r.per_class[static_cast<std::size_t>(gk.first)].fn;
  }
  for (const auto& [pk, area] : pred_area) {
    if (matched_pred.contains(pk)) continue;
    const auto void_px = pred_void.contains(pk) ? pred_void.at(pk) : 0;
    if (2 * void_px > area) continue;
    ++r.per_class[static_cast<std::size_t>(pk.first)].fp;
  }

  PooledCounts all, things, stuff;
  double class_pq_sum = 0;
  std::size_t class_count = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    const auto& s = r.per_class[c];
    all.add(s);
    (is_thing[c] ? things : stuff).add(s);
    if (s.tp + s.fp + s.fn > 0) {
      PooledCounts one;
      one.add(s);
      class_pq_sum += one.pq();
      ++class_count;
    }
  }
  r.pq = all.pq();
  r.sq = all.sq();
  r.rq = all.rq();
  r.pq_things = things.pq();
  r.pq_stuff = stuff.pq();
  r.pq_class_mean = class_count > 0 ? class_pq_sum / static_cast<double>(class_count) : 0.0;
  return r;
}

}  // namespace pem
