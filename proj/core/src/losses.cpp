#include "pem/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "pem/ops.hpp"

namespace pem {

namespace {

double softplus_scalar(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }
double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Tensor as_rows(const Tensor& x) {
  if (x.dim() == 1) return reshape(x, {1, x.numel()});
  if (x.dim() == 2) return x;
  throw ShapeError("mask loss expects [P] or [rows,P], got " + to_string(x.shape()));
}

}  // namespace

std::string_view to_string(ClassificationLoss kind) {
  return kind == ClassificationLoss::bce ? "bce" : "softmax_ce";
}

ClassificationLoss parse_classification_loss(std::string_view name) {
  if (name == "bce") return ClassificationLoss::bce;
  if (name == "softmax_ce") return ClassificationLoss::softmax_ce;
  throw std::invalid_argument("unknown classification loss: " + std::string(name));
}

void Target::validate(std::size_t num_classes) const {
  for (const auto& s : segments) {
    if (s.class_id >= num_classes) {
      throw std::invalid_argument("segment class " + std::to_string(s.class_id) + " outside [0, " +
                                  std::to_string(num_classes) + ")");
    }
    if (s.mask.size() != height * width) throw ShapeError("segment mask size does not match target extent");
    if (std::ranges::none_of(s.mask, [](double v) { return v > 0.5; })) {
      throw std::invalid_argument("ground-truth segment mask is empty");
    }
  }
}

double Assignment::total_cost(const CostMatrix& cost) const {
  double total = 0;
  for (const auto& [q, s] : pairs) total += cost(static_cast<Eigen::Index>(q), static_cast<Eigen::Index>(s));
  return total;
}

Tensor dice_loss(const Tensor& logits, const Tensor& target) {
  if (logits.shape() != target.shape()) {
    throw ShapeError("dice operands differ: " + to_string(logits.shape()) + " vs " + to_string(target.shape()));
  }
  Tensor x = as_rows(logits), t = as_rows(target);
  Tensor p = sigmoid(x);
  Tensor num = reduce(Reduce::sum, p * t, 1) * 2.0 + kDiceSmoothing;
  Tensor den = reduce(Reduce::sum, p, 1) + reduce(Reduce::sum, t, 1) + kDiceSmoothing;
  return mean_all(-(num / den) + 1.0);
}

Tensor mask_bce(const Tensor& logits, const Tensor& target) {
  if (logits.shape() != target.shape()) {
    throw ShapeError("bce operands differ: " + to_string(logits.shape()) + " vs " + to_string(target.shape()));
  }
  return mean_all(softplus(logits) - logits * target);
}

Tensor cls_loss(const Tensor& class_logits, const Assignment& assignment, std::span<const GroundTruthSegment> segments,
                const LossConfig& config) {
  if (class_logits.dim() != 2) throw ShapeError("class logits must be [N,K+1]");
  const std::size_t n = class_logits.size(0), cols = class_logits.size(1), no_object = cols - 1;
  if (assignment.segment_of_query.size() != n) throw ShapeError("assignment does not cover every query");
  std::vector<double> onehot(n * cols, 0.0), weight(n, 1.0);
  double weight_sum = 0;
  for (std::size_t q = 0; q < n; ++q) {
    const auto s = assignment.segment_of_query[q];
    const std::size_t column = s < 0 ? no_object : segments[static_cast<std::size_t>(s)].class_id;
    onehot[q * cols + column] = 1.0;
    if (s < 0) weight[q] = config.no_object_weight;
    weight_sum += weight[q];
  }
  if (weight_sum <= 0) return Tensor::scalar(0.0);
  Tensor targets({n, cols}, std::move(onehot));
  Tensor row_weight({n, 1}, std::move(weight));
  if (config.classification == ClassificationLoss::bce) {
    Tensor per_element = softplus(class_logits) - class_logits * targets;
    return sum_all(per_element * row_weight) * (1.0 / (weight_sum * static_cast<double>(cols)));
  }
  // Row shift is a constant: log-sum-exp does not depend on it.
  std::vector<double> shift(n);
  const auto v = class_logits.values();
  for (std::size_t q = 0; q < n; ++q) shift[q] = *std::max_element(v.begin() + q * cols, v.begin() + (q + 1) * cols);
  Tensor m({n, 1}, std::move(shift));
  Tensor lse = unary(Unary::log, reduce(Reduce::sum, unary(Unary::exp, class_logits - m), 1, true)) + m;
  Tensor picked = reduce(Reduce::sum, class_logits * targets, 1, true);
  return sum_all((lse - picked) * row_weight) * (1.0 / weight_sum);
}

std::vector<double> class_probabilities(const Tensor& class_logits, ClassificationLoss kind) {
  const std::size_t n = class_logits.size(0), cols = class_logits.size(1);
  const auto v = class_logits.values();
  std::vector<double> p(v.size());
  if (kind == ClassificationLoss::bce) {
    for (std::size_t i = 0; i < v.size(); ++i) p[i] = sigmoid_scalar(v[i]);
    return p;
  }
  for (std::size_t q = 0; q < n; ++q) {
    const double* row = v.data() + q * cols;
    const double mx = *std::max_element(row, row + cols);
    double total = 0;
    for (std::size_t c = 0; c < cols; ++c) total += (p[q * cols + c] = std::exp(row[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) p[q * cols + c] /= total;
  }
  return p;
}

CostMatrix build_cost_matrix(const MaskPrediction& pred, const Target& target, const LossConfig& config) {
  const std::size_t n = pred.queries(), m = target.segments.size();
  const std::size_t pixels = pred.height() * pred.width();
  if (m == 0) throw std::invalid_argument("cost matrix needs at least one ground-truth segment");
  if (pixels != target.height * target.width) {
    throw ShapeError("prediction resolution " + to_string(pred.mask_logits.shape()) + " differs from target " +
                     std::to_string(target.height) + "x" + std::to_string(target.width));
  }
  const auto rows = static_cast<Eigen::Index>(n), cols = static_cast<Eigen::Index>(m);
  const auto px = static_cast<Eigen::Index>(pixels);
  Eigen::Map<const CostMatrix> x(pred.mask_logits.values().data(), rows, px);
  CostMatrix t(cols, px);
  for (std::size_t s = 0; s < m; ++s) {
    t.row(static_cast<Eigen::Index>(s)) = Eigen::Map<const Eigen::RowVectorXd>(target.segments[s].mask.data(), px);
  }
  const CostMatrix sig = x.unaryExpr(&sigmoid_scalar);
  const Eigen::VectorXd softplus_sum = x.unaryExpr(&softplus_scalar).rowwise().sum();
  const Eigen::VectorXd sig_sum = sig.rowwise().sum();
  const Eigen::VectorXd t_sum = t.rowwise().sum();
  const CostMatrix xt = x * t.transpose();
  const CostMatrix st = sig * t.transpose();
  const std::vector<double> prob = class_probabilities(pred.class_logits, config.classification);
  const std::size_t k1 = pred.class_logits.size(1);

  CostMatrix cost(rows, cols);
  for (Eigen::Index q = 0; q < rows; ++q) {
    for (Eigen::Index s = 0; s < cols; ++s) {
      const double cls = -prob[static_cast<std::size_t>(q) * k1 + target.segments[static_cast<std::size_t>(s)].class_id];
      const double bce = (softplus_sum(q) - xt(q, s)) / static_cast<double>(pixels);
      const double dice =
          1.0 - (2.0 * st(q, s) + kDiceSmoothing) / (sig_sum(q) + t_sum(s) + kDiceSmoothing);
      cost(q, s) = config.weights.cls * cls + config.weights.mask_bce * bce + config.weights.dice * dice;
    }
  }
  return cost;
}

Assignment hungarian_match(const CostMatrix& cost) {
  const auto n_rows = static_cast<std::size_t>(cost.rows()), n_cols = static_cast<std::size_t>(cost.cols());
  Assignment result;
  result.segment_of_query.assign(n_rows, -1);
  if (n_rows == 0 || n_cols == 0) return result;
  if (!cost.allFinite()) throw NumericError("cost matrix has non-finite entries");

  // Potentials method on an n <= m matrix, 1-based with a virtual column 0.
  const bool transposed = n_rows > n_cols;
  const std::size_t n = transposed ? n_cols : n_rows, m = transposed ? n_rows : n_cols;
  const auto a = [&](std::size_t i, std::size_t j) {
    return transposed ? cost(static_cast<Eigen::Index>(j - 1), static_cast<Eigen::Index>(i - 1))
                      : cost(static_cast<Eigen::Index>(i - 1), static_cast<Eigen::Index>(j - 1));
  };
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0), minv(m + 1);
  std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
  std::vector<char> used(m + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = a(i0, j) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  for (std::size_t j = 1; j <= m; ++j) {
    if (p[j] == 0) continue;
    const std::size_t row = transposed ? j - 1 : p[j] - 1;
    const std::size_t col = transposed ? p[j] - 1 : j - 1;
    result.pairs.emplace_back(row, col);
    result.segment_of_query[row] = static_cast<std::ptrdiff_t>(col);
  }
  std::ranges::sort(result.pairs);
  return result;
}

LossResult total_loss(std::span<const MaskPrediction> predictions, const Target& target, const LossConfig& config,
                      const std::vector<Assignment>* frozen) {
  if (predictions.empty()) throw std::invalid_argument("total_loss needs at least one prediction");
  if (frozen && frozen->size() != predictions.size()) {
    throw std::invalid_argument("frozen assignments do not match the prediction count");
  }
  target.validate(predictions.front().num_classes());
  const std::size_t pixels = target.height * target.width;
  LossResult result;
  Tensor total = Tensor::scalar(0.0);
  for (std::size_t l = 0; l < predictions.size(); ++l) {
    const MaskPrediction& pred = predictions[l];
    if (pred.height() * pred.width() != pixels) throw ShapeError("prediction resolution differs from target");
    Assignment assignment;
    if (frozen) {
      assignment = (*frozen)[l];
    } else if (target.segments.empty()) {
      assignment.segment_of_query.assign(pred.queries(), -1);
    } else {
      assignment = hungarian_match(build_cost_matrix(pred, target, config));
    }
    Tensor cls = cls_loss(pred.class_logits, assignment, target.segments, config);
    Tensor layer = cls * config.weights.cls;
    LayerLoss report;
    report.cls = cls.item();
    if (!assignment.pairs.empty()) {
      std::vector<std::size_t> rows;
      std::vector<double> masks;
      masks.reserve(assignment.pairs.size() * pixels);
      for (const auto& [q, s] : assignment.pairs) {
        rows.push_back(q);
        const auto& mask = target.segments[s].mask;
        masks.insert(masks.end(), mask.begin(), mask.end());
      }
      Tensor logits = gather_rows(reshape(pred.mask_logits, {pred.queries(), pixels}), rows);
      Tensor targets({rows.size(), pixels}, std::move(masks));
      Tensor bce = mask_bce(logits, targets);
      Tensor dice = dice_loss(logits, targets);
      report.mask_bce = bce.item();
      report.dice = dice.item();
      layer = layer + bce * config.weights.mask_bce + dice * config.weights.dice;
    }
    report.total = layer.item();
    report.supervised = l > 0 || config.supervise_bootstrap;
    if (report.supervised) total = total + layer;
    result.layers.push_back(report);
    result.assignments.push_back(std::move(assignment));
  }
  result.total = total;
  return result;
}

}  // namespace pem
