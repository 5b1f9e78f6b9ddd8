#pragma once

// Inference-only cross-attention kernels over plain Eigen matrices, templated
// on the scalar type so the latency harness can run in f32. They compute the
// same functions as the differentiable path in pemca.hpp.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <random>
#include <stdexcept>
#include <vector>

#include "pem/pemca.hpp"

namespace pem::kernels {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using RowVec = Eigen::Matrix<S, 1, Eigen::Dynamic>;

template <typename S>
struct Weights {
  Mat<S> w_q;    // [C, D]
  Mat<S> w_k;    // [C_feat, D]
  Mat<S> w_v;    // [C_feat, D], softmax variants
  Mat<S> w_a;    // [D, D], prototype variants
  RowVec<S> alpha;
  Mat<S> w_out;  // [D, C]
  std::size_t heads = 1;

  std::size_t dim() const { return static_cast<std::size_t>(w_q.cols()); }
  std::size_t head_dim() const { return dim() / heads; }
};

// Buffers reused across calls so timed runs do not allocate.
template <typename S>
struct Workspace {
  Mat<S> q, k, v, scores, mixed, prototypes, a, out;
  RowVec<S> zeros;
  std::vector<Eigen::Index> selected;  // head-major [heads, N]
};

template <typename S>
Weights<S> random_weights(const PemcaConfig& config, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  const auto fill = [&](Eigen::Index rows, Eigen::Index cols, double bound) {
    Mat<S> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(bound * unit(rng));
    return m;
  };
  const auto c = static_cast<Eigen::Index>(config.channels);
  const auto cf = static_cast<Eigen::Index>(config.feature_channels);
  const auto d = static_cast<Eigen::Index>(config.proj_dim);
  Weights<S> w;
  w.heads = config.heads;
  w.w_q = fill(c, d, 1.0 / std::sqrt(double(c)));
  w.w_k = fill(cf, d, 1.0 / std::sqrt(double(cf)));
  if (is_softmax_attention(config.variant)) {
    w.w_v = fill(cf, d, 1.0 / std::sqrt(double(cf)));
  } else {
    w.w_a = fill(d, d, 1.0 / std::sqrt(double(d)));
    w.alpha = RowVec<S>::Ones(d);
  }
  w.w_out = fill(d, c, 1.0 / std::sqrt(double(d)));
  return w;
}

// Additive form of an AttentionMask: bias(q, t) is 0 on foreground and -inf
// elsewhere; rows without foreground are flagged and attend everywhere.
template <typename S>
struct KernelMask {
  Mat<S> bias;             // [N, HW]
  std::vector<char> any;   // per query

  static KernelMask from(const AttentionMask& mask) {
    KernelMask k;
    const auto n = static_cast<Eigen::Index>(mask.queries()), t = static_cast<Eigen::Index>(mask.tokens());
    k.bias.resize(n, t);
    k.any.assign(mask.queries(), 0);
    const auto fg = mask.query_major();
    for (Eigen::Index i = 0; i < k.bias.size(); ++i) {
      k.bias.data()[i] = fg[static_cast<std::size_t>(i)] ? S(0) : -std::numeric_limits<S>::infinity();
    }
    for (std::size_t q = 0; q < mask.queries(); ++q) k.any[q] = mask.any_foreground(q) ? 1 : 0;
    return k;
  }
};

template <typename S>
void softmax_attention(const Mat<S>& queries, const Mat<S>& features, const KernelMask<S>* mask,
                       const Weights<S>& w, Workspace<S>& ws) {
  const Eigen::Index n = queries.rows();
  const auto d = static_cast<Eigen::Index>(w.head_dim());
  const S scale = S(1) / std::sqrt(static_cast<S>(d));
  ws.q.noalias() = (queries * w.w_q) * scale;
  ws.k.noalias() = features * w.w_k;
  ws.v.noalias() = features * w.w_v;
  ws.mixed.resize(n, ws.q.cols());
  for (std::size_t h = 0; h < w.heads; ++h) {
    const Eigen::Index off = static_cast<Eigen::Index>(h) * d;
    ws.scores.noalias() = ws.q.middleCols(off, d) * ws.k.middleCols(off, d).transpose();
    for (Eigen::Index r = 0; r < n; ++r) {
      auto row = ws.scores.row(r).array();
      if (mask != nullptr && mask->any[static_cast<std::size_t>(r)]) row += mask->bias.row(r).array();
      row = (row - row.maxCoeff()).exp();
      row /= row.sum();
    }
    ws.mixed.middleCols(off, d).noalias() = ws.scores * ws.v.middleCols(off, d);
  }
  ws.out.noalias() = ws.mixed * w.w_out;
  ws.out += queries;
}

template <typename S>
void mix_prototypes(const Mat<S>& queries, const Weights<S>& w, Workspace<S>& ws) {
  ws.a.noalias() = ws.q.cwiseProduct(ws.prototypes) * w.w_a;
  const auto norms = (ws.a.rowwise().squaredNorm().array() + S(kPrototypeNormEps)).sqrt();
  ws.a.array().colwise() /= norms;
  ws.a.array().rowwise() *= w.alpha.array();
  ws.a += ws.prototypes;
  ws.out.noalias() = ws.a * w.w_out;
  ws.out += queries;
}

// Streams over token tiles: each tile's keys and similarities stay cache
// resident and fold into a running per-(head, query) argmax, so nothing of
// size HW is materialized. Ties keep the lowest token index.
template <typename S>
void prototype_attention(const Mat<S>& queries, const Mat<S>& features, const KernelMask<S>* mask,
                         const Weights<S>& w, Workspace<S>& ws) {
  constexpr Eigen::Index kTile = 512;
  const Eigen::Index n = queries.rows(), tokens = features.rows();
  const auto d = static_cast<Eigen::Index>(w.head_dim());
  const std::size_t heads = w.heads, rows = static_cast<std::size_t>(n);
  ws.q.noalias() = queries * w.w_q;
  ws.selected.assign(heads * rows, 0);
  std::vector<S> best(heads * rows, -std::numeric_limits<S>::infinity());
  std::vector<char> found(heads * rows, 0);
  if (ws.zeros.size() < std::min(kTile, tokens)) ws.zeros = RowVec<S>::Zero(std::min(kTile, tokens));
  for (Eigen::Index t0 = 0; t0 < tokens; t0 += kTile) {
    const Eigen::Index len = std::min(kTile, tokens - t0);
    ws.k.noalias() = features.middleRows(t0, len) * w.w_k;
    for (std::size_t h = 0; h < heads; ++h) {
      const Eigen::Index off = static_cast<Eigen::Index>(h) * d;
      ws.scores.noalias() = ws.q.middleCols(off, d) * ws.k.middleCols(off, d).transpose();
      for (Eigen::Index r = 0; r < n; ++r) {
        const std::size_t slot = h * rows + static_cast<std::size_t>(r);
        const auto row = ws.scores.row(r).array();
        const bool masked = mask != nullptr && mask->any[static_cast<std::size_t>(r)];
        const S* bias_data = masked ? mask->bias.data() + r * tokens + t0 : ws.zeros.data();
        const Eigen::Map<const Eigen::Array<S, 1, Eigen::Dynamic>> bias(bias_data, len);
        const S m = (row + bias).maxCoeff();
        if (found[slot] && !(m > best[slot])) continue;
        if (m == -std::numeric_limits<S>::infinity()) continue;
        Eigen::Index i = 0;
        while (row(i) + bias(i) != m) ++i;
        best[slot] = m;
        found[slot] = 1;
        ws.selected[slot] = t0 + i;
      }
    }
  }
  ws.prototypes.resize(n, ws.q.cols());
  for (std::size_t h = 0; h < heads; ++h) {
    const Eigen::Index off = static_cast<Eigen::Index>(h) * d;
    for (Eigen::Index r = 0; r < n; ++r) {
      const Eigen::Index token = ws.selected[h * rows + static_cast<std::size_t>(r)];
      ws.prototypes.row(r).segment(off, d).noalias() = features.row(token) * w.w_k.middleCols(off, d);
    }
  }
  mix_prototypes(queries, w, ws);
}

// Masked mean of the keys in place of selection.
template <typename S>
void aggregate_attention(const Mat<S>& queries, const Mat<S>& features, const KernelMask<S>* mask,
                         const Weights<S>& w, Workspace<S>& ws) {
  const Eigen::Index n = queries.rows(), tokens = features.rows();
  ws.q.noalias() = queries * w.w_q;
  ws.k.noalias() = features * w.w_k;
  ws.scores.resize(n, tokens);
  for (Eigen::Index r = 0; r < n; ++r) {
    if (mask != nullptr && mask->any[static_cast<std::size_t>(r)]) {
      ws.scores.row(r) = (mask->bias.row(r).array() == S(0)).template cast<S>().matrix();
      ws.scores.row(r) /= ws.scores.row(r).sum();
    } else {
      ws.scores.row(r).setConstant(S(1) / static_cast<S>(tokens));
    }
  }
  ws.prototypes.noalias() = ws.scores * ws.k;
  mix_prototypes(queries, w, ws);
}

// Runs `variant`; the result is left in ws.out.
template <typename S>
void run_attention(AttentionVariant variant, const Mat<S>& queries, const Mat<S>& features,
                   const KernelMask<S>& mask, const Weights<S>& w, Workspace<S>& ws) {
  const KernelMask<S>* m = uses_mask(variant) ? &mask : nullptr;
  switch (variant) {
    case AttentionVariant::pemca:
    case AttentionVariant::pemca_no_mask: prototype_attention(queries, features, m, w, ws); return;
    case AttentionVariant::pemca_no_proto: aggregate_attention(queries, features, m, w, ws); return;
    case AttentionVariant::masked_ca:
    case AttentionVariant::plain_ca: softmax_attention(queries, features, m, w, ws); return;
  }
  throw std::invalid_argument("unknown attention variant");
}

}  // namespace pem::kernels
