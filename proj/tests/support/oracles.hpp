#pragma once

// Naive reference implementations and random generators shared by the unit
// and acceptance tests. Everything here is loop-based and independent of the
// Eigen paths in the library.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <span>
#include <vector>

#include "pem/losses.hpp"
#include "pem/ops.hpp"
#include "pem/pemca.hpp"
#include "pem/tensor.hpp"

namespace pem::testing {

using Rng = std::mt19937_64;

inline Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0, bool requires_grad = false) {
  std::uniform_real_distribution<double> unit(lo, hi);
  std::vector<double> v(numel(shape));
  for (double& x : v) x = unit(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

inline std::size_t uniform_index(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

// Query-major foreground bits with the given density and at least one
// foreground token per query.
inline AttentionMask random_mask(Rng& rng, std::size_t tokens, std::size_t queries, double density) {
  std::bernoulli_distribution fg(density);
  std::vector<std::uint8_t> bits(tokens * queries);
  for (std::size_t q = 0; q < queries; ++q) {
    bool any = false;
    for (std::size_t t = 0; t < tokens; ++t) {
      bits[q * tokens + t] = fg(rng) ? 1 : 0;
      any |= bits[q * tokens + t] != 0;
    }
    if (!any) bits[q * tokens + uniform_index(rng, 0, tokens - 1)] = 1;
  }
  return AttentionMask(tokens, queries, std::move(bits));
}

// --- dense ops ------------------------------------------------------------

inline std::vector<double> naive_matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.size(0), k = a.size(1), n = b.size(1);
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) out[i * n + j] += a.at(i * k + p) * b.at(p * n + j);
  return out;
}

inline std::vector<double> naive_conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride,
                                        std::size_t pad) {
  const std::size_t ci = x.size(0), h = x.size(1), wd = x.size(2);
  const std::size_t co = w.size(0), k = w.size(2);
  const std::size_t oh = (h + 2 * pad - k) / stride + 1, ow = (wd + 2 * pad - k) / stride + 1;
  std::vector<double> out(co * oh * ow, 0.0);
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx) {
        double s = bias.defined() ? bias.at(o) : 0.0;
        for (std::size_t c = 0; c < ci; ++c)
          for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
              const long iy = static_cast<long>(y * stride + ky) - static_cast<long>(pad);
              const long ix = static_cast<long>(xx * stride + kx) - static_cast<long>(pad);
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(wd)) continue;
              s += w.at(((o * ci + c) * k + ky) * k + kx) *
                   x.at((c * h + static_cast<std::size_t>(iy)) * wd + static_cast<std::size_t>(ix));
            }
        out[(o * oh + y) * ow + xx] = s;
      }
  return out;
}

// Value of channel c at continuous (row, col); outside reads zero.
inline double naive_bilinear(const Tensor& x, std::size_t c, double row, double col) {
  const long h = static_cast<long>(x.size(1)), w = static_cast<long>(x.size(2));
  const long y0 = static_cast<long>(std::floor(row)), x0 = static_cast<long>(std::floor(col));
  const double fy = row - static_cast<double>(y0), fx = col - static_cast<double>(x0);
  double s = 0;
  for (long dy = 0; dy < 2; ++dy)
    for (long dx = 0; dx < 2; ++dx) {
      const long yy = y0 + dy, xx = x0 + dx;
      if (yy < 0 || xx < 0 || yy >= h || xx >= w) continue;
      const double wgt = (dy ? fy : 1 - fy) * (dx ? fx : 1 - fx);
      s += wgt * x.at((c * static_cast<std::size_t>(h) + static_cast<std::size_t>(yy)) * static_cast<std::size_t>(w) +
                      static_cast<std::size_t>(xx));
    }
  return s;
}

inline std::vector<double> naive_softmax(std::span<const double> row) {
  const double m = *std::max_element(row.begin(), row.end());
  std::vector<double> e(row.size());
  double z = 0;
  for (std::size_t i = 0; i < row.size(); ++i) z += e[i] = std::exp(row[i] - m);
  for (double& v : e) v /= z;
  return e;
}

// --- attention ------------------------------------------------------------

// Per head and query, the first token reaching the maximum of <K_h, Q_h>
// among the query's foreground tokens.
inline std::vector<std::size_t> brute_force_prototypes(const Tensor& keys, const Tensor& queries,
                                                       const AttentionMask* mask, std::size_t heads) {
  const std::size_t tokens = keys.size(0), n = queries.size(0), d = keys.size(1) / heads;
  std::vector<std::size_t> out(heads * n);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t q = 0; q < n; ++q) {
      const bool restrict = mask != nullptr && mask->any_foreground(q);
      double best = -std::numeric_limits<double>::infinity();
      std::size_t arg = 0;
      bool found = false;
      for (std::size_t t = 0; t < tokens; ++t) {
        if (restrict && !mask->foreground(t, q)) continue;
        double s = 0;
        for (std::size_t j = 0; j < d; ++j) s += keys.at(t * keys.size(1) + h * d + j) * queries.at(q * queries.size(1) + h * d + j);
        if (!found || s > best) {
          best = s;
          arg = t;
          found = true;
        }
      }
      out[h * n + q] = arg;
    }
  return out;
}

// softmax(Q K^T / sqrt(d) + M) V per head, then W_o and the residual.
inline std::vector<double> naive_softmax_attention(const Tensor& query_input, const Tensor& residual,
                                                   const Tensor& features, const AttentionMask* mask,
                                                   const SoftmaxAttentionParams& p, std::size_t heads) {
  const auto q = naive_matmul(query_input, p.w_q), k = naive_matmul(features, p.w_k), v = naive_matmul(features, p.w_v);
  const std::size_t n = query_input.size(0), t = features.size(0), dim = p.w_q.size(1), d = dim / heads;
  const std::size_t c = p.w_o.size(1);
  std::vector<double> mixed(n * dim, 0.0);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < n; ++i) {
      const bool restrict = mask != nullptr && mask->any_foreground(i);
      std::vector<double> s(t);
      for (std::size_t j = 0; j < t; ++j) {
        double dot = 0;
        for (std::size_t e = 0; e < d; ++e) dot += q[i * dim + h * d + e] * k[j * dim + h * d + e];
        s[j] = dot / std::sqrt(static_cast<double>(d));
        if (restrict && !mask->foreground(j, i)) s[j] = -std::numeric_limits<double>::infinity();
      }
      const auto a = naive_softmax(s);
      for (std::size_t j = 0; j < t; ++j)
        for (std::size_t e = 0; e < d; ++e) mixed[i * dim + h * d + e] += a[j] * v[j * dim + h * d + e];
    }
  std::vector<double> out(n * c);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t o = 0; o < c; ++o) {
      double s = residual.at(i * c + o);
      for (std::size_t e = 0; e < dim; ++e) s += mixed[i * dim + e] * p.w_o.at(e * c + o);
      out[i * c + o] = s;
    }
  return out;
}

// --- matching -------------------------------------------------------------

// Minimum total cost over all injective assignments of the smaller side.
inline double brute_force_assignment(const CostMatrix& cost) {
  const auto rows = static_cast<std::size_t>(cost.rows()), cols = static_cast<std::size_t>(cost.cols());
  const bool wide = rows <= cols;
  const std::size_t small = std::min(rows, cols), large = std::max(rows, cols);
  std::vector<std::size_t> perm(large);
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  // Permutations of the large side; the first `small` entries form the choice.
  do {
    double total = 0;
    for (std::size_t i = 0; i < small; ++i) {
      total += wide ? cost(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(perm[i]))
                    : cost(static_cast<Eigen::Index>(perm[i]), static_cast<Eigen::Index>(i));
    }
    best = std::min(best, total);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

// --- finite differences ---------------------------------------------------

struct GradCheck {
  double max_rel_error = 0;
  std::size_t checked = 0;
  // Location of the worst coordinate, for failure messages.
  std::size_t worst_leaf = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0;
  double worst_numeric = 0;
};

inline std::ostream& operator<<(std::ostream& os, const GradCheck& r) {
  return os << "max rel error " << r.max_rel_error << " at leaf " << r.worst_leaf << " index " << r.worst_index
            << " (analytic " << r.worst_analytic << ", numeric " << r.worst_numeric << ", " << r.checked
            << " coordinates)";
}

// |a - n| / max(|a|, |n|, floor). Coordinates whose true gradient is zero
// (a bias cancelled by a following norm, say) would otherwise divide the
// rounding noise of the differences by nothing.
inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Floor is kGradFloorScale times the largest analytic gradient magnitude.
inline constexpr double kGradFloorScale = 1e-3;

// Compares backward() of the scalar f() against central differences on the
// leaf tensors. `coords_per_leaf` caps the coordinates probed per leaf
// (chosen at random when capped).
inline GradCheck gradcheck(const std::function<Tensor()>& f, std::span<const Tensor> leaves, double h = 1e-5,
                           std::size_t coords_per_leaf = std::numeric_limits<std::size_t>::max(),
                           std::uint64_t seed = 0) {
  for (Tensor leaf : leaves) leaf.zero_grad();
  backward(f());
  std::vector<std::vector<double>> analytic;
  double scale = 0;
  for (const Tensor& leaf : leaves) {
    analytic.emplace_back(leaf.numel(), 0.0);
    if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), analytic.back().begin());
    for (double g : analytic.back()) scale = std::max(scale, std::abs(g));
  }
  const double floor = std::max(kGradFloorScale * scale, 1e-12);
  Rng rng(seed);
  GradCheck result;
  NoGradGuard no_grad;
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    Tensor leaf = leaves[l];
    std::vector<std::size_t> coords(leaf.numel());
    std::iota(coords.begin(), coords.end(), 0);
    if (coords.size() > coords_per_leaf) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(coords_per_leaf);
    }
    auto values = leaf.mutable_values();
    for (std::size_t i : coords) {
      const double saved = values[i];
      values[i] = saved + h;
      const double plus = f().item();
      values[i] = saved - h;
      const double minus = f().item();
      values[i] = saved;
      const double numeric = (plus - minus) / (2 * h);
      const double err = relative_error(analytic[l][i], numeric, floor);
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_leaf = l;
        result.worst_index = i;
        result.worst_analytic = analytic[l][i];
        result.worst_numeric = numeric;
      }
      ++result.checked;
    }
  }
  return result;
}

}  // namespace pem::testing
