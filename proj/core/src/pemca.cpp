#include "pem/pemca.hpp"

#include <Eigen/Core>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "pem/ops.hpp"

namespace pem {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;

std::size_t head_width(std::size_t dim, std::size_t heads) {
  if (heads == 0 || dim % heads != 0) {
    throw ShapeError("width " + std::to_string(dim) + " is not divisible by " + std::to_string(heads) + " heads");
  }
  return dim / heads;
}

}  // namespace

std::string_view to_string(AttentionVariant variant) {
  switch (variant) {
    case AttentionVariant::pemca: return "pemca";
    case AttentionVariant::pemca_no_mask: return "pemca_no_mask";
    case AttentionVariant::pemca_no_proto: return "pemca_no_proto";
    case AttentionVariant::masked_ca: return "masked_ca";
    case AttentionVariant::plain_ca: return "plain_ca";
  }
  return "unknown";
}

AttentionVariant parse_variant(std::string_view name) {
  for (AttentionVariant v : kAllVariants) {
    if (to_string(v) == name) return v;
  }
  throw std::invalid_argument("unknown attention variant: " + std::string(name));
}

bool uses_mask(AttentionVariant variant) {
  return variant == AttentionVariant::pemca || variant == AttentionVariant::pemca_no_proto ||
         variant == AttentionVariant::masked_ca;
}

bool uses_prototypes(AttentionVariant variant) {
  return variant == AttentionVariant::pemca || variant == AttentionVariant::pemca_no_mask;
}

bool is_softmax_attention(AttentionVariant variant) {
  return variant == AttentionVariant::masked_ca || variant == AttentionVariant::plain_ca;
}

void PemcaConfig::validate() const {
  if (channels == 0 || feature_channels == 0 || proj_dim == 0) {
    throw std::invalid_argument("attention widths must be positive");
  }
  if (heads == 0) throw std::invalid_argument("attention needs at least one head");
  if (proj_dim % heads != 0) {
    throw std::invalid_argument("projected width " + std::to_string(proj_dim) + " not divisible by " +
                                std::to_string(heads) + " heads");
  }
}

AttentionMask::AttentionMask(std::size_t tokens, std::size_t queries, std::vector<std::uint8_t> query_major)
    : tokens_(tokens), queries_(queries), fg_(std::move(query_major)) {
  if (fg_.size() != tokens * queries) throw ShapeError("attention mask size mismatch");
}

AttentionMask AttentionMask::all_foreground(std::size_t tokens, std::size_t queries) {
  return AttentionMask(tokens, queries, std::vector<std::uint8_t>(tokens * queries, 1));
}

double AttentionMask::additive(std::size_t token, std::size_t query) const {
  return foreground(token, query) ? 0.0 : -std::numeric_limits<double>::infinity();
}

bool AttentionMask::any_foreground(std::size_t query) const {
  for (std::size_t t = 0; t < tokens_; ++t) {
    if (fg_[query * tokens_ + t]) return true;
  }
  return false;
}

AttentionMask build_attention_mask(const Tensor& mask_logits, std::size_t height, std::size_t width) {
  if (height == 0 || width == 0) throw ShapeError("mask resolution must be a positive pair");
  if (mask_logits.dim() != 3) throw ShapeError("mask logits must be [N,H,W]");
  NoGradGuard no_grad;
  const std::size_t queries = mask_logits.size(0);
  Tensor resized = resize_bilinear(mask_logits.detach(), height, width);
  std::vector<std::uint8_t> fg(resized.numel());
  const auto rv = resized.values();
  for (std::size_t i = 0; i < fg.size(); ++i) fg[i] = rv[i] > 0.0 ? 1 : 0;
  return AttentionMask(height * width, queries, std::move(fg));
}

std::pair<Tensor, Tensor> project_qk(const Tensor& features, const Tensor& queries, const QkProjection& proj) {
  if (features.dim() != 2 || features.size(1) != proj.w_k.size(0)) {
    throw ShapeError("feature width " + to_string(features.shape()) + " does not match key projection " +
                     to_string(proj.w_k.shape()));
  }
  if (queries.dim() != 2 || queries.size(1) != proj.w_q.size(0)) {
    throw ShapeError("query width " + to_string(queries.shape()) + " does not match query projection " +
                     to_string(proj.w_q.shape()));
  }
  return {matmul(features, proj.w_k), matmul(queries, proj.w_q)};
}

std::vector<std::size_t> select_prototype_indices(const Tensor& keys, const Tensor& queries,
                                                  const AttentionMask* mask, std::size_t heads) {
  if (keys.dim() != 2 || queries.dim() != 2 || keys.size(1) != queries.size(1)) {
    throw ShapeError("keys " + to_string(keys.shape()) + " and queries " + to_string(queries.shape()) +
                     " must share their width");
  }
  const std::size_t tokens = keys.size(0), n = queries.size(0), dim = keys.size(1);
  const std::size_t d = head_width(dim, heads);
  if (mask && (mask->tokens() != tokens || mask->queries() != n)) {
    throw ShapeError("attention mask does not match keys/queries");
  }
  ConstMap k(keys.values().data(), static_cast<Eigen::Index>(tokens), static_cast<Eigen::Index>(dim));
  ConstMap q(queries.values().data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
  std::vector<std::size_t> out(heads * n);
  RowMatrix scores;
  for (std::size_t h = 0; h < heads; ++h) {
    const auto off = static_cast<Eigen::Index>(h * d);
    const auto width = static_cast<Eigen::Index>(d);
    scores.noalias() = q.middleCols(off, width) * k.middleCols(off, width).transpose();  // [N, HW]
    for (std::size_t j = 0; j < n; ++j) {
      const bool restrict = mask != nullptr && mask->any_foreground(j);
      const double* row = scores.data() + j * tokens;
      std::size_t best = tokens;
      double best_value = 0;
      for (std::size_t t = 0; t < tokens; ++t) {
        if (restrict && !mask->foreground(t, j)) continue;
        if (best == tokens || row[t] > best_value) {
          best = t;
          best_value = row[t];
        }
      }
      out[h * n + j] = best;
    }
  }
  return out;
}

Tensor gather_prototypes(const Tensor& keys, std::span<const std::size_t> indices, std::size_t heads,
                         std::size_t queries) {
  if (indices.size() != heads * queries) throw ShapeError("prototype index count mismatch");
  const std::size_t d = head_width(keys.size(1), heads);
  if (heads == 1) return gather_rows(keys, indices);
  std::vector<Tensor> parts;
  parts.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    parts.push_back(gather_rows(narrow(keys, 1, h * d, d), indices.subspan(h * queries, queries)));
  }
  return concat(parts, 1);
}

PrototypeSet select_prototypes(const Tensor& keys, const Tensor& queries, const AttentionMask* mask,
                               std::size_t heads) {
  PrototypeSet set;
  set.heads = heads;
  set.queries = queries.size(0);
  set.indices = select_prototype_indices(keys, queries, mask, heads);
  set.prototypes = gather_prototypes(keys, set.indices, heads, set.queries);
  return set;
}

Tensor prototype_cross_attention(const Tensor& queries, const Tensor& prototypes, const Tensor& residual,
                                 const PrototypeAttentionParams& params) {
  // Past selection nothing may see more than N tokens.
  const std::size_t n = queries.size(0);
  if (prototypes.size(0) != n || residual.size(0) != n) {
    throw ShapeError("prototype attention operands must all have N=" + std::to_string(n) + " rows, got " +
                     to_string(prototypes.shape()) + " and " + to_string(residual.shape()));
  }
  if (queries.shape() != prototypes.shape()) {
    throw ShapeError("queries " + to_string(queries.shape()) + " and prototypes " +
                     to_string(prototypes.shape()) + " differ");
  }
  Tensor a = matmul(queries * prototypes, params.w_a);
  Tensor norm = unary(Unary::sqrt, reduce(Reduce::sum, unary(Unary::square, a), 1, true) + kPrototypeNormEps);
  Tensor b = params.alpha * (a / norm) + prototypes;
  return matmul(b, params.w_out) + residual;
}

Tensor softmax_cross_attention(const Tensor& query_input, const Tensor& residual, const Tensor& features,
                               const AttentionMask* mask, const SoftmaxAttentionParams& params,
                               std::size_t heads) {
  const std::size_t n = query_input.size(0), tokens = features.size(0);
  if (mask && (mask->tokens() != tokens || mask->queries() != n)) {
    throw ShapeError("attention mask does not match features/queries");
  }
  Tensor q = matmul(query_input, params.w_q);
  Tensor k = matmul(features, params.w_k);
  Tensor v = matmul(features, params.w_v);
  const std::size_t d = head_width(q.size(1), heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<std::uint8_t> keep;
  if (mask) {
    keep.assign(mask->query_major().begin(), mask->query_major().end());
  } else {
    keep.assign(n * tokens, 1);
  }
  std::vector<Tensor> outputs;
  outputs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor qh = heads == 1 ? q : narrow(q, 1, h * d, d);
    Tensor kh = heads == 1 ? k : narrow(k, 1, h * d, d);
    Tensor vh = heads == 1 ? v : narrow(v, 1, h * d, d);
    Tensor weights = masked_softmax(matmul(qh * scale, transpose(kh)), keep);
    outputs.push_back(matmul(weights, vh));
  }
  Tensor mixed = heads == 1 ? outputs[0] : concat(outputs, 1);
  return matmul(mixed, params.w_o) + residual;
}

Tensor masked_cross_attention_baseline(const Tensor& queries, const Tensor& features, const AttentionMask& mask,
                                       const SoftmaxAttentionParams& params, std::size_t heads) {
  return softmax_cross_attention(queries, queries, features, &mask, params, heads);
}

Tensor plain_cross_attention_baseline(const Tensor& queries, const Tensor& features,
                                      const SoftmaxAttentionParams& params, std::size_t heads) {
  return softmax_cross_attention(queries, queries, features, nullptr, params, heads);
}

Tensor aggregate_tokens(const Tensor& keys, const AttentionMask* mask, std::size_t queries) {
  const std::size_t tokens = keys.size(0);
  std::vector<double> weights(queries * tokens, 0.0);
  for (std::size_t q = 0; q < queries; ++q) {
    const bool restrict = mask != nullptr && mask->any_foreground(q);
    std::size_t count = 0;
    for (std::size_t t = 0; t < tokens; ++t) count += (!restrict || mask->foreground(t, q)) ? 1 : 0;
    for (std::size_t t = 0; t < tokens; ++t) {
      if (!restrict || mask->foreground(t, q)) weights[q * tokens + t] = 1.0 / static_cast<double>(count);
    }
  }
  return matmul(Tensor({queries, tokens}, std::move(weights)), keys);
}

CrossAttentionParams init_cross_attention(ParameterStore& store, const std::string& prefix,
                                          const PemcaConfig& config, Initializer& init) {
  config.validate();
  const std::size_t c = config.channels, cf = config.feature_channels, d = config.proj_dim;
  CrossAttentionParams p;
  p.w_q = store.add(prefix + ".w_q", init.fan_in_uniform({c, d}, c));
  p.w_k = store.add(prefix + ".w_k", init.fan_in_uniform({cf, d}, cf));
  if (is_softmax_attention(config.variant)) {
    p.w_v = store.add(prefix + ".w_v", init.fan_in_uniform({cf, d}, cf));
  } else {
    p.w_a = store.add(prefix + ".w_a", init.fan_in_uniform({d, d}, d));
    p.alpha = store.add(prefix + ".alpha", Tensor::ones({d}));
  }
  p.w_out = store.add(prefix + ".w_out", config.zero_init_out ? Tensor::zeros({d, c}) : init.fan_in_uniform({d, c}, d));
  return p;
}

Tensor cross_attention(const PemcaConfig& config, const CrossAttentionParams& params, const Tensor& query_input,
                       const Tensor& residual, const Tensor& features, const AttentionMask& mask,
                       PrototypeChoice* choice) {
  const AttentionMask* active = config.masking() ? &mask : nullptr;
  if (is_softmax_attention(config.variant)) {
    return softmax_cross_attention(query_input, residual, features, active,
                                   {params.w_q, params.w_k, params.w_v, params.w_out}, config.heads);
  }
  auto [keys, queries] = project_qk(features, query_input, {params.w_k, params.w_q});
  const PrototypeAttentionParams mix{params.w_a, params.alpha, params.w_out};
  if (!config.prototypes()) {
    return prototype_cross_attention(queries, aggregate_tokens(keys, active, queries.size(0)), residual, mix);
  }
  std::vector<std::size_t> indices;
  if (choice && choice->frozen) {
    indices = choice->indices;
  } else {
    indices = select_prototype_indices(keys, queries, active, config.heads);
    if (choice) choice->indices = indices;
  }
  Tensor prototypes = gather_prototypes(keys, indices, config.heads, queries.size(0));
  return prototype_cross_attention(queries, prototypes, residual, mix);
}

}  // namespace pem
