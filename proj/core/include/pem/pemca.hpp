#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "pem/init.hpp"
#include "pem/tensor.hpp"

namespace pem {

// Cross-attention flavours that can be swapped into a decoder block.
enum class AttentionVariant {
  pemca,           // prototype selection under the foreground mask
  pemca_no_mask,   // prototype selection over every pixel
  pemca_no_proto,  // masked token summation instead of selection
  masked_ca,       // softmax cross-attention restricted to the mask
  plain_ca,        // softmax cross-attention over every pixel
};

inline constexpr std::array<AttentionVariant, 5> kAllVariants = {
    AttentionVariant::pemca, AttentionVariant::pemca_no_mask, AttentionVariant::pemca_no_proto,
    AttentionVariant::masked_ca, AttentionVariant::plain_ca};

std::string_view to_string(AttentionVariant variant);
AttentionVariant parse_variant(std::string_view name);
bool uses_mask(AttentionVariant variant);
bool uses_prototypes(AttentionVariant variant);
bool is_softmax_attention(AttentionVariant variant);

struct PemcaConfig {
  std::size_t channels = 256;          // query width C
  std::size_t feature_channels = 256;  // width of the attended feature map
  std::size_t proj_dim = 256;          // D
  std::size_t heads = 8;
  AttentionVariant variant = AttentionVariant::pemca;
  // Start W_out at zero so the block begins as the identity on its queries.
  bool zero_init_out = false;

  bool masking() const { return uses_mask(variant); }
  bool prototypes() const { return uses_prototypes(variant); }
  void validate() const;
};

/// Foreground restriction for cross-attention, logically [HW, N] with the
/// additive value 0 on foreground and -inf elsewhere. Stored query-major.
class AttentionMask {
 public:
  AttentionMask() = default;
  AttentionMask(std::size_t tokens, std::size_t queries, std::vector<std::uint8_t> query_major);

  static AttentionMask all_foreground(std::size_t tokens, std::size_t queries);

  std::size_t tokens() const { return tokens_; }
  std::size_t queries() const { return queries_; }
  bool foreground(std::size_t token, std::size_t query) const {
    return fg_[query * tokens_ + token] != 0;
  }
  double additive(std::size_t token, std::size_t query) const;
  bool any_foreground(std::size_t query) const;
  std::span<const std::uint8_t> query_major() const { return fg_; }

  bool operator==(const AttentionMask&) const = default;

 private:
  std::size_t tokens_ = 0;
  std::size_t queries_ = 0;
  std::vector<std::uint8_t> fg_;
};

// Resizes previous-layer mask logits [N,H1,W1] to (height, width) with
// bilinear interpolation and keeps pixels whose logit is > 0.
AttentionMask build_attention_mask(const Tensor& mask_logits, std::size_t height, std::size_t width);

struct QkProjection {
  Tensor w_k;  // [C_feat, D]
  Tensor w_q;  // [C, D]
};

// features [HW, C_feat], queries [N, C] -> (K [HW, D], Q [N, D]).
std::pair<Tensor, Tensor> project_qk(const Tensor& features, const Tensor& queries,
                                     const QkProjection& proj);

struct PrototypeSet {
  std::size_t heads = 0;
  std::size_t queries = 0;
  std::vector<std::size_t> indices;  // head-major [heads, N]
  Tensor prototypes;                 // [N, D]

  std::size_t index(std::size_t head, std::size_t query) const { return indices[head * queries + query]; }
};

// Per head: the token maximising <K_head[p], Q_head[q]> among the query's
// foreground tokens (all tokens when `mask` is null or the query has none).
// Ties go to the lowest token index.
std::vector<std::size_t> select_prototype_indices(const Tensor& keys, const Tensor& queries,
                                                  const AttentionMask* mask, std::size_t heads);

// Assembles K_p[q] from the selected rows, one channel group per head.
Tensor gather_prototypes(const Tensor& keys, std::span<const std::size_t> indices, std::size_t heads,
                         std::size_t queries);

PrototypeSet select_prototypes(const Tensor& keys, const Tensor& queries, const AttentionMask* mask,
                               std::size_t heads);

inline constexpr double kPrototypeNormEps = 1e-6;

struct PrototypeAttentionParams {
  Tensor w_a;    // [D, D]
  Tensor alpha;  // [D]
  Tensor w_out;  // [D, C]
};

// A = (Q * K_p) W_A;  B = alpha * A / sqrt(|A|^2 + eps) + K_p;
// out = B W_out + residual. Every operand has exactly N rows.
Tensor prototype_cross_attention(const Tensor& queries, const Tensor& prototypes, const Tensor& residual,
                                 const PrototypeAttentionParams& params);

struct SoftmaxAttentionParams {
  Tensor w_q;  // [C, D]
  Tensor w_k;  // [C_feat, D]
  Tensor w_v;  // [C_feat, D]
  Tensor w_o;  // [D, C]
};

// Multi-head softmax(Q K^T / sqrt(d) + M) V W_o + residual. A query with no
// foreground token attends to every token.
Tensor softmax_cross_attention(const Tensor& query_input, const Tensor& residual, const Tensor& features,
                               const AttentionMask* mask, const SoftmaxAttentionParams& params,
                               std::size_t heads);

Tensor masked_cross_attention_baseline(const Tensor& queries, const Tensor& features, const AttentionMask& mask,
                                       const SoftmaxAttentionParams& params, std::size_t heads);
Tensor plain_cross_attention_baseline(const Tensor& queries, const Tensor& features,
                                      const SoftmaxAttentionParams& params, std::size_t heads);

// Masked mean of the keys per query ("w/o prototypes" ablation).
Tensor aggregate_tokens(const Tensor& keys, const AttentionMask* mask, std::size_t queries);

/// Every weight a variant may need; unused ones stay undefined.
struct CrossAttentionParams {
  Tensor w_q;
  Tensor w_k;
  Tensor w_v;
  Tensor w_a;
  Tensor alpha;
  Tensor w_out;
};

CrossAttentionParams init_cross_attention(ParameterStore& store, const std::string& prefix,
                                          const PemcaConfig& config, Initializer& init);

// Prototype indices of one attention call. When `frozen` is set the stored
// indices are reused instead of recomputing the argmax.
struct PrototypeChoice {
  std::vector<std::size_t> indices;
  bool frozen = false;
};

// Dispatches on config.variant. `query_input` feeds the projections and
// `residual` is added to the output.
Tensor cross_attention(const PemcaConfig& config, const CrossAttentionParams& params, const Tensor& query_input,
                       const Tensor& residual, const Tensor& features, const AttentionMask& mask,
                       PrototypeChoice* choice = nullptr);

}  // namespace pem
