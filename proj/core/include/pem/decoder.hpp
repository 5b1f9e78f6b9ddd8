#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "pem/config.hpp"
#include "pem/pemca.hpp"
#include "pem/pixel_decoder.hpp"
#include "pem/prediction.hpp"
#include "pem/tensor.hpp"

namespace pem {

struct LayerNormParams {
  Tensor gamma;  // [C]
  Tensor beta;   // [C]
};

struct SelfAttentionParams {
  Tensor w_q, w_k, w_v, w_o;  // [C, C]
};

struct FfnParams {
  Tensor w1, b1;  // [C, C*expansion], [C*expansion]
  Tensor w2, b2;  // [C*expansion, C], [C]
};

struct DecoderBlockParams {
  LayerNormParams norm_cross, norm_self, norm_ffn;
  CrossAttentionParams cross;
  SelfAttentionParams self;
  FfnParams ffn;
};

struct PredictionHeadParams {
  LayerNormParams norm;
  Tensor class_w, class_b;    // [C, K+1], [K+1]
  Tensor embed_w1, embed_b1;  // [C, C], [C]
  Tensor embed_w2, embed_b2;  // [C, C_px], [C_px]
};

Tensor layer_norm(const Tensor& x, const LayerNormParams& params);

// Multi-head softmax attention among the N queries: scores from `qk`, values
// from `v`, output projected and added to `residual`.
Tensor self_attention(const Tensor& qk, const Tensor& v, const Tensor& residual, const SelfAttentionParams& params,
                      std::size_t heads);

// [C, H, W] -> [H*W, C]; token index is y*W + x.
Tensor flatten_tokens(const Tensor& map);

// Discrete choices of one forward pass. With `frozen` set, a forward reuses
// the recorded masks and prototype indices instead of recomputing them.
struct DecisionTrace {
  bool frozen = false;
  std::vector<AttentionMask> masks;
  std::vector<PrototypeChoice> prototypes;
};

struct ForwardOptions {
  std::optional<std::size_t> max_layers;  // truncate the decoder depth
  DecisionTrace* trace = nullptr;
};

struct ForwardResult {
  std::vector<MaskPrediction> predictions;  // bootstrap first, then one per block
  std::vector<AttentionMask> masks;         // mask used by each block
  std::vector<std::size_t> scales;          // pyramid index used by each block
  FeaturePyramid pyramid;
};

struct BlockOutput {
  Tensor queries;
  MaskPrediction prediction;
  AttentionMask mask;
};

class Model {
 public:
  explicit Model(ModelConfig config);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const ModelConfig& config() const { return config_; }
  ParameterStore& parameters() { return store_; }
  const ParameterStore& parameters() const { return store_; }
  std::size_t num_layers() const { return config_.decoder.layers(); }

  // Pyramid index feeding block `layer`: F4, F3, F2 repeating.
  static std::size_t scale_for_layer(std::size_t layer) { return 3 - layer % 3; }

  FeaturePyramid encode(const Tensor& image) const;
  MaskPrediction predict(const Tensor& queries, const Tensor& finest) const;

  // Cross-attention, self-attention and FFN, each pre-norm with a residual.
  // `frozen_mask` replaces the mask derived from `prev_mask_logits`.
  BlockOutput decoder_block(std::size_t layer, const Tensor& queries, const Tensor& tokens, std::size_t height,
                            std::size_t width, const Tensor& prev_mask_logits, const Tensor& finest,
                            const AttentionMask* frozen_mask = nullptr, PrototypeChoice* choice = nullptr) const;

  ForwardResult forward(const Tensor& image, const ForwardOptions& options = {}) const;

  const Tensor& query_embedding() const { return query_feat_; }
  const Tensor& query_position() const { return query_pos_; }
  const DecoderBlockParams& block(std::size_t layer) const { return blocks_.at(layer); }
  const PredictionHeadParams& head() const { return head_; }
  const PixelDecoderParams& pixel_params() const { return pixel_; }
  const BackboneParams& backbone_params() const { return backbone_; }

 private:
  ModelConfig config_;
  ParameterStore store_;
  BackboneParams backbone_;
  PixelDecoderParams pixel_;
  Tensor query_feat_;
  Tensor query_pos_;
  std::vector<DecoderBlockParams> blocks_;
  PredictionHeadParams head_;
};

}  // namespace pem
