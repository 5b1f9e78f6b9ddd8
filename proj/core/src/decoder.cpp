#include "pem/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "pem/ops.hpp"

namespace pem {

namespace {

LayerNormParams init_layer_norm(ParameterStore& store, const std::string& prefix, std::size_t c) {
  return {store.add(prefix + ".gamma", Tensor::ones({c})), store.add(prefix + ".beta", Tensor::zeros({c}))};
}

}  // namespace

Tensor layer_norm(const Tensor& x, const LayerNormParams& params) {
  return normalize_rows(x) * params.gamma + params.beta;
}

Tensor self_attention(const Tensor& qk, const Tensor& v, const Tensor& residual, const SelfAttentionParams& params,
                      std::size_t heads) {
  Tensor q = matmul(qk, params.w_q);
  Tensor k = matmul(qk, params.w_k);
  Tensor values = matmul(v, params.w_v);
  const std::size_t width = q.size(1);
  if (heads == 0 || width % heads != 0) throw ShapeError("self-attention width not divisible by heads");
  const std::size_t d = width / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<Tensor> outputs;
  outputs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor qh = heads == 1 ? q : narrow(q, 1, h * d, d);
    Tensor kh = heads == 1 ? k : narrow(k, 1, h * d, d);
    Tensor vh = heads == 1 ? values : narrow(values, 1, h * d, d);
    outputs.push_back(matmul(softmax(matmul(qh * scale, transpose(kh)), 1), vh));
  }
  Tensor mixed = heads == 1 ? outputs[0] : concat(outputs, 1);
  return matmul(mixed, params.w_o) + residual;
}

Tensor flatten_tokens(const Tensor& map) {
  if (map.dim() != 3) throw ShapeError("feature map must be [C,H,W], got " + to_string(map.shape()));
  return transpose(reshape(map, {map.size(0), map.size(1) * map.size(2)}));
}

Model::Model(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  Initializer init(config_.seed);
  const std::size_t c = config_.decoder.channels, c_px = config_.pixel.pixel_channels;
  const std::size_t hidden = c * config_.decoder.ffn_expansion;
  backbone_ = init_backbone(store_, "backbone", config_.pixel.backbone_widths, init);
  pixel_ = init_pixel_decoder(store_, "pixel_decoder", config_.pixel, init);
  query_feat_ = store_.add("decoder.query_feat", init.normal({config_.decoder.queries, c}, 1.0));
  query_pos_ = store_.add("decoder.query_pos", init.normal({config_.decoder.queries, c}, 1.0));
  const PemcaConfig attention = config_.attention();
  for (std::size_t l = 0; l < num_layers(); ++l) {
    const std::string name = "decoder.block" + std::to_string(l);
    DecoderBlockParams b;
    b.norm_cross = init_layer_norm(store_, name + ".norm_cross", c);
    b.cross = init_cross_attention(store_, name + ".cross", attention, init);
    b.norm_self = init_layer_norm(store_, name + ".norm_self", c);
    b.self.w_q = store_.add(name + ".self.w_q", init.fan_in_uniform({c, c}, c));
    b.self.w_k = store_.add(name + ".self.w_k", init.fan_in_uniform({c, c}, c));
    b.self.w_v = store_.add(name + ".self.w_v", init.fan_in_uniform({c, c}, c));
    b.self.w_o = store_.add(name + ".self.w_o", init.fan_in_uniform({c, c}, c));
    b.norm_ffn = init_layer_norm(store_, name + ".norm_ffn", c);
    b.ffn.w1 = store_.add(name + ".ffn.w1", init.fan_in_uniform({c, hidden}, c));
    b.ffn.b1 = store_.add(name + ".ffn.b1", init.fan_in_uniform({hidden}, c));
    b.ffn.w2 = store_.add(name + ".ffn.w2", init.fan_in_uniform({hidden, c}, hidden));
    b.ffn.b2 = store_.add(name + ".ffn.b2", init.fan_in_uniform({c}, hidden));
    blocks_.push_back(std::move(b));
  }
  const std::size_t k1 = config_.num_classes + 1;
  head_.norm = init_layer_norm(store_, "decoder.head.norm", c);
  head_.class_w = store_.add("decoder.head.class.weight", init.fan_in_uniform({c, k1}, c));
  head_.class_b = store_.add("decoder.head.class.bias", init.fan_in_uniform({k1}, c));
  head_.embed_w1 = store_.add("decoder.head.mask_embed1.weight", init.fan_in_uniform({c, c}, c));
  head_.embed_b1 = store_.add("decoder.head.mask_embed1.bias", init.fan_in_uniform({c}, c));
  head_.embed_w2 = store_.add("decoder.head.mask_embed2.weight", init.fan_in_uniform({c, c_px}, c));
  head_.embed_b2 = store_.add("decoder.head.mask_embed2.bias", init.fan_in_uniform({c_px}, c));
}

FeaturePyramid Model::encode(const Tensor& image) const {
  return pixel_decoder(stub_backbone(image, backbone_), pixel_, config_.pixel);
}

MaskPrediction Model::predict(const Tensor& queries, const Tensor& finest) const {
  const std::size_t c_px = finest.size(0), h = finest.size(1), w = finest.size(2);
  if (c_px != config_.pixel.pixel_channels) {
    throw ShapeError("finest map has " + std::to_string(c_px) + " channels, expected " +
                     std::to_string(config_.pixel.pixel_channels));
  }
  Tensor normed = layer_norm(queries, head_.norm);
  MaskPrediction out;
  out.class_logits = linear(normed, head_.class_w, head_.class_b);
  Tensor embed = linear(gelu(linear(normed, head_.embed_w1, head_.embed_b1)), head_.embed_w2, head_.embed_b2);
  out.mask_logits = reshape(matmul(embed, reshape(finest, {c_px, h * w})), {queries.size(0), h, w});
  return out;
}

BlockOutput Model::decoder_block(std::size_t layer, const Tensor& queries, const Tensor& tokens, std::size_t height,
                                 std::size_t width, const Tensor& prev_mask_logits, const Tensor& finest,
                                 const AttentionMask* frozen_mask, PrototypeChoice* choice) const {
  const DecoderBlockParams& b = blocks_.at(layer);
  BlockOutput out;
  out.mask = frozen_mask ? *frozen_mask : build_attention_mask(prev_mask_logits, height, width);
  if (out.mask.tokens() != tokens.size(0) || out.mask.queries() != queries.size(0)) {
    throw ShapeError("attention mask does not match block " + std::to_string(layer) + " inputs");
  }
  Tensor x = queries;
  x = cross_attention(config_.attention(), b.cross, layer_norm(x, b.norm_cross) + query_pos_, x, tokens, out.mask,
                      choice);
  Tensor n = layer_norm(x, b.norm_self);
  x = self_attention(n + query_pos_, n, x, b.self, config_.decoder.heads);
  n = layer_norm(x, b.norm_ffn);
  x = x + linear(gelu(linear(n, b.ffn.w1, b.ffn.b1)), b.ffn.w2, b.ffn.b2);
  out.queries = x;
  out.prediction = predict(x, finest);
  return out;
}

ForwardResult Model::forward(const Tensor& image, const ForwardOptions& options) const {
  ForwardResult result;
  result.pyramid = encode(image);
  const Tensor& finest = result.pyramid.maps[0];
  std::array<Tensor, 4> tokens;
  for (std::size_t s = 1; s < 4; ++s) tokens[s] = flatten_tokens(result.pyramid.maps[s]);

  const std::size_t depth = std::min(options.max_layers.value_or(num_layers()), num_layers());
  DecisionTrace* trace = options.trace;
  if (trace && trace->frozen && (trace->masks.size() < depth || trace->prototypes.size() < depth)) {
    throw std::invalid_argument("frozen trace covers fewer layers than requested");
  }
  if (trace && !trace->frozen) {
    trace->masks.clear();
    trace->prototypes.assign(depth, {});
  }

  Tensor q = query_feat_;
  result.predictions.push_back(predict(q, finest));
  for (std::size_t l = 0; l < depth; ++l) {
    const std::size_t s = scale_for_layer(l);
    const Tensor& map = result.pyramid.maps[s];
    const AttentionMask* frozen_mask = trace && trace->frozen ? &trace->masks[l] : nullptr;
    PrototypeChoice* choice = trace ? &trace->prototypes[l] : nullptr;
    if (choice) choice->frozen = trace->frozen;
    BlockOutput block = decoder_block(l, q, tokens[s], map.size(1), map.size(2),
                                      result.predictions.back().mask_logits, finest, frozen_mask, choice);
    if (trace && !trace->frozen) trace->masks.push_back(block.mask);
    q = block.queries;
    result.predictions.push_back(std::move(block.prediction));
    result.masks.push_back(std::move(block.mask));
    result.scales.push_back(s);
  }
  return result;
}

}  // namespace pem
