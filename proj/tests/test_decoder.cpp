#include <gtest/gtest.h>

#include <cmath>

#include "pem/decoder.hpp"
#include "pem/ops.hpp"
#include "pem/train.hpp"
#include "support/end_to_end.hpp"
#include "support/oracles.hpp"

namespace pem {
namespace {

using testing::random_tensor;
using testing::Rng;

ModelConfig tiny_config(std::size_t stages = 2, AttentionVariant variant = AttentionVariant::pemca) {
  ModelConfig c = toy_model_config();
  c.decoder.stages = stages;
  c.decoder.variant = variant;
  return c;
}

void expect_identical(const Tensor& a, const Tensor& b) {
  ASSERT_EQ(a.shape(), b.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) ASSERT_EQ(a.at(i), b.at(i)) << "at " << i;
}

class DecoderTest : public ::testing::Test {
 protected:
  std::vector<Sample> data = make_toy_dataset();
  NoGradGuard no_grad;
};

TEST_F(DecoderTest, PredictionCountFollowsStages) {
  for (std::size_t stages : {0, 1, 2}) {
    const Model model(tiny_config(stages));
    const ForwardResult fwd = model.forward(data[0].image);
    EXPECT_EQ(fwd.predictions.size(), 3 * stages + 1);
    EXPECT_EQ(fwd.masks.size(), 3 * stages);
  }
}

TEST_F(DecoderTest, OutputShapesAndScaleCycle) {
  const Model model(tiny_config());
  const ForwardResult fwd = model.forward(data[0].image);
  const ModelConfig& c = model.config();
  for (const auto& p : fwd.predictions) {
    EXPECT_EQ(p.mask_logits.shape(), (Shape{c.decoder.queries, 16, 16}));
    EXPECT_EQ(p.class_logits.shape(), (Shape{c.decoder.queries, c.num_classes + 1}));
  }
  EXPECT_EQ(fwd.scales, (std::vector<std::size_t>{3, 2, 1, 3, 2, 1}));
  for (std::size_t l = 0; l < fwd.masks.size(); ++l) {
    const Tensor& map = fwd.pyramid.maps[fwd.scales[l]];
    EXPECT_EQ(fwd.masks[l].tokens(), map.size(1) * map.size(2));
  }
}

// Each block attends with the mask of the previous prediction, resized to
// its scale.
TEST_F(DecoderTest, MaskComesFromPreviousPrediction) {
  const Model model(tiny_config());
  const ForwardResult fwd = model.forward(data[1].image);
  for (std::size_t l = 0; l < fwd.masks.size(); ++l) {
    const Tensor& map = fwd.pyramid.maps[fwd.scales[l]];
    EXPECT_EQ(fwd.masks[l], build_attention_mask(fwd.predictions[l].mask_logits, map.size(1), map.size(2)));
  }
}

TEST_F(DecoderTest, TruncatedDepthIsAPrefixAndFullDepthIsBitExact) {
  const Model model(tiny_config());
  const ForwardResult full = model.forward(data[0].image);
  for (std::size_t depth = 0; depth <= 6; ++depth) {
    ForwardOptions opts;
    opts.max_layers = depth;
    const ForwardResult cut = model.forward(data[0].image, opts);
    ASSERT_EQ(cut.predictions.size(), depth + 1);
    for (std::size_t i = 0; i <= depth; ++i) {
      expect_identical(cut.predictions[i].mask_logits, full.predictions[i].mask_logits);
      expect_identical(cut.predictions[i].class_logits, full.predictions[i].class_logits);
    }
  }
}

TEST_F(DecoderTest, DeterministicForSeed) {
  const Model a(tiny_config()), b(tiny_config());
  ModelConfig other = tiny_config();
  other.seed = 99;
  const Model c(other);
  expect_identical(a.forward(data[0].image).predictions.back().mask_logits,
                   b.forward(data[0].image).predictions.back().mask_logits);
  EXPECT_NE(a.query_embedding().at(0), c.query_embedding().at(0));
}

TEST_F(DecoderTest, FrozenTraceReplaysExactly) {
  const Model model(tiny_config());
  DecisionTrace trace;
  ForwardOptions opts;
  opts.trace = &trace;
  const ForwardResult first = model.forward(data[0].image, opts);
  ASSERT_EQ(trace.masks.size(), 6u);
  ASSERT_EQ(trace.prototypes.size(), 6u);
  trace.frozen = true;
  const ForwardResult again = model.forward(data[0].image, opts);
  expect_identical(first.predictions.back().mask_logits, again.predictions.back().mask_logits);
  DecisionTrace shallow;
  shallow.frozen = true;
  opts.trace = &shallow;
  EXPECT_THROW(model.forward(data[0].image, opts), std::invalid_argument);
}

// Permuting the learned queries permutes every prediction the same way.
TEST_F(DecoderTest, PermutationEquivariantInQueries) {
  for (AttentionVariant v : kAllVariants) {
    Model model(tiny_config(1, v));
    const ForwardResult base = model.forward(data[0].image);
    const std::size_t n = model.config().decoder.queries, c = model.config().decoder.channels;
    const std::vector<std::size_t> perm{3, 0, 7, 1, 6, 2, 5, 4};
    for (const std::string name : {"decoder.query_feat", "decoder.query_pos"}) {
      Tensor t = model.parameters().get(name);
      const std::vector<double> old(t.values().begin(), t.values().end());
      auto v2 = t.mutable_values();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) v2[i * c + j] = old[perm[i] * c + j];
    }
    const ForwardResult moved = model.forward(data[0].image);
    for (std::size_t p = 0; p < base.predictions.size(); ++p) {
      const Tensor& a = base.predictions[p].mask_logits;
      const Tensor& b = moved.predictions[p].mask_logits;
      const std::size_t hw = a.size(1) * a.size(2);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < hw; ++k)
          ASSERT_NEAR(b.at(i * hw + k), a.at(perm[i] * hw + k), 1e-9) << to_string(v) << " prediction " << p;
    }
  }
}

TEST_F(DecoderTest, SelfAttentionMatchesNaive) {
  Rng rng(70);
  const std::size_t n = 5, c = 8;
  const Tensor qk = random_tensor(rng, {n, c}), v = random_tensor(rng, {n, c}), res = random_tensor(rng, {n, c});
  const SelfAttentionParams p{random_tensor(rng, {c, c}), random_tensor(rng, {c, c}), random_tensor(rng, {c, c}),
                              random_tensor(rng, {c, c})};
  const Tensor out = self_attention(qk, v, res, p, 2);
  const auto q = testing::naive_matmul(qk, p.w_q), k = testing::naive_matmul(qk, p.w_k);
  const auto val = testing::naive_matmul(v, p.w_v);
  std::vector<double> mixed(n * c, 0.0);
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> s(n);
      for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t e = 0; e < 4; ++e) s[j] += q[i * c + h * 4 + e] * k[j * c + h * 4 + e];
        s[j] /= 2.0;
      }
      const auto a = testing::naive_softmax(s);
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t e = 0; e < 4; ++e) mixed[i * c + h * 4 + e] += a[j] * val[j * c + h * 4 + e];
    }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t o = 0; o < c; ++o) {
      double s = res.at(i * c + o);
      for (std::size_t e = 0; e < c; ++e) s += mixed[i * c + e] * p.w_o.at(e * c + o);
      EXPECT_NEAR(out.at(i * c + o), s, 1e-12);
    }
}

// Pre-norm ordering: cross-attention, then self-attention, then the FFN.
TEST_F(DecoderTest, BlockComposition) {
  const Model model(tiny_config());
  const ForwardResult fwd = model.forward(data[0].image);
  const auto& b = model.block(0);
  const Tensor& map = fwd.pyramid.maps[3];
  const Tensor tokens = flatten_tokens(map);
  const Tensor pos = model.query_position();
  Tensor x = model.query_embedding();
  x = cross_attention(model.config().attention(), b.cross, layer_norm(x, b.norm_cross) + pos, x, tokens, fwd.masks[0]);
  Tensor n = layer_norm(x, b.norm_self);
  x = self_attention(n + pos, n, x, b.self, model.config().decoder.heads);
  n = layer_norm(x, b.norm_ffn);
  x = x + linear(gelu(linear(n, b.ffn.w1, b.ffn.b1)), b.ffn.w2, b.ffn.b2);
  const MaskPrediction expected = model.predict(x, fwd.pyramid.maps[0]);
  expect_identical(expected.mask_logits, fwd.predictions[1].mask_logits);
  expect_identical(expected.class_logits, fwd.predictions[1].class_logits);
}

TEST_F(DecoderTest, EveryVariantRuns) {
  for (AttentionVariant v : kAllVariants) {
    const Model model(tiny_config(1, v));
    const ForwardResult fwd = model.forward(data[1].image);
    EXPECT_EQ(fwd.predictions.size(), 4u) << to_string(v);
  }
}

TEST(DecoderGradients, EndToEndWithDecisionsFixed) {
  Model model(tiny_config());
  testing::jitter_offsets(model, 5);
  const auto data = make_toy_dataset();
  const auto r = testing::end_to_end_gradcheck(model, data[0], 1, 11);
  EXPECT_GE(r.checked, 20u);
  EXPECT_LT(r.max_rel_error, 1e-4) << r;
}

TEST(Model, ParameterNamesAreUniqueAndSpanModules) {
  const Model model(tiny_config());
  bool backbone = false, pixel = false, decoder = false, head = false;
  for (const auto& p : model.parameters().all()) {
    backbone |= p.name.starts_with("backbone.");
    pixel |= p.name.starts_with("pixel_decoder.");
    decoder |= p.name.starts_with("decoder.block");
    head |= p.name.starts_with("decoder.head.");
  }
  EXPECT_TRUE(backbone && pixel && decoder && head);
  EXPECT_TRUE(model.parameters().contains("decoder.block5.cross.w_a"));
  EXPECT_FALSE(model.parameters().contains("decoder.block6.cross.w_a"));
}

}  // namespace
}  // namespace pem
