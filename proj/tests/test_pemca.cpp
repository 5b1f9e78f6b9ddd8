#include <gtest/gtest.h>

#include <cmath>

#include "pem/attention_kernels.hpp"
#include "pem/init.hpp"
#include "pem/ops.hpp"
#include "pem/pemca.hpp"
#include "support/oracles.hpp"

namespace pem {
namespace {

using testing::random_mask;
using testing::random_tensor;
using testing::Rng;
using testing::uniform_index;

PemcaConfig small_config(AttentionVariant variant, std::size_t c = 12, std::size_t d = 8, std::size_t heads = 2) {
  PemcaConfig config;
  config.channels = c;
  config.feature_channels = c + 2;
  config.proj_dim = d;
  config.heads = heads;
  config.variant = variant;
  return config;
}

// Prototype modulation written out per element.
std::vector<double> naive_prototype_mix(const Tensor& q, const Tensor& kp, const Tensor& residual,
                                        const PrototypeAttentionParams& p) {
  const std::size_t n = q.size(0), d = q.size(1), c = p.w_out.size(1);
  std::vector<double> out(n * c);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> a(d, 0.0);
    for (std::size_t j = 0; j < d; ++j)
      for (std::size_t e = 0; e < d; ++e) a[j] += q.at(i * d + e) * kp.at(i * d + e) * p.w_a.at(e * d + j);
    double sq = 0;
    for (double v : a) sq += v * v;
    const double norm = std::sqrt(sq + kPrototypeNormEps);
    std::vector<double> b(d);
    for (std::size_t j = 0; j < d; ++j) b[j] = p.alpha.at(j) * a[j] / norm + kp.at(i * d + j);
    for (std::size_t o = 0; o < c; ++o) {
      double s = residual.at(i * c + o);
      for (std::size_t j = 0; j < d; ++j) s += b[j] * p.w_out.at(j * c + o);
      out[i * c + o] = s;
    }
  }
  return out;
}

TEST(Variants, NamesRoundTripAndFlagsAreConsistent) {
  for (AttentionVariant v : kAllVariants) {
    EXPECT_EQ(parse_variant(to_string(v)), v);
    EXPECT_FALSE(uses_prototypes(v) && is_softmax_attention(v));
  }
  EXPECT_TRUE(uses_mask(AttentionVariant::pemca));
  EXPECT_FALSE(uses_mask(AttentionVariant::pemca_no_mask));
  EXPECT_FALSE(uses_prototypes(AttentionVariant::pemca_no_proto));
  EXPECT_TRUE(is_softmax_attention(AttentionVariant::masked_ca));
  EXPECT_THROW(parse_variant("bogus"), std::invalid_argument);
}

TEST(PemcaConfig, RejectsIndivisibleHeads) {
  PemcaConfig config = small_config(AttentionVariant::pemca, 12, 9, 2);
  EXPECT_THROW(config.validate(), std::invalid_argument);
  config.proj_dim = 8;
  EXPECT_NO_THROW(config.validate());
}

TEST(AttentionMask, AdditiveFormAndFallbackFlag) {
  const AttentionMask m(3, 2, {1, 0, 1, 0, 0, 0});
  EXPECT_EQ(m.additive(0, 0), 0.0);
  EXPECT_EQ(m.additive(1, 0), -std::numeric_limits<double>::infinity());
  EXPECT_TRUE(m.any_foreground(0));
  EXPECT_FALSE(m.any_foreground(1));
  EXPECT_THROW(AttentionMask(3, 2, {1, 0}), ShapeError);
}

TEST(AttentionMask, BuiltFromResizedLogits) {
  Rng rng(30);
  const Tensor logits = random_tensor(rng, {3, 8, 8}, -2, 2);
  const AttentionMask m = build_attention_mask(logits, 4, 4);
  ASSERT_EQ(m.tokens(), 16u);
  ASSERT_EQ(m.queries(), 3u);
  for (std::size_t q = 0; q < 3; ++q)
    for (std::size_t y = 0; y < 4; ++y)
      for (std::size_t x = 0; x < 4; ++x) {
        // Downsampling by two with half-pixel centres averages a 2x2 block.
        const auto at = [&](std::size_t yy, std::size_t xx) { return logits.at((q * 8 + yy) * 8 + xx); };
        const double v = 0.25 * (at(2 * y, 2 * x) + at(2 * y + 1, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x + 1));
        EXPECT_EQ(m.foreground(y * 4 + x, q), v > 0) << q << ' ' << y << ' ' << x;
      }
}

TEST(Selection, MatchesBruteForceOnRandomInstances) {
  Rng rng(31);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t heads = std::size_t{1} << uniform_index(rng, 0, 3);
    const std::size_t d = heads * uniform_index(rng, 1, 4);
    const std::size_t tokens = uniform_index(rng, 1, 300), n = uniform_index(rng, 1, 16);
    const Tensor keys = random_tensor(rng, {tokens, d}), queries = random_tensor(rng, {n, d});
    const AttentionMask mask = random_mask(rng, tokens, n, 0.3);
    const AttentionMask* m = trial % 4 == 0 ? nullptr : &mask;
    EXPECT_EQ(select_prototype_indices(keys, queries, m, heads), testing::brute_force_prototypes(keys, queries, m, heads));
  }
}

TEST(Selection, TiesGoToLowestToken) {
  // Tokens 1 and 3 are identical and best for the single query.
  const Tensor keys({4, 2}, {0, 0, 1, 1, -1, 0, 1, 1});
  const Tensor queries({1, 2}, {1, 1});
  EXPECT_EQ(select_prototype_indices(keys, queries, nullptr, 1), (std::vector<std::size_t>{1}));
  const AttentionMask mask(4, 1, {0, 0, 1, 1});
  EXPECT_EQ(select_prototype_indices(keys, queries, &mask, 1), (std::vector<std::size_t>{3}));
}

TEST(Selection, BackgroundNeverChosenWhenForegroundExists) {
  Rng rng(32);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t tokens = uniform_index(rng, 2, 64), n = uniform_index(rng, 1, 6), heads = 2;
    const Tensor keys = random_tensor(rng, {tokens, 4}), queries = random_tensor(rng, {n, 4});
    const AttentionMask mask = random_mask(rng, tokens, n, 0.1);
    const auto idx = select_prototype_indices(keys, queries, &mask, heads);
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t q = 0; q < n; ++q) EXPECT_TRUE(mask.foreground(idx[h * n + q], q));
  }
}

TEST(Selection, QueryWithoutForegroundSearchesEverything) {
  Rng rng(33);
  const Tensor keys = random_tensor(rng, {20, 4}), queries = random_tensor(rng, {2, 4});
  std::vector<std::uint8_t> bits(40, 0);
  bits[5] = 1;  // query 0 has one foreground token, query 1 none
  const AttentionMask mask(20, 2, bits);
  const auto idx = select_prototype_indices(keys, queries, &mask, 1);
  EXPECT_EQ(idx[0], 5u);
  EXPECT_EQ(idx[1], testing::brute_force_prototypes(keys, queries, nullptr, 1)[1]);
}

TEST(Selection, GatherAssemblesOneChannelGroupPerHead) {
  Rng rng(34);
  const Tensor keys = random_tensor(rng, {10, 6});
  const std::vector<std::size_t> idx{3, 7, 0, 9, 2, 2};  // heads=3, N=2
  const Tensor kp = gather_prototypes(keys, idx, 3, 2);
  ASSERT_EQ(kp.shape(), (Shape{2, 6}));
  for (std::size_t h = 0; h < 3; ++h)
    for (std::size_t q = 0; q < 2; ++q)
      for (std::size_t j = 0; j < 2; ++j) EXPECT_EQ(kp.at(q * 6 + h * 2 + j), keys.at(idx[h * 2 + q] * 6 + h * 2 + j));
  const PrototypeSet set = select_prototypes(keys, random_tensor(rng, {2, 6}), nullptr, 3);
  EXPECT_EQ(set.index(2, 1), set.indices[5]);
}

TEST(PrototypeAttention, MatchesElementwiseFormula) {
  Rng rng(35);
  const std::size_t n = 5, d = 6, c = 4;
  const Tensor q = random_tensor(rng, {n, d}), kp = random_tensor(rng, {n, d}), res = random_tensor(rng, {n, c});
  const PrototypeAttentionParams p{random_tensor(rng, {d, d}), random_tensor(rng, {d}), random_tensor(rng, {d, c})};
  const Tensor out = prototype_cross_attention(q, kp, res, p);
  const auto ref = naive_prototype_mix(q, kp, res, p);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(out.at(i), ref[i], 1e-12);
}

TEST(PrototypeAttention, ZeroOutputProjectionIsExactIdentity) {
  Rng rng(36);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = uniform_index(rng, 1, 8);
    const Tensor q = random_tensor(rng, {n, 4}, -50, 50), kp = random_tensor(rng, {n, 4}, -50, 50);
    const Tensor res = random_tensor(rng, {n, 3}, -1e6, 1e6);
    const PrototypeAttentionParams p{random_tensor(rng, {4, 4}), random_tensor(rng, {4}), Tensor::zeros({4, 3})};
    const Tensor out = prototype_cross_attention(q, kp, res, p);
    for (std::size_t i = 0; i < res.numel(); ++i) EXPECT_EQ(out.at(i), res.at(i));
  }
}

TEST(PrototypeAttention, NormalizationRemovesScaleOfWa) {
  Rng rng(37);
  const Tensor q = random_tensor(rng, {3, 4}), kp = random_tensor(rng, {3, 4}), res = random_tensor(rng, {3, 2});
  const Tensor wa = random_tensor(rng, {4, 4}), alpha = random_tensor(rng, {4}), wo = random_tensor(rng, {4, 2});
  const Tensor a = prototype_cross_attention(q, kp, res, {wa, alpha, wo});
  const Tensor b = prototype_cross_attention(q, kp, res, {wa * 1000.0, alpha, wo});
  // Only the eps under the root distinguishes the two.
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.at(i), b.at(i), 1e-5);
}

TEST(PrototypeAttention, RejectsRowMismatch) {
  Rng rng(38);
  const PrototypeAttentionParams p{random_tensor(rng, {4, 4}), random_tensor(rng, {4}), random_tensor(rng, {4, 2})};
  EXPECT_THROW(prototype_cross_attention(random_tensor(rng, {3, 4}), random_tensor(rng, {2, 4}),
                                         random_tensor(rng, {3, 2}), p),
               ShapeError);
}

TEST(SoftmaxAttention, MatchesNaiveMaskedAndPlain) {
  Rng rng(39);
  for (std::size_t heads : {1, 2, 4}) {
    const std::size_t n = 5, t = 23, c = 6, cf = 7, d = 8;
    const Tensor qin = random_tensor(rng, {n, c}), res = random_tensor(rng, {n, c}), f = random_tensor(rng, {t, cf});
    const SoftmaxAttentionParams p{random_tensor(rng, {c, d}), random_tensor(rng, {cf, d}), random_tensor(rng, {cf, d}),
                                   random_tensor(rng, {d, c})};
    const AttentionMask drawn = random_mask(rng, t, n, 0.3);
    std::vector<std::uint8_t> bits(drawn.query_major().begin(), drawn.query_major().end());
    std::fill(bits.begin() + 2 * t, bits.begin() + 3 * t, 0);  // query 2 falls back to every token
    const AttentionMask mask(t, n, bits);
    for (const AttentionMask* m : {static_cast<const AttentionMask*>(nullptr), &mask}) {
      const Tensor out = softmax_cross_attention(qin, res, f, m, p, heads);
      const auto ref = testing::naive_softmax_attention(qin, res, f, m, p, heads);
      for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(out.at(i), ref[i], 1e-12);
    }
    const Tensor baseline = masked_cross_attention_baseline(qin, f, mask, p, heads);
    const auto ref = testing::naive_softmax_attention(qin, qin, f, &mask, p, heads);
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(baseline.at(i), ref[i], 1e-12);
  }
}

TEST(Aggregation, IsMaskedMeanOfKeys) {
  Rng rng(40);
  const Tensor keys = random_tensor(rng, {6, 3});
  const AttentionMask mask(6, 2, {1, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0});
  const Tensor agg = aggregate_tokens(keys, &mask, 2);
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_NEAR(agg.at(j), 0.5 * (keys.at(j) + keys.at(9 + j)), 1e-15);
    double mean = 0;
    for (std::size_t t = 0; t < 6; ++t) mean += keys.at(t * 3 + j) / 6;
    EXPECT_NEAR(agg.at(3 + j), mean, 1e-15);
  }
}

TEST(CrossAttention, InitNamesAndZeroInit) {
  ParameterStore store;
  Initializer init(1);
  PemcaConfig config = small_config(AttentionVariant::pemca);
  config.zero_init_out = true;
  const CrossAttentionParams p = init_cross_attention(store, "blk", config, init);
  EXPECT_TRUE(store.contains("blk.w_q"));
  EXPECT_TRUE(store.contains("blk.w_a"));
  EXPECT_FALSE(store.contains("blk.w_v"));
  EXPECT_EQ(p.w_k.shape(), (Shape{config.feature_channels, config.proj_dim}));
  for (double v : p.w_out.values()) EXPECT_EQ(v, 0.0);
  for (double v : p.alpha.values()) EXPECT_EQ(v, 1.0);

  Rng rng(41);
  const Tensor q = random_tensor(rng, {4, 12}), f = random_tensor(rng, {30, 14});
  const Tensor out = cross_attention(config, p, q, q, f, random_mask(rng, 30, 4, 0.2));
  for (std::size_t i = 0; i < q.numel(); ++i) EXPECT_EQ(out.at(i), q.at(i));
}

TEST(CrossAttention, FrozenChoiceReplaysIndices) {
  Rng rng(42);
  ParameterStore store;
  Initializer init(2);
  const PemcaConfig config = small_config(AttentionVariant::pemca);
  const CrossAttentionParams p = init_cross_attention(store, "x", config, init);
  const Tensor q = random_tensor(rng, {3, 12}), f = random_tensor(rng, {40, 14});
  const AttentionMask mask = random_mask(rng, 40, 3, 0.25);
  PrototypeChoice choice;
  const Tensor first = cross_attention(config, p, q, q, f, mask, &choice);
  ASSERT_EQ(choice.indices.size(), config.heads * 3);
  EXPECT_EQ(choice.indices, select_prototype_indices(matmul(f, p.w_k), matmul(q, p.w_q), &mask, config.heads));
  choice.frozen = true;
  const Tensor again = cross_attention(config, p, q, q, f, mask, &choice);
  for (std::size_t i = 0; i < first.numel(); ++i) EXPECT_EQ(first.at(i), again.at(i));
}

// With selection held fixed, prototype attention is smooth in every input.
TEST(CrossAttention, GradientsWithSelectionHeldFixed) {
  Rng rng(43);
  ParameterStore store;
  Initializer init(3);
  const PemcaConfig config = small_config(AttentionVariant::pemca);
  const CrossAttentionParams p = init_cross_attention(store, "g", config, init);
  const Tensor q = random_tensor(rng, {3, 12}, -1, 1, true), f = random_tensor(rng, {25, 14}, -1, 1, true);
  const AttentionMask mask = random_mask(rng, 25, 3, 0.3);
  PrototypeChoice choice;
  cross_attention(config, p, q, q, f, mask, &choice);
  choice.frozen = true;
  const Tensor weights = random_tensor(rng, {3, 12});
  const std::vector<Tensor> leaves{p.alpha, p.w_a, p.w_out, p.w_q, p.w_k, q, f};
  const auto r = testing::gradcheck(
      [&] { return sum_all(cross_attention(config, p, q, q, f, mask, &choice) * weights); }, leaves);
  EXPECT_LT(r.max_rel_error, 1e-5) << r;
}

TEST(CrossAttention, SoftmaxAndAggregateGradients) {
  Rng rng(44);
  for (AttentionVariant v : {AttentionVariant::masked_ca, AttentionVariant::pemca_no_proto}) {
    ParameterStore store;
    Initializer init(4);
    const PemcaConfig config = small_config(v);
    const CrossAttentionParams p = init_cross_attention(store, "s", config, init);
    const Tensor q = random_tensor(rng, {3, 12}, -1, 1, true), f = random_tensor(rng, {20, 14}, -1, 1, true);
    const AttentionMask mask = random_mask(rng, 20, 3, 0.4);
    const Tensor weights = random_tensor(rng, {3, 12});
    std::vector<Tensor> leaves{q, f};
    for (const auto& param : store.all()) leaves.push_back(param.tensor);
    const auto r =
        testing::gradcheck([&] { return sum_all(cross_attention(config, p, q, q, f, mask) * weights); }, leaves);
    EXPECT_LT(r.max_rel_error, 1e-5) << to_string(v) << r;
  }
}

// The benchmark kernels and the differentiable path compute the same function.
TEST(Kernels, AgreeWithDifferentiablePathInDoublePrecision) {
  Rng rng(45);
  for (AttentionVariant v : kAllVariants) {
    for (std::size_t tokens : {37, 700, 1500}) {
      ParameterStore store;
      Initializer init(5);
      PemcaConfig config = small_config(v, 16, 16, 4);
      config.feature_channels = 16;
      const CrossAttentionParams p = init_cross_attention(store, "k", config, init);
      const std::size_t n = 6;
      const Tensor q = random_tensor(rng, {n, 16}), f = random_tensor(rng, {tokens, 16});
      const AttentionMask drawn = random_mask(rng, tokens, n, 0.25);
      std::vector<std::uint8_t> bits(drawn.query_major().begin(), drawn.query_major().end());
      std::fill(bits.begin(), bits.begin() + tokens, 0);  // query 0 has no foreground
      const AttentionMask mask(tokens, n, bits);
      const Tensor expected = cross_attention(config, p, q, q, f, mask);

      using M = kernels::Mat<double>;
      const auto to_mat = [](const Tensor& t) {
        M m(t.size(0), t.size(1));
        std::copy(t.values().begin(), t.values().end(), m.data());
        return m;
      };
      kernels::Weights<double> w;
      w.heads = config.heads;
      w.w_q = to_mat(p.w_q);
      w.w_k = to_mat(p.w_k);
      if (p.w_v.defined()) w.w_v = to_mat(p.w_v);
      if (p.w_a.defined()) {
        w.w_a = to_mat(p.w_a);
        w.alpha = kernels::RowVec<double>::Map(p.alpha.values().data(), static_cast<Eigen::Index>(p.alpha.numel()));
      }
      w.w_out = to_mat(p.w_out);
      kernels::Workspace<double> ws;
      const auto kmask = kernels::KernelMask<double>::from(mask);
      kernels::run_attention(v, to_mat(q), to_mat(f), kmask, w, ws);
      ASSERT_EQ(static_cast<std::size_t>(ws.out.size()), expected.numel());
      for (std::size_t i = 0; i < expected.numel(); ++i)
        EXPECT_NEAR(ws.out.data()[i], expected.at(i), 1e-10) << to_string(v) << " HW=" << tokens;
      if (uses_prototypes(v)) {
        const auto idx = select_prototype_indices(matmul(f, p.w_k), matmul(q, p.w_q),
                                                  uses_mask(v) ? &mask : nullptr, config.heads);
        for (std::size_t i = 0; i < idx.size(); ++i) EXPECT_EQ(static_cast<std::size_t>(ws.selected[i]), idx[i]);
      }
    }
  }
}

}  // namespace
}  // namespace pem
