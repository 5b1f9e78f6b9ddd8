#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>

#include "pem/config.hpp"
#include "pem/decoder.hpp"
#include "pem/tensor_io.hpp"
#include "pem/train.hpp"
#include "support/oracles.hpp"

namespace pem {
namespace {

namespace fs = std::filesystem;
using testing::random_tensor;
using testing::Rng;

class TempDir {
 public:
  TempDir() {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    path_ = fs::temp_directory_path() / (std::string("pem_") + info->test_suite_name() + "_" + info->name());
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

TEST(Config, DefaultsSurviveAnEmptyObject) {
  const ModelConfig c = parse_model_config("{}");
  EXPECT_EQ(c.decoder.queries, 100u);
  EXPECT_EQ(c.decoder.channels, 256u);
  EXPECT_EQ(c.decoder.layers(), 6u);
  EXPECT_EQ(c.decoder.variant, AttentionVariant::pemca);
  EXPECT_DOUBLE_EQ(c.thresholds.confidence, 0.8);
  EXPECT_EQ(c.loss.classification, ClassificationLoss::bce);
}

TEST(Config, ParsesEveryField) {
  const ModelConfig c = parse_model_config(R"({
    "stages": 1, "N": 12, "C": 32, "D": 16, "heads": 4, "ffn_expansion": 2, "C_px": 24,
    "variant": "masked_ca", "num_classes": 5, "seed": 7, "zero_init_out": true,
    "thresholds": {"confidence": 0.6, "overlap": 0.7}, "backbone_widths": [8, 16, 24, 32],
    "csm_ratio": 2, "upsample": "nearest", "norm": "none", "stuff_classes": [3, 4],
    "loss": {"weights": {"cls": 1, "mask_bce": 2, "dice": 3}, "classification": "softmax_ce",
             "no_object_weight": 0.1, "supervise_bootstrap": false}})");
  EXPECT_EQ(c.decoder.stages, 1u);
  EXPECT_EQ(c.decoder.queries, 12u);
  EXPECT_EQ(c.decoder.attention_dim(), 16u);
  EXPECT_EQ(c.pixel.pixel_channels, 24u);
  EXPECT_EQ(c.decoder.variant, AttentionVariant::masked_ca);
  EXPECT_TRUE(c.decoder.zero_init_out);
  EXPECT_EQ(c.pixel.backbone_widths[2], 24u);
  EXPECT_EQ(c.thing_mask(), (std::vector<bool>{true, true, true, false, false}));
  EXPECT_DOUBLE_EQ(c.loss.weights.dice, 3.0);
  EXPECT_DOUBLE_EQ(c.loss.no_object_weight, 0.1);
  EXPECT_FALSE(c.loss.supervise_bootstrap);
  EXPECT_EQ(c.loss.classification, ClassificationLoss::softmax_ce);
}

TEST(Config, RoundTripPreservesHash) {
  ModelConfig c = toy_model_config();
  c.stuff_classes = {0};
  c.loss.no_object_weight = 0.25;
  const ModelConfig back = parse_model_config(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_EQ(config_hash(back), config_hash(c));
  c.seed += 1;
  EXPECT_NE(config_hash(back), config_hash(c));
  EXPECT_EQ(hex_hash(0xabcULL), "0000000000000abc");
}

TEST(Config, RejectsUnknownKeysBadTypesAndInvalidValues) {
  for (const char* text : {R"({"queries": 4})", R"({"loss": {"weight": {}}})", R"({"thresholds": {"conf": 0.5}})",
                           R"({"N": "four"})", R"({"N": 0})", R"({"C": 30, "heads": 4})", R"({"variant": "fast"})",
                           R"({"thresholds": {"overlap": 1.0}})", R"({"num_classes": 3, "stuff_classes": [3]})",
                           R"({"backbone_widths": [1, 2, 3]})", R"([1, 2])", "{not json"}) {
    EXPECT_THROW(parse_model_config(text), std::invalid_argument) << text;
  }
  EXPECT_THROW(load_model_config("/nonexistent/pem.json"), std::runtime_error);
}

TEST(TensorIo, EncodeDecodeRoundTripIsBitExact) {
  Rng rng(30);
  const std::vector<NamedTensor> in{{"a", random_tensor(rng, {3, 4})},
                                    {"b.c", Tensor::scalar(-1e300)},
                                    {"unit_dim", random_tensor(rng, {2, 1, 5})}};
  const std::string bytes = encode_tensors(in);
  EXPECT_EQ(bytes.substr(0, 8), kTensorFileMagic);
  const auto out = decode_tensors(bytes);
  ASSERT_EQ(out.size(), in.size());
  for (std::size_t i = 0; i < in.size(); ++i) {
    EXPECT_EQ(out[i].name, in[i].name);
    ASSERT_EQ(out[i].tensor.shape(), in[i].tensor.shape());
    EXPECT_EQ(std::memcmp(out[i].tensor.values().data(), in[i].tensor.values().data(),
                          in[i].tensor.numel() * sizeof(double)),
              0);
  }
  EXPECT_EQ(find_tensor(out, "b.c").item(), -1e300);
  EXPECT_THROW(find_tensor(out, "missing"), FormatError);
}

TEST(TensorIo, MalformedInputsRaiseFormatError) {
  const std::string good = encode_tensors({{"x", Tensor({2}, {1.0, 2.0})}});
  EXPECT_THROW(decode_tensors("NOTMAGIC"), FormatError);
  EXPECT_THROW(decode_tensors(""), FormatError);
  EXPECT_THROW(decode_tensors(good.substr(0, 20)), FormatError);
  EXPECT_THROW(decode_tensors(good.substr(0, good.size() - 1)), FormatError);
  std::string corrupt = good;
  corrupt[17] = '#';
  EXPECT_THROW(decode_tensors(corrupt), FormatError);
  EXPECT_THROW(encode_tensors({{"x", Tensor::scalar(1)}, {"x", Tensor::scalar(2)}}), FormatError);
}

TEST(TensorIo, FilesAndCheckpointsRoundTrip) {
  TempDir dir;
  const Model source(toy_model_config());
  const fs::path ckpt = dir.path() / "model.ckpt";
  save_checkpoint(ckpt, source.parameters());

  ModelConfig other = toy_model_config();
  other.seed = 1234;
  Model target(other);
  ASSERT_NE(target.parameters().all()[0].tensor.at(0), source.parameters().all()[0].tensor.at(0));
  load_checkpoint(ckpt, target.parameters());
  const auto a = source.parameters().all(), b = target.parameters().all();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].name, b[i].name);
    for (std::size_t j = 0; j < a[i].tensor.numel(); ++j) ASSERT_EQ(a[i].tensor.at(j), b[i].tensor.at(j));
  }

  // A checkpoint from a different architecture is rejected.
  ModelConfig wider = toy_model_config();
  wider.decoder.queries += 1;
  Model mismatched(wider);
  EXPECT_THROW(load_checkpoint(ckpt, mismatched.parameters()), FormatError);
  ModelConfig shallow = toy_model_config();
  shallow.decoder.stages = 1;
  Model fewer(shallow);
  EXPECT_THROW(load_checkpoint(ckpt, fewer.parameters()), FormatError);

  EXPECT_THROW(load_tensors(dir.path() / "absent.bin"), std::runtime_error);
  EXPECT_THROW(save_tensors(dir.path() / "no_such_dir" / "x.bin", {}), std::runtime_error);
}

}  // namespace
}  // namespace pem
