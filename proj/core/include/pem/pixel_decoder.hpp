#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <string_view>

#include "pem/init.hpp"
#include "pem/tensor.hpp"

namespace pem {

enum class Upsample { bilinear, nearest };
enum class FeatureNorm { instance, none };

std::string_view to_string(Upsample mode);
std::string_view to_string(FeatureNorm norm);
Upsample parse_upsample(std::string_view name);
FeatureNorm parse_feature_norm(std::string_view name);

struct PixelDecoderConfig {
  std::array<std::size_t, 4> backbone_widths{32, 64, 128, 256};  // B_1..B_4
  std::size_t pixel_channels = 128;                                // C_px
  std::size_t csm_ratio = 4;  // CSM hidden width is C_px / csm_ratio
  Upsample upsample = Upsample::bilinear;
  FeatureNorm norm = FeatureNorm::instance;

  std::size_t csm_hidden() const;
  void validate() const;
};

// Index 0 holds stride 4, index 3 stride 32.
struct BackboneFeatures {
  std::array<Tensor, 4> maps;  // [B_i, H_i, W_i]
};

struct FeaturePyramid {
  std::array<Tensor, 4> maps;  // [C_px, H_i, W_i]
};

inline constexpr std::array<std::size_t, 4> kPyramidStrides{4, 8, 16, 32};

struct ConvParams {
  Tensor weight;  // [C_out, C_in, k, k]
  Tensor bias;    // [C_out]
};

struct BackboneParams {
  ConvParams stem;                  // 3 -> B_1, stride 2
  std::array<ConvParams, 4> stages;  // stride 2 each
};

struct CsmParams {
  ConvParams proj;  // 1x1, B_i -> C_px
  Tensor gamma;     // [C_px, 1] affine norm scale (undefined without norm)
  Tensor beta;      // [C_px, 1]
  Tensor w1, b1;    // [C_px, hidden], [hidden]
  Tensor w2, b2;    // [hidden, C_px], [C_px]
};

struct DeformableConvParams {
  ConvParams conv;    // [C_out, C_in, 3, 3]
  ConvParams offset;  // [18, C_in, 3, 3]; channel 2t is the row shift of tap t
};

struct PixelDecoderParams {
  std::array<CsmParams, 4> csm;
  Tensor scene_w, scene_b;                  // [B_4, C_px], [C_px]
  std::array<DeformableConvParams, 3> fuse;  // scales 2, 3, 4
};

BackboneParams init_backbone(ParameterStore& store, const std::string& prefix,
                             const std::array<std::size_t, 4>& widths, Initializer& init);
PixelDecoderParams init_pixel_decoder(ParameterStore& store, const std::string& prefix,
                                      const PixelDecoderConfig& config, Initializer& init);

// Four stride-2 GELU conv stages after a stride-2 stem. H and W must be
// multiples of 32.
BackboneFeatures stub_backbone(const Tensor& image, const BackboneParams& params);

// F' = Proj(F) (then the affine norm); F^c = F' * sigmoid(MLP(GAP(F'))) + F'.
Tensor csm(const Tensor& features, const CsmParams& params, FeatureNorm norm);

// 3x3, stride 1, zero padding 1. Tap t = 3*ky + kx of output pixel (y, x)
// reads x at (y - 1 + ky + dy, x - 1 + kx + dx).
Tensor deformable_conv_with_offsets(const Tensor& x, const Tensor& offsets, const ConvParams& conv);
Tensor deformable_conv(const Tensor& x, const DeformableConvParams& params);

// Doubles the spatial extent.
Tensor upsample2x(const Tensor& x, Upsample mode);

// contextual[i] is F^c_{i+1}; raw_coarsest is the backbone F_4.
FeaturePyramid aggregate(const std::array<Tensor, 4>& contextual, const Tensor& raw_coarsest,
                         const PixelDecoderParams& params, Upsample mode);

FeaturePyramid pixel_decoder(const BackboneFeatures& features, const PixelDecoderParams& params,
                             const PixelDecoderConfig& config);

}  // namespace pem
