#include "pem/pixel_decoder.hpp"

#include <stdexcept>

#include "pem/ops.hpp"

namespace pem {

namespace {

constexpr std::size_t kTaps = 9;

ConvParams init_conv(ParameterStore& store, const std::string& prefix, std::size_t c_out, std::size_t c_in,
                     std::size_t k, Initializer& init) {
  const std::size_t fan_in = c_in * k * k;
  return {store.add(prefix + ".weight", init.fan_in_uniform({c_out, c_in, k, k}, fan_in)),
          store.add(prefix + ".bias", init.fan_in_uniform({c_out}, fan_in))};
}

Tensor global_average(const Tensor& x) {
  return reduce(Reduce::mean, reshape(x, {x.size(0), x.size(1) * x.size(2)}), 1);  // [C]
}

}  // namespace

std::string_view to_string(Upsample mode) { return mode == Upsample::bilinear ? "bilinear" : "nearest"; }

std::string_view to_string(FeatureNorm norm) { return norm == FeatureNorm::instance ? "instance" : "none"; }

Upsample parse_upsample(std::string_view name) {
  if (name == "bilinear") return Upsample::bilinear;
  if (name == "nearest") return Upsample::nearest;
  throw std::invalid_argument("unknown upsample mode: " + std::string(name));
}

FeatureNorm parse_feature_norm(std::string_view name) {
  if (name == "instance") return FeatureNorm::instance;
  if (name == "none") return FeatureNorm::none;
  throw std::invalid_argument("unknown feature norm: " + std::string(name));
}

std::size_t PixelDecoderConfig::csm_hidden() const { return std::max<std::size_t>(1, pixel_channels / csm_ratio); }

void PixelDecoderConfig::validate() const {
  for (std::size_t b : backbone_widths) {
    if (b == 0) throw std::invalid_argument("backbone widths must be positive");
  }
  if (pixel_channels == 0) throw std::invalid_argument("pixel decoder width must be positive");
  if (csm_ratio == 0) throw std::invalid_argument("CSM ratio must be positive");
}

BackboneParams init_backbone(ParameterStore& store, const std::string& prefix,
                             const std::array<std::size_t, 4>& widths, Initializer& init) {
  BackboneParams p;
  p.stem = init_conv(store, prefix + ".stem", widths[0], 3, 3, init);
  std::size_t c_in = widths[0];
  for (std::size_t i = 0; i < 4; ++i) {
    p.stages[i] = init_conv(store, prefix + ".stage" + std::to_string(i + 1), widths[i], c_in, 3, init);
    c_in = widths[i];
  }
  return p;
}

PixelDecoderParams init_pixel_decoder(ParameterStore& store, const std::string& prefix,
                                      const PixelDecoderConfig& config, Initializer& init) {
  config.validate();
  const std::size_t c = config.pixel_channels, hidden = config.csm_hidden();
  PixelDecoderParams p;
  for (std::size_t i = 0; i < 4; ++i) {
    const std::string name = prefix + ".csm" + std::to_string(i + 1);
    CsmParams& m = p.csm[i];
    m.proj = init_conv(store, name + ".proj", c, config.backbone_widths[i], 1, init);
    if (config.norm == FeatureNorm::instance) {
      m.gamma = store.add(name + ".norm.gamma", Tensor::ones({c, 1}));
      m.beta = store.add(name + ".norm.beta", Tensor::zeros({c, 1}));
    }
    m.w1 = store.add(name + ".mlp1.weight", init.fan_in_uniform({c, hidden}, c));
    m.b1 = store.add(name + ".mlp1.bias", init.fan_in_uniform({hidden}, c));
    m.w2 = store.add(name + ".mlp2.weight", init.fan_in_uniform({hidden, c}, hidden));
    m.b2 = store.add(name + ".mlp2.bias", init.fan_in_uniform({c}, hidden));
  }
  const std::size_t b4 = config.backbone_widths[3];
  p.scene_w = store.add(prefix + ".scene_proj.weight", init.fan_in_uniform({b4, c}, b4));
  p.scene_b = store.add(prefix + ".scene_proj.bias", init.fan_in_uniform({c}, b4));
  for (std::size_t i = 0; i < 3; ++i) {
    const std::string name = prefix + ".defconv" + std::to_string(i + 2);
    p.fuse[i].conv = init_conv(store, name, c, c, 3, init);
    // Zero offsets: the block starts as a plain 3x3 convolution.
    p.fuse[i].offset = {store.add(name + ".offset.weight", Tensor::zeros({2 * kTaps, c, 3, 3})),
                        store.add(name + ".offset.bias", Tensor::zeros({2 * kTaps}))};
  }
  return p;
}

BackboneFeatures stub_backbone(const Tensor& image, const BackboneParams& params) {
  if (image.dim() != 3 || image.size(0) != 3) {
    throw ShapeError("backbone input must be [3,H,W], got " + to_string(image.shape()));
  }
  if (image.size(1) % 32 != 0 || image.size(2) % 32 != 0 || image.size(1) == 0 || image.size(2) == 0) {
    throw ShapeError("image extent " + to_string(image.shape()) + " is not a positive multiple of 32");
  }
  const Conv2dOptions down{2, 1};
  Tensor x = gelu(conv2d(image, params.stem.weight, params.stem.bias, down));
  BackboneFeatures out;
  for (std::size_t i = 0; i < 4; ++i) {
    x = gelu(conv2d(x, params.stages[i].weight, params.stages[i].bias, down));
    out.maps[i] = x;
  }
  return out;
}

Tensor csm(const Tensor& features, const CsmParams& params, FeatureNorm norm) {
  Tensor projected = conv2d(features, params.proj.weight, params.proj.bias);
  const std::size_t c = projected.size(0), h = projected.size(1), w = projected.size(2);
  if (norm == FeatureNorm::instance) {
    Tensor flat = normalize_rows(reshape(projected, {c, h * w}));
    projected = reshape(flat * params.gamma + params.beta, {c, h, w});
  }
  Tensor context = reshape(global_average(projected), {1, c});
  Tensor omega = linear(relu(linear(context, params.w1, params.b1)), params.w2, params.b2);
  Tensor gate = reshape(sigmoid(omega), {c, 1, 1});
  return projected * gate + projected;
}

Tensor deformable_conv_with_offsets(const Tensor& x, const Tensor& offsets, const ConvParams& conv) {
  if (x.dim() != 3) throw ShapeError("deformable conv input must be [C,H,W]");
  const std::size_t c = x.size(0), h = x.size(1), w = x.size(2), hw = h * w;
  if (offsets.shape() != Shape{2 * kTaps, h, w}) {
    throw ShapeError("offsets must be [18," + std::to_string(h) + "," + std::to_string(w) + "], got " +
                     to_string(offsets.shape()));
  }
  if (conv.weight.shape() != Shape{conv.weight.size(0), c, 3, 3}) {
    throw ShapeError("deformable conv weight must be [C_out," + std::to_string(c) + ",3,3]");
  }
  std::vector<double> base(kTaps * hw * 2);
  for (std::size_t t = 0; t < kTaps; ++t) {
    const double ky = static_cast<double>(t / 3) - 1.0, kx = static_cast<double>(t % 3) - 1.0;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t xx = 0; xx < w; ++xx) {
        const std::size_t p = (t * hw + y * w + xx) * 2;
        base[p] = static_cast<double>(y) + ky;
        base[p + 1] = static_cast<double>(xx) + kx;
      }
    }
  }
  Tensor shift = reshape(permute(reshape(offsets, {kTaps, 2, hw}), {0, 2, 1}), {kTaps * hw, 2});
  Tensor points = shift + Tensor({kTaps * hw, 2}, std::move(base));
  Tensor columns = reshape(bilinear_sample(x, points), {c * kTaps, hw});
  const std::size_t c_out = conv.weight.size(0);
  Tensor out = matmul(reshape(conv.weight, {c_out, c * kTaps}), columns);
  if (conv.bias.defined()) out = out + reshape(conv.bias, {c_out, 1});
  return reshape(out, {c_out, h, w});
}

Tensor deformable_conv(const Tensor& x, const DeformableConvParams& params) {
  Tensor offsets = conv2d(x, params.offset.weight, params.offset.bias, {1, 1});
  return deformable_conv_with_offsets(x, offsets, params.conv);
}

Tensor upsample2x(const Tensor& x, Upsample mode) {
  const std::size_t h = x.size(1) * 2, w = x.size(2) * 2;
  return mode == Upsample::bilinear ? resize_bilinear(x, h, w) : resize_nearest(x, h, w);
}

FeaturePyramid aggregate(const std::array<Tensor, 4>& contextual, const Tensor& raw_coarsest,
                         const PixelDecoderParams& params, Upsample mode) {
  const auto check_extent = [](const Tensor& up, const Tensor& target) {
    if (up.shape() != target.shape()) {
      throw ShapeError("upsampled " + to_string(up.shape()) + " does not match " + to_string(target.shape()));
    }
  };
  FeaturePyramid out;
  const std::size_t c = contextual[3].size(0);
  Tensor scene = linear(reshape(global_average(raw_coarsest), {1, raw_coarsest.size(0)}), params.scene_w,
                        params.scene_b);
  out.maps[3] = deformable_conv(contextual[3] + reshape(scene, {c, 1, 1}), params.fuse[2]);
  for (std::size_t i = 3; i-- > 1;) {
    Tensor up = upsample2x(out.maps[i + 1], mode);
    check_extent(up, contextual[i]);
    out.maps[i] = deformable_conv(contextual[i] + up, params.fuse[i - 1]);
  }
  Tensor up = upsample2x(out.maps[1], mode);
  check_extent(up, contextual[0]);
  out.maps[0] = contextual[0] + up;
  return out;
}

FeaturePyramid pixel_decoder(const BackboneFeatures& features, const PixelDecoderParams& params,
                             const PixelDecoderConfig& config) {
  std::array<Tensor, 4> contextual;
  for (std::size_t i = 0; i < 4; ++i) contextual[i] = csm(features.maps[i], params.csm[i], config.norm);
  return aggregate(contextual, features.maps[3], params, config.upsample);
}

}  // namespace pem
