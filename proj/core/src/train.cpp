#include "pem/train.hpp"

#include <cmath>
#include <random>

#include "pem/ops.hpp"

namespace pem {

namespace {

struct Rect {
  std::size_t class_id;
  std::size_t top, left, bottom, right;  // image pixels, multiples of 4
};

constexpr std::size_t kToySize = 64;
constexpr std::size_t kToyStride = 4;
constexpr std::array<std::array<double, 3>, 4> kClassColor{{
    {0.1, 0.1, 0.1},
    {0.9, 0.2, 0.1},
    {0.1, 0.8, 0.3},
    {0.2, 0.3, 0.9},
}};

Sample render(const std::vector<Rect>& rects, std::mt19937_64& rng) {
  const std::size_t n = kToySize, g = kToySize / kToyStride;
  std::normal_distribution<double> noise(0.0, 0.05);
  std::vector<std::int32_t> cls(g * g, 0), inst(g * g, 0);
  for (std::size_t r = 0; r < rects.size(); ++r) {
    const Rect& rect = rects[r];
    for (std::size_t y = rect.top / kToyStride; y < rect.bottom / kToyStride; ++y) {
      for (std::size_t x = rect.left / kToyStride; x < rect.right / kToyStride; ++x) {
        cls[y * g + x] = static_cast<std::int32_t>(rect.class_id);
        inst[y * g + x] = static_cast<std::int32_t>(r + 1);
      }
    }
  }
  std::vector<double> image(3 * n * n);
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      const auto label = static_cast<std::size_t>(cls[(y / kToyStride) * g + x / kToyStride]);
      for (std::size_t c = 0; c < 3; ++c) image[(c * n + y) * n + x] = kClassColor[label][c] + noise(rng);
    }
  }
  Sample s;
  s.image = Tensor({3, n, n}, std::move(image));
  s.target.height = g;
  s.target.width = g;
  for (std::int32_t id = 0; id <= static_cast<std::int32_t>(rects.size()); ++id) {
    GroundTruthSegment seg;
    seg.class_id = id == 0 ? 0 : rects[static_cast<std::size_t>(id - 1)].class_id;
    seg.mask.resize(g * g);
    for (std::size_t p = 0; p < g * g; ++p) seg.mask[p] = inst[p] == id ? 1.0 : 0.0;
    s.target.segments.push_back(std::move(seg));
  }
  s.labels = {g, g, std::move(cls), std::move(inst)};
  return s;
}

}  // namespace

Adam::Adam(ParameterStore& params, AdamConfig config) : params_(&params), config_(config) {
  for (const auto& p : params.all()) {
    m_.emplace_back(p.tensor.numel(), 0.0);
    v_.emplace_back(p.tensor.numel(), 0.0);
  }
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  const auto params = params_->all();
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor t = params[i].tensor;
    if (!t.has_grad()) continue;
    const auto g = t.grad();
    auto w = t.mutable_values();
    for (std::size_t j = 0; j < w.size(); ++j) {
      m_[i][j] = config_.beta1 * m_[i][j] + (1.0 - config_.beta1) * g[j];
      v_[i][j] = config_.beta2 * v_[i][j] + (1.0 - config_.beta2) * g[j] * g[j];
      w[j] -= config_.lr * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + config_.eps);
    }
  }
  params_->zero_grad();
}

std::vector<Sample> make_toy_dataset(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Sample> data;
  data.push_back(render({{1, 8, 8, 32, 36}, {2, 36, 28, 60, 56}}, rng));
  data.push_back(render({{1, 4, 36, 24, 60}, {2, 28, 4, 52, 28}, {3, 40, 40, 60, 60}}, rng));
  return data;
}

ModelConfig toy_model_config() {
  ModelConfig c;
  c.decoder.stages = 2;
  c.decoder.queries = 8;
  c.decoder.channels = 32;
  c.decoder.heads = 4;
  c.decoder.ffn_expansion = 8;
  c.pixel.pixel_channels = 32;
  c.pixel.backbone_widths = {16, 32, 32, 64};
  c.num_classes = 4;
  c.stuff_classes = {0};
  c.seed = 1;
  return c;
}

TrainingDiverged::TrainingDiverged(std::size_t step, const std::string& what)
    : std::runtime_error("training diverged at step " + std::to_string(step) + ": " + what), step_(step) {}

double evaluate_loss(const Model& model, std::span<const Sample> data, std::vector<LayerLoss>* layers) {
  NoGradGuard no_grad;
  double total = 0;
  if (layers) layers->clear();
  for (const Sample& s : data) {
    const ForwardResult fwd = model.forward(s.image);
    const LossResult loss = total_loss(fwd.predictions, s.target, model.config().loss);
    total += loss.total.item();
    if (layers) {
      if (layers->empty()) layers->resize(loss.layers.size());
      for (std::size_t l = 0; l < loss.layers.size(); ++l) {
        auto& acc = (*layers)[l];
        acc.cls += loss.layers[l].cls;
        acc.mask_bce += loss.layers[l].mask_bce;
        acc.dice += loss.layers[l].dice;
        acc.total += loss.layers[l].total;
        acc.supervised = loss.layers[l].supervised;
      }
    }
  }
  return total;
}

TrainResult train_toy(Model& model, std::span<const Sample> data, std::size_t steps, const AdamConfig& optimizer,
                      const StepCallback& on_step) {
  Adam adam(model.parameters(), optimizer);
  model.parameters().zero_grad();
  TrainResult result;
  for (std::size_t step = 0; step < steps; ++step) {
    TrainStep record;
    record.step = step;
    try {
      for (const Sample& s : data) {
        const ForwardResult fwd = model.forward(s.image);
        const LossResult loss = total_loss(fwd.predictions, s.target, model.config().loss);
        backward(loss.total);
        record.total += loss.total.item();
        if (record.layers.empty()) record.layers.resize(loss.layers.size());
        for (std::size_t l = 0; l < loss.layers.size(); ++l) {
          record.layers[l].cls += loss.layers[l].cls;
          record.layers[l].mask_bce += loss.layers[l].mask_bce;
          record.layers[l].dice += loss.layers[l].dice;
          record.layers[l].total += loss.layers[l].total;
          record.layers[l].supervised = loss.layers[l].supervised;
        }
      }
    } catch (const NumericError& e) {
      throw TrainingDiverged(step, e.what());
    }
    if (!std::isfinite(record.total)) throw TrainingDiverged(step, "non-finite loss");
    adam.step();
    if (on_step) on_step(record);
    result.steps.push_back(std::move(record));
  }
  try {
    result.final_loss = evaluate_loss(model, data);
  } catch (const NumericError& e) {
    throw TrainingDiverged(steps, e.what());
  }
  return result;
}

}  // namespace pem
