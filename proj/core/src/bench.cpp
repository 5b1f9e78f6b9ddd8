#include "pem/bench.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

#include "pem/attention_kernels.hpp"
#include "pem/decoder.hpp"
#include "pem/inference.hpp"
#include "pem/losses.hpp"
#include "pem/metrics.hpp"
#include "pem/train.hpp"

namespace pem {

namespace {

using u64 = std::uint64_t;

// Selection tile of the streaming prototype kernel.
constexpr u64 kSelectionTile = 512;

double quantile(const std::vector<double>& sorted, double p) {
  if (sorted.empty()) return 0.0;
  const double pos = p * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

std::string csv_escape(const std::string& field) {
  if (field.find_first_of(",\"\n") == std::string::npos) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

template <typename S>
std::vector<BenchResult> measure_typed(const BenchSpec& spec) {
  using kernels::Mat;
  std::vector<BenchResult> results;
  for (std::size_t hw : spec.token_counts) {
    std::mt19937_64 rng(spec.seed ^ (0x9e3779b97f4a7c15ULL * (hw + 1)));
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    const auto fill = [&](std::size_t rows, std::size_t cols) {
      Mat<S> m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(unit(rng));
      return m;
    };
    const Mat<S> queries = fill(spec.queries, spec.channels);
    const Mat<S> features = fill(hw, spec.channels);
    std::bernoulli_distribution fg(spec.mask_density);
    std::vector<std::uint8_t> bits(spec.queries * hw);
    for (auto& b : bits) b = fg(rng) ? 1 : 0;
    const auto mask = kernels::KernelMask<S>::from(AttentionMask(hw, spec.queries, std::move(bits)));

    struct Runner {
      AttentionVariant variant;
      kernels::Weights<S> weights;
      kernels::Workspace<S> workspace;
      std::size_t inner = 1;
      std::vector<double> samples;
    };
    std::vector<Runner> runners;
    for (AttentionVariant v : spec.variants) {
      PemcaConfig config;
      config.channels = config.feature_channels = spec.channels;
      config.proj_dim = spec.proj_dim;
      config.heads = spec.heads;
      config.variant = v;
      runners.push_back({v, kernels::random_weights<S>(config, rng), {}, 1, {}});
    }
    const auto call = [&](Runner& r) {
      kernels::run_attention(r.variant, queries, features, mask, r.weights, r.workspace);
    };
    for (auto& r : runners) {
      for (std::size_t i = 0; i < spec.warmup; ++i) call(r);
      const auto start = std::chrono::steady_clock::now();
      call(r);
      const double once = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      if (once < spec.min_sample_seconds) {
        r.inner = static_cast<std::size_t>(std::ceil(spec.min_sample_seconds / std::max(once, 1e-9)));
      }
    }
    for (std::size_t rep = 0; rep < spec.repetitions; ++rep) {
      for (auto& r : runners) {
        const auto start = std::chrono::steady_clock::now();
        for (std::size_t i = 0; i < r.inner; ++i) call(r);
        const double total = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        r.samples.push_back(total / static_cast<double>(r.inner));
      }
    }
    const AttentionShape shape{hw, spec.queries, spec.channels, spec.channels, spec.proj_dim, spec.heads};
    for (auto& r : runners) {
      results.push_back({r.variant, hw, summarize(std::move(r.samples), r.inner), count_flops(r.variant, shape),
                         peak_bytes_estimate(r.variant, shape, sizeof(S))});
    }
  }
  return results;
}

}  // namespace

std::uint64_t FlopBreakdown::total() const {
  u64 t = 0;
  for (const auto& term : terms) t += term.flops;
  return t;
}

std::uint64_t FlopBreakdown::hw_dependent() const {
  u64 t = 0;
  for (const auto& term : terms) t += term.hw_dependent ? term.flops : 0;
  return t;
}

std::uint64_t FlopBreakdown::term(std::string_view name) const {
  for (const auto& t : terms) {
    if (t.name == name) return t.flops;
  }
  return 0;
}

FlopBreakdown count_flops(AttentionVariant variant, const AttentionShape& s) {
  if (s.tokens == 0 || s.queries == 0 || s.channels == 0 || s.feature_channels == 0 || s.proj_dim == 0 ||
      s.heads == 0) {
    throw std::invalid_argument("count_flops needs positive dimensions");
  }
  const u64 hw = s.tokens, n = s.queries, c = s.channels, cf = s.feature_channels, d = s.proj_dim, h = s.heads;
  const u64 mask_add = uses_mask(variant) ? h * n * hw : 0;
  FlopBreakdown b;
  b.terms.push_back({"q_proj", 2 * n * c * d, false});
  b.terms.push_back({"k_proj", 2 * hw * cf * d, true});
  if (is_softmax_attention(variant)) {
    b.terms.push_back({"v_proj", 2 * hw * cf * d, true});
    b.terms.push_back({"similarity", 2 * n * hw * d + mask_add, true});
    // Subtract the row max, exponentiate, accumulate, divide.
    b.terms.push_back({"softmax", 4 * h * n * hw, true});
    b.terms.push_back({"attn_v", 2 * n * hw * d, true});
  } else {
    if (uses_prototypes(variant)) {
      b.terms.push_back({"similarity", 2 * n * hw * d + mask_add, true});
      b.terms.push_back({"selection", 0, false});
    } else {
      b.terms.push_back({"aggregation", 2 * n * hw * d, true});
    }
    b.terms.push_back({"modulation", n * d + 2 * n * d * d, false});
    // Square, sum, divide, scale by alpha, add K_p per element; eps and sqrt per row.
    b.terms.push_back({"normalization", 5 * n * d + 2 * n, false});
  }
  b.terms.push_back({"out_proj", 2 * n * d * c, false});
  b.terms.push_back({"residual", n * c, false});
  return b;
}

std::uint64_t peak_bytes_estimate(AttentionVariant variant, const AttentionShape& s, std::size_t scalar_bytes) {
  const u64 hw = s.tokens, n = s.queries, c = s.channels, cf = s.feature_channels, d = s.proj_dim;
  u64 elements = n * c + hw * cf + 2 * n * d + n * c;  // inputs, Q, output
  if (uses_mask(variant)) elements += n * hw;
  if (is_softmax_attention(variant)) {
    elements += 2 * hw * d + n * hw;  // K, V, one head of scores
  } else if (uses_prototypes(variant)) {
    const u64 tile = std::min(hw, kSelectionTile);
    elements += tile * d + n * tile + 2 * n * d;
  } else {
    elements += hw * d + n * hw + 2 * n * d;
  }
  return elements * scalar_bytes;
}

std::string_view to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

Precision parse_precision(std::string_view name) {
  if (name == "f32") return Precision::f32;
  if (name == "f64") return Precision::f64;
  throw std::invalid_argument("unknown precision: " + std::string(name));
}

void BenchSpec::validate() const {
  if (variants.empty()) throw std::invalid_argument("bench spec lists no variants");
  if (token_counts.empty()) throw std::invalid_argument("bench spec lists no token counts");
  if (!std::is_sorted(token_counts.begin(), token_counts.end())) {
    throw std::invalid_argument("token counts must be sorted ascending");
  }
  if (repetitions < 10) throw std::invalid_argument("repetitions must be at least 10");
  if (warmup < 3) throw std::invalid_argument("warmup must be at least 3");
  if (queries == 0 || channels == 0 || proj_dim == 0 || heads == 0 || proj_dim % heads != 0) {
    throw std::invalid_argument("bench dimensions must be positive with D divisible by heads");
  }
  if (!(mask_density > 0.0 && mask_density <= 1.0)) throw std::invalid_argument("mask density must lie in (0,1]");
}

std::string BenchSpec::canonical() const {
  std::ostringstream out;
  out << "variants=";
  for (auto v : variants) out << to_string(v) << ';';
  out << " hw=";
  for (auto t : token_counts) out << t << ';';
  out << " N=" << queries << " C=" << channels << " D=" << proj_dim << " h=" << heads << " reps=" << repetitions
      << " warmup=" << warmup << " precision=" << to_string(precision) << " seed=" << seed
      << " density=" << format_double(mask_density);
  return out.str();
}

TimingStats summarize(std::vector<double> samples, std::size_t inner_iterations) {
  TimingStats t;
  t.inner_iterations = inner_iterations;
  t.samples = samples;
  std::sort(samples.begin(), samples.end());
  if (!samples.empty()) {
    t.median = quantile(samples, 0.5);
    t.q1 = quantile(samples, 0.25);
    t.q3 = quantile(samples, 0.75);
    t.min = samples.front();
    t.max = samples.back();
  }
  return t;
}

TimingStats time_call(const std::function<void()>& fn, std::size_t warmup, std::size_t reps,
                      double min_sample_seconds) {
  using clock = std::chrono::steady_clock;
  for (std::size_t i = 0; i < warmup; ++i) fn();
  auto start = clock::now();
  fn();
  const double once = std::chrono::duration<double>(clock::now() - start).count();
  std::size_t inner = 1;
  if (once < min_sample_seconds) inner = static_cast<std::size_t>(std::ceil(min_sample_seconds / std::max(once, 1e-9)));
  std::vector<double> samples;
  for (std::size_t r = 0; r < reps; ++r) {
    start = clock::now();
    for (std::size_t i = 0; i < inner; ++i) fn();
    samples.push_back(std::chrono::duration<double>(clock::now() - start).count() / static_cast<double>(inner));
  }
  return summarize(std::move(samples), inner);
}

std::vector<BenchResult> measure_latency(const BenchSpec& spec) {
  spec.validate();
  return spec.precision == Precision::f32 ? measure_typed<float>(spec) : measure_typed<double>(spec);
}

std::vector<double> speedups(std::span<const BenchResult> results, AttentionVariant slow, AttentionVariant fast) {
  std::vector<double> out;
  for (const auto& a : results) {
    if (a.variant != slow) continue;
    for (const auto& b : results) {
      if (b.variant == fast && b.tokens == a.tokens) out.push_back(a.timing.median / b.timing.median);
    }
  }
  return out;
}

ReportFormat parse_report_format(std::string_view name) {
  if (name == "csv") return ReportFormat::csv;
  if (name == "markdown" || name == "md") return ReportFormat::markdown;
  throw std::invalid_argument("unknown report format: " + std::string(name));
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string render_report(const Report& report, ReportFormat format) {
  std::string out;
  const auto line = [&](const std::vector<std::string>& fields) {
    if (format == ReportFormat::csv) {
      for (std::size_t i = 0; i < fields.size(); ++i) out += (i ? "," : "") + csv_escape(fields[i]);
    } else {
      out += "|";
      for (const auto& f : fields) out += " " + f + " |";
    }
    out += "\n";
  };
  line(report.columns);
  if (format == ReportFormat::markdown) line(std::vector<std::string>(report.columns.size(), "---"));
  for (const auto& row : report.rows) {
    if (row.size() != report.columns.size()) throw std::invalid_argument("report row width differs from header");
    line(row);
  }
  return out;
}

void emit_report(const Report& report, ReportFormat format, const std::filesystem::path& path) {
  const std::string text = render_report(report, format);
  std::ofstream file(path, std::ios::trunc);
  if (!file) throw std::runtime_error("cannot write report: " + path.string());
  file << text;
  if (!file) throw std::runtime_error("write failed: " + path.string());
}

Report parse_csv(std::string_view text) {
  std::vector<std::vector<std::string>> lines;
  std::vector<std::string> fields;
  std::string field;
  bool quoted = false, any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    any = true;
    if (quoted) {
      if (c == '"' && i + 1 < text.size() && text[i + 1] == '"') {
        field += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        field += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(field));
      field.clear();
    } else if (c == '\n') {
      fields.push_back(std::move(field));
      field.clear();
      lines.push_back(std::move(fields));
      fields.clear();
      any = false;
    } else if (c != '\r') {
      field += c;
    }
  }
  if (quoted) throw std::invalid_argument("unterminated quoted CSV field");
  if (any) {
    fields.push_back(std::move(field));
    lines.push_back(std::move(fields));
  }
  Report r;
  if (lines.empty()) return r;
  r.columns = std::move(lines.front());
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].size() != r.columns.size()) throw std::invalid_argument("CSV row width differs from header");
    r.rows.push_back(std::move(lines[i]));
  }
  return r;
}

Report bench_report(const BenchSpec& spec, std::span<const BenchResult> results) {
  Report r;
  r.columns = {"config_hash", "seed", "precision", "threads", "flop_convention", "mask_density", "variant", "hw",
               "n", "c", "d", "heads", "reps", "warmup", "inner_iterations", "median_ms", "iqr_ms", "min_ms",
               "max_ms", "flops", "peak_bytes"};
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  for (unsigned char ch : spec.canonical()) hash = (hash ^ ch) * 0x100000001b3ULL;
  for (const auto& res : results) {
    r.rows.push_back({hex_hash(hash), std::to_string(spec.seed), std::string(to_string(spec.precision)),
                      std::to_string(Eigen::nbThreads()), std::string(kFlopConvention),
                      format_double(spec.mask_density), std::string(to_string(res.variant)),
                      std::to_string(res.tokens), std::to_string(spec.queries), std::to_string(spec.channels),
                      std::to_string(spec.proj_dim), std::to_string(spec.heads), std::to_string(spec.repetitions),
                      std::to_string(spec.warmup), std::to_string(res.timing.inner_iterations),
                      format_double(res.timing.median * 1e3), format_double(res.timing.iqr() * 1e3),
                      format_double(res.timing.min * 1e3), format_double(res.timing.max * 1e3),
                      std::to_string(res.flops.total()), std::to_string(res.peak_bytes)});
  }
  return r;
}

Report flops_report(std::span<const AttentionVariant> variants, std::span<const AttentionShape> shapes) {
  Report r;
  r.columns = {"flop_convention", "variant", "hw", "n", "c", "d", "heads", "term", "flops", "hw_dependent"};
  for (const auto& shape : shapes) {
    for (AttentionVariant v : variants) {
      const FlopBreakdown b = count_flops(v, shape);
      auto row = [&](const std::string& term, u64 flops, const std::string& dep) {
        r.rows.push_back({std::string(kFlopConvention), std::string(to_string(v)), std::to_string(shape.tokens),
                          std::to_string(shape.queries), std::to_string(shape.channels),
                          std::to_string(shape.proj_dim), std::to_string(shape.heads), term, std::to_string(flops),
                          dep});
      };
      for (const auto& t : b.terms) row(t.name, t.flops, t.hw_dependent ? "yes" : "no");
      row("total", b.total(), "");
    }
  }
  return r;
}

std::uint64_t decoder_flops(const ModelConfig& config, std::size_t image_h, std::size_t image_w) {
  const u64 n = config.decoder.queries, c = config.decoder.channels, h = config.decoder.heads;
  const u64 hidden = c * config.decoder.ffn_expansion, c_px = config.pixel.pixel_channels;
  const u64 k1 = config.num_classes + 1;
  const u64 finest = (image_h / kPyramidStrides[0]) * (image_w / kPyramidStrides[0]);
  const u64 layer_norm = 8 * n * c;
  const u64 predict = layer_norm + 2 * n * c * c + n * c + 2 * n * c * c_px + 2 * n * c * k1 + 2 * n * c_px * finest;
  u64 total = predict;
  for (std::size_t l = 0; l < config.decoder.layers(); ++l) {
    const std::size_t stride = kPyramidStrides[Model::scale_for_layer(l)];
    const AttentionShape shape{(image_h / stride) * (image_w / stride), n, c, c_px, config.decoder.attention_dim(),
                               config.decoder.heads};
    total += layer_norm + count_flops(config.decoder.variant, shape).total();
    total += layer_norm + 4 * 2 * n * c * c + 2 * 2 * n * n * c + 4 * h * n * n + n * c;
    total += layer_norm + 2 * 2 * n * c * hidden + 2 * n * hidden + 2 * n * c;
    total += predict;
  }
  return total;
}

std::vector<LayerSweepRow> sweep_decoder_layers(const Model& model, std::span<const Sample> data, std::size_t reps,
                                                std::size_t warmup) {
  NoGradGuard no_grad;
  const ModelConfig& config = model.config();
  LossConfig single = config.loss;
  single.supervise_bootstrap = true;
  std::vector<LayerSweepRow> rows;
  for (std::size_t depth = 0; depth <= model.num_layers(); ++depth) {
    LayerSweepRow row;
    row.depth = depth;
    ForwardOptions options;
    options.max_layers = depth;
    for (const Sample& s : data) {
      const ForwardResult fwd = model.forward(s.image, options);
      const MaskPrediction& last = fwd.predictions.back();
      row.loss += total_loss(std::span(&last, 1), s.target, single).total.item();
      row.miou += miou(semantic_inference(last, config.loss.classification), s.labels, config.num_classes).miou;
    }
    row.miou /= static_cast<double>(std::max<std::size_t>(1, data.size()));
    row.timing = time_call(
        [&] {
          for (const Sample& s : data) model.forward(s.image, options);
        },
        warmup, reps, 0.0);
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<QuerySweepRow> sweep_queries(const ModelConfig& base, std::span<const Sample> data,
                                         std::span<const std::size_t> query_counts, std::size_t train_steps) {
  std::vector<QuerySweepRow> rows;
  for (std::size_t n : query_counts) {
    ModelConfig config = base;
    config.decoder.queries = n;
    Model model(config);
    if (train_steps > 0) train_toy(model, data, train_steps, AdamConfig{});
    QuerySweepRow row;
    row.queries = n;
    row.loss = evaluate_loss(model, data);
    NoGradGuard no_grad;
    for (const Sample& s : data) {
      const ForwardResult fwd = model.forward(s.image);
      row.miou += miou(semantic_inference(fwd.predictions.back(), config.loss.classification), s.labels,
                       config.num_classes)
                      .miou;
    }
    row.miou /= static_cast<double>(std::max<std::size_t>(1, data.size()));
    const std::size_t h = data.empty() ? 64 : data.front().image.size(1);
    const std::size_t w = data.empty() ? 64 : data.front().image.size(2);
    row.flops = decoder_flops(config, h, w);
    rows.push_back(row);
  }
  return rows;
}

Report layer_sweep_report(const ModelConfig& config, std::span<const LayerSweepRow> rows) {
  Report r;
  r.columns = {"config_hash", "seed", "precision", "threads", "depth", "loss", "miou", "median_ms", "iqr_ms",
               "inner_iterations"};
  for (const auto& row : rows) {
    r.rows.push_back({hex_hash(config_hash(config)), std::to_string(config.seed), "f64",
                      std::to_string(Eigen::nbThreads()), std::to_string(row.depth), format_double(row.loss),
                      format_double(row.miou), format_double(row.timing.median * 1e3),
                      format_double(row.timing.iqr() * 1e3), std::to_string(row.timing.inner_iterations)});
  }
  return r;
}

Report query_sweep_report(const ModelConfig& config, std::span<const QuerySweepRow> rows) {
  Report r;
  r.columns = {"config_hash", "seed", "precision", "threads", "flop_convention", "queries", "loss", "miou",
               "decoder_flops"};
  for (const auto& row : rows) {
    r.rows.push_back({hex_hash(config_hash(config)), std::to_string(config.seed), "f64",
                      std::to_string(Eigen::nbThreads()), std::string(kFlopConvention), std::to_string(row.queries),
                      format_double(row.loss), format_double(row.miou), std::to_string(row.flops)});
  }
  return r;
}

}  // namespace pem
