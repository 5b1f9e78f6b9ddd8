#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pem/config.hpp"
#include "pem/pemca.hpp"

namespace pem {

struct Sample;
class Model;

inline constexpr std::string_view kFlopConvention = "2 per multiply-add, 1 per elementwise op, 0 per comparison";

struct FlopTerm {
  std::string name;
  std::uint64_t flops = 0;
  bool hw_dependent = false;
};

struct FlopBreakdown {
  std::vector<FlopTerm> terms;

  std::uint64_t total() const;
  std::uint64_t hw_dependent() const;
  std::uint64_t term(std::string_view name) const;  // 0 when absent
};

struct AttentionShape {
  std::size_t tokens = 0;    // HW
  std::size_t queries = 0;   // N
  std::size_t channels = 0;  // C
  std::size_t feature_channels = 0;
  std::size_t proj_dim = 0;  // D
  std::size_t heads = 1;
};

// Closed-form cost of one cross-attention call, itemized.
FlopBreakdown count_flops(AttentionVariant variant, const AttentionShape& shape);

// Bytes live at the peak of one kernel call, inputs included.
std::uint64_t peak_bytes_estimate(AttentionVariant variant, const AttentionShape& shape, std::size_t scalar_bytes);

enum class Precision { f32, f64 };
std::string_view to_string(Precision p);
Precision parse_precision(std::string_view name);

struct BenchSpec {
  std::vector<AttentionVariant> variants{AttentionVariant::pemca, AttentionVariant::masked_ca};
  std::vector<std::size_t> token_counts{2048, 8192, 32768, 131072};
  std::size_t queries = 100;
  std::size_t channels = 256;
  std::size_t proj_dim = 256;
  std::size_t heads = 8;
  std::size_t repetitions = 10;
  std::size_t warmup = 3;
  Precision precision = Precision::f32;
  std::uint64_t seed = 0;
  double mask_density = 0.25;
  double min_sample_seconds = 2e-3;  // shorter samples repeat the call

  void validate() const;
  std::string canonical() const;
};

struct TimingStats {
  std::vector<double> samples;  // seconds per call
  std::size_t inner_iterations = 1;
  double median = 0;
  double q1 = 0;
  double q3 = 0;
  double min = 0;
  double max = 0;

  double iqr() const { return q3 - q1; }
};

TimingStats summarize(std::vector<double> samples, std::size_t inner_iterations);

// Times fn(): `warmup` untimed calls, then `reps` samples. A sample repeats
// fn() enough times to last min_sample_seconds.
TimingStats time_call(const std::function<void()>& fn, std::size_t warmup, std::size_t reps,
                      double min_sample_seconds);

struct BenchResult {
  AttentionVariant variant;
  std::size_t tokens = 0;
  TimingStats timing;
  FlopBreakdown flops;
  std::uint64_t peak_bytes = 0;
};

// Variants at one token count are timed interleaved, one sample each per round.
std::vector<BenchResult> measure_latency(const BenchSpec& spec);

// Median speedup of `fast` over `slow` at every token count.
std::vector<double> speedups(std::span<const BenchResult> results, AttentionVariant slow, AttentionVariant fast);

struct Report {
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;
};

enum class ReportFormat { csv, markdown };
ReportFormat parse_report_format(std::string_view name);

std::string render_report(const Report& report, ReportFormat format);
void emit_report(const Report& report, ReportFormat format, const std::filesystem::path& path);
Report parse_csv(std::string_view text);
std::string format_double(double v);

Report bench_report(const BenchSpec& spec, std::span<const BenchResult> results);
Report flops_report(std::span<const AttentionVariant> variants, std::span<const AttentionShape> shapes);

struct LayerSweepRow {
  std::size_t depth = 0;
  double loss = 0;  // loss of the last prediction alone
  double miou = 0;  // semantic readout of the last prediction
  TimingStats timing;
};

std::vector<LayerSweepRow> sweep_decoder_layers(const Model& model, std::span<const Sample> data,
                                                std::size_t reps, std::size_t warmup);

struct QuerySweepRow {
  std::size_t queries = 0;
  double loss = 0;
  double miou = 0;
  std::uint64_t flops = 0;
};

// Decoder cost of one forward on an image of the given size: attention,
// self-attention, FFN and prediction heads of every layer.
std::uint64_t decoder_flops(const ModelConfig& config, std::size_t image_h, std::size_t image_w);

std::vector<QuerySweepRow> sweep_queries(const ModelConfig& base, std::span<const Sample> data,
                                         std::span<const std::size_t> query_counts, std::size_t train_steps);

Report layer_sweep_report(const ModelConfig& config, std::span<const LayerSweepRow> rows);
Report query_sweep_report(const ModelConfig& config, std::span<const QuerySweepRow> rows);

}  // namespace pem
