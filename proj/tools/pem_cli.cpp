// pem: benchmark, sweep, training and inference entry point.
//
// Exit codes: 0 success, 1 usage or runtime error, 2 a gate failed.

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "pem/bench.hpp"
#include "pem/config.hpp"
#include "pem/decoder.hpp"
#include "pem/inference.hpp"
#include "pem/losses.hpp"
#include "pem/metrics.hpp"
#include "pem/ops.hpp"
#include "pem/pixel_decoder.hpp"
#include "pem/tensor_io.hpp"
#include "pem/train.hpp"

namespace {

using nlohmann::json;

constexpr int kGateFailed = 2;

struct Common {
  std::string config;
  std::string out;
  std::string format = "csv";
  std::optional<std::uint64_t> seed;
  std::string precision = "f32";
  std::size_t reps = 10;
};

pem::ModelConfig model_config(const Common& common, pem::ModelConfig fallback) {
  pem::ModelConfig config = common.config.empty() ? std::move(fallback) : pem::load_model_config(common.config);
  if (common.seed) config.seed = *common.seed;
  config.validate();
  return config;
}

void write_report(const pem::Report& report, const Common& common) {
  const auto fmt = pem::parse_report_format(common.format);
  if (common.out.empty()) {
    std::cout << pem::render_report(report, fmt);
  } else {
    pem::emit_report(report, fmt, common.out);
  }
}

int gate(bool ok, const std::string& what) {
  std::cerr << (ok ? "PASS " : "FAIL ") << what << '\n';
  return ok ? 0 : kGateFailed;
}

std::vector<pem::AttentionVariant> parse_variants(const std::vector<std::string>& names) {
  std::vector<pem::AttentionVariant> out;
  for (const auto& n : names) out.push_back(pem::parse_variant(n));
  return out;
}

std::vector<pem::Tensor> labels_to_tensors(const pem::LabelMap& map) {
  const pem::Shape shape{map.height, map.width};
  std::vector<double> classes(map.classes.begin(), map.classes.end());
  std::vector<pem::Tensor> out{pem::Tensor(shape, std::move(classes))};
  if (!map.instances.empty()) {
    out.emplace_back(shape, std::vector<double>(map.instances.begin(), map.instances.end()));
  }
  return out;
}

pem::LabelMap tensors_to_labels(const std::vector<pem::NamedTensor>& file) {
  const pem::Tensor& classes = pem::find_tensor(file, "classes");
  if (classes.dim() != 2) throw pem::FormatError("'classes' must be [H, W]");
  pem::LabelMap map;
  map.height = classes.size(0);
  map.width = classes.size(1);
  const auto to_int = [](double v) {
    if (v != std::floor(v)) throw pem::FormatError("label maps must hold integers");
    return static_cast<std::int32_t>(v);
  };
  for (double v : classes.values()) map.classes.push_back(to_int(v));
  for (const auto& t : file) {
    if (t.name != "instances") continue;
    if (t.tensor.shape() != classes.shape()) throw pem::FormatError("'instances' shape differs from 'classes'");
    for (double v : t.tensor.values()) map.instances.push_back(to_int(v));
  }
  return map;
}

// --- subcommands ----------------------------------------------------------

int bench_attention(const Common& common, const std::vector<std::string>& variant_names,
                    const std::vector<std::size_t>& hw, std::size_t n, std::size_t c, std::size_t d,
                    std::size_t heads, std::size_t warmup) {
  pem::BenchSpec spec;
  spec.variants = parse_variants(variant_names);
  spec.token_counts = hw;
  spec.queries = n;
  spec.channels = c;
  spec.proj_dim = d;
  spec.heads = heads;
  spec.repetitions = common.reps;
  spec.warmup = warmup;
  spec.precision = pem::parse_precision(common.precision);
  spec.seed = common.seed.value_or(0);
  const auto results = pem::measure_latency(spec);
  write_report(pem::bench_report(spec, results), common);

  const bool compared = std::count(spec.variants.begin(), spec.variants.end(), pem::AttentionVariant::pemca) &&
                        std::count(spec.variants.begin(), spec.variants.end(), pem::AttentionVariant::masked_ca);
  if (!compared) return 0;
  const auto ratio = pem::speedups(results, pem::AttentionVariant::masked_ca, pem::AttentionVariant::pemca);
  std::ostringstream line;
  line << "speedup pemca over masked_ca:";
  for (double r : ratio) line << ' ' << r;
  std::cerr << line.str() << '\n';
  int status = gate(std::is_sorted(ratio.begin(), ratio.end()), "speedup non-decreasing in HW");
  return std::max(status, gate(!ratio.empty() && ratio.back() >= 1.5, "speedup >= 1.5 at the largest HW"));
}

int flops(const Common& common, const std::vector<std::string>& variant_names, const std::vector<std::size_t>& hw,
          std::size_t n, std::size_t c, std::size_t d, std::size_t heads) {
  const auto variants = parse_variants(variant_names);
  std::vector<pem::AttentionShape> shapes;
  for (std::size_t t : hw) shapes.push_back({t, n, c, c, d, heads});
  write_report(pem::flops_report(variants, shapes), common);
  int status = 0;
  for (const auto& s : shapes) {
    if (s.tokens <= s.queries) continue;
    const auto pem_hw = pem::count_flops(pem::AttentionVariant::pemca, s).hw_dependent();
    const auto ca_hw = pem::count_flops(pem::AttentionVariant::masked_ca, s).hw_dependent();
    status = std::max(status, gate(pem_hw < ca_hw, "HW-dependent FLOPs below masked CA at HW=" +
                                                       std::to_string(s.tokens)));
  }
  return status;
}

int sweep_layers(const Common& common, const std::string& checkpoint, std::size_t warmup) {
  pem::Model model(model_config(common, pem::toy_model_config()));
  if (!checkpoint.empty()) pem::load_checkpoint(checkpoint, model.parameters());
  const auto data = pem::make_toy_dataset();
  const auto rows = pem::sweep_decoder_layers(model, data, common.reps, warmup);
  write_report(pem::layer_sweep_report(model.config(), rows), common);
  bool increasing = true;
  for (std::size_t i = 1; i < rows.size(); ++i) increasing &= rows[i].timing.median > rows[i - 1].timing.median;
  return gate(increasing, "median latency strictly increases with depth");
}

int sweep_queries(const Common& common, const std::vector<std::size_t>& counts, std::size_t steps) {
  const pem::ModelConfig base = model_config(common, pem::toy_model_config());
  const auto data = pem::make_toy_dataset();
  const auto rows = pem::sweep_queries(base, data, counts, steps);
  write_report(pem::query_sweep_report(base, rows), common);
  bool increasing = true;
  for (std::size_t i = 1; i < rows.size(); ++i) increasing &= rows[i].flops > rows[i - 1].flops;
  if (!std::is_sorted(counts.begin(), counts.end())) return 0;
  return gate(increasing, "decoder FLOPs increase with N");
}

int train_toy(const Common& common, std::size_t steps, double lr, const std::string& checkpoint_out) {
  pem::Model model(model_config(common, pem::toy_model_config()));
  const auto data = pem::make_toy_dataset();
  pem::Report report;
  report.columns = {"step", "total"};
  for (std::size_t l = 0; l <= model.num_layers(); ++l) report.columns.push_back("layer" + std::to_string(l));
  pem::AdamConfig adam;
  adam.lr = lr;
  const auto result = pem::train_toy(model, data, steps, adam, [&](const pem::TrainStep& s) {
    std::vector<std::string> row{std::to_string(s.step), pem::format_double(s.total)};
    for (const auto& layer : s.layers) row.push_back(pem::format_double(layer.total));
    report.rows.push_back(std::move(row));
  });
  write_report(report, common);
  if (!checkpoint_out.empty()) pem::save_checkpoint(checkpoint_out, model.parameters());

  double mean_miou = 0;
  {
    pem::NoGradGuard no_grad;
    for (const auto& s : data) {
      const auto fwd = model.forward(s.image);
      mean_miou += pem::miou(pem::semantic_inference(fwd.predictions.back(), model.config().loss.classification),
                             s.labels, model.config().num_classes)
                       .miou;
    }
  }
  mean_miou /= static_cast<double>(data.size());
  const double initial = result.steps.empty() ? result.final_loss : result.steps.front().total;
  std::cerr << "initial loss " << initial << ", final loss " << result.final_loss << ", mIoU " << mean_miou << '\n';
  int status = gate(result.final_loss < 0.1 * initial, "final loss below 10% of initial");
  return std::max(status, gate(mean_miou >= 0.9, "training-image mIoU >= 0.9"));
}

int forward(const Common& common, const std::string& checkpoint, const std::string& image_path) {
  pem::Model model(model_config(common, pem::toy_model_config()));
  if (!checkpoint.empty()) pem::load_checkpoint(checkpoint, model.parameters());
  const pem::Tensor image = pem::find_tensor(pem::load_tensors(image_path), "image");
  pem::NoGradGuard no_grad;
  const auto fwd = model.forward(image);
  const auto& cfg = model.config();

  std::vector<pem::NamedTensor> out;
  for (std::size_t i = 0; i < fwd.predictions.size(); ++i) {
    out.push_back({"mask_logits." + std::to_string(i), fwd.predictions[i].mask_logits});
    out.push_back({"class_logits." + std::to_string(i), fwd.predictions[i].class_logits});
  }
  const auto& last = fwd.predictions.back();
  const auto semantic = pem::semantic_inference(last, cfg.loss.classification);
  const auto panoptic = pem::panoptic_inference(last, cfg.thresholds, cfg.thing_mask(), cfg.loss.classification);
  out.push_back({"semantic", labels_to_tensors(semantic)[0]});
  const auto pan = labels_to_tensors(panoptic.map);
  out.push_back({"panoptic.classes", pan[0]});
  if (pan.size() > 1) out.push_back({"panoptic.instances", pan[1]});
  if (!common.out.empty()) pem::save_tensors(common.out, out);

  json summary{{"config_hash", pem::hex_hash(pem::config_hash(cfg))},
               {"predictions", fwd.predictions.size()},
               {"mask_shape", {last.queries(), last.height(), last.width()}},
               {"segments", json::array()}};
  for (const auto& s : panoptic.segments) {
    summary["segments"].push_back(
        {{"id", s.id}, {"class", s.class_id}, {"thing", s.is_thing}, {"area", s.area}, {"score", s.score}});
  }
  std::cout << summary.dump(2) << '\n';
  return 0;
}

int evaluate(const Common& common, const std::string& pred_path, const std::string& gt_path) {
  const pem::ModelConfig cfg = model_config(common, pem::toy_model_config());
  const pem::LabelMap pred = tensors_to_labels(pem::load_tensors(pred_path));
  const pem::LabelMap gt = tensors_to_labels(pem::load_tensors(gt_path));
  const auto m = pem::miou(pred, gt, cfg.num_classes);
  json j{{"miou", m.miou}, {"iou", json::array()}};
  for (std::size_t k = 0; k < m.iou.size(); ++k) {
    j["iou"].push_back(m.present[k] ? json(m.iou[k]) : json(nullptr));
  }
  if (!pred.instances.empty() && !gt.instances.empty()) {
    const auto pq = pem::panoptic_quality(pred, gt, cfg.num_classes, cfg.thing_mask());
    j["pq"] = pq.pq;
    j["sq"] = pq.sq;
    j["rq"] = pq.rq;
    j["pq_things"] = pq.pq_things;
    j["pq_stuff"] = pq.pq_stuff;
    j["pq_class_mean"] = pq.pq_class_mean;
  }
  const std::string text = j.dump(2) + "\n";
  if (common.out.empty()) {
    std::cout << text;
  } else {
    std::ofstream(common.out) << text;
  }
  return 0;
}

// Fast structural gates; the full acceptance suite lives in the test tree.
int selftest(const Common& common) {
  int status = 0;
  const auto check = [&](bool ok, const std::string& what) { status = std::max(status, gate(ok, what)); };

  for (std::size_t hw : {std::size_t{2048}, std::size_t{131072}}) {
    const pem::AttentionShape s{hw, 100, 256, 256, 256, 8};
    const auto p = pem::count_flops(pem::AttentionVariant::pemca, s);
    const auto m = pem::count_flops(pem::AttentionVariant::masked_ca, s);
    check(p.hw_dependent() < m.hw_dependent(), "FLOPs: pemca HW terms below masked CA at HW=" + std::to_string(hw));
  }

  for (std::size_t stages : {std::size_t{0}, std::size_t{2}}) {
    pem::ModelConfig cfg = pem::toy_model_config();
    cfg.decoder.stages = stages;
    pem::Model model(cfg);
    pem::NoGradGuard no_grad;
    const auto fwd = model.forward(pem::make_toy_dataset().front().image);
    check(fwd.predictions.size() == 3 * stages + 1, "stages=" + std::to_string(stages) + " prediction count");
  }

  std::mt19937_64 rng(common.seed.value_or(0));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  bool optimal = true;
  for (int trial = 0; trial < 50; ++trial) {
    const int rows = 1 + static_cast<int>(rng() % 5), cols = 1 + static_cast<int>(rng() % 5);
    pem::CostMatrix cost(rows, cols);
    for (Eigen::Index i = 0; i < cost.size(); ++i) cost.data()[i] = unit(rng);
    const bool wide = rows <= cols;
    std::vector<int> perm(static_cast<std::size_t>(wide ? cols : rows));
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>(i);
    double best = INFINITY;
    do {
      double total = 0;
      for (int i = 0; i < std::min(rows, cols); ++i) total += wide ? cost(i, perm[i]) : cost(perm[i], i);
      best = std::min(best, total);
    } while (std::next_permutation(perm.begin(), perm.end()));
    optimal &= std::abs(pem::hungarian_match(cost).total_cost(cost) - best) <= 1e-12 * std::max(1.0, best);
  }
  check(optimal, "Hungarian matches exhaustive minimum on 50 random matrices");

  pem::LabelMap gt{8, 8, std::vector<std::int32_t>(64, 0), std::vector<std::int32_t>(64, 0)};
  for (std::size_t i = 0; i < 32; ++i) {
    gt.classes[i] = 1;
    gt.instances[i] = 1;
  }
  const auto pq = pem::panoptic_quality(gt, gt, 2, {false, true});
  check(pq.pq == 1.0 && pem::miou(gt, gt, 2).miou == 1.0, "perfect prediction gives PQ = mIoU = 1");
  return status;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prototype-based efficient mask decoder: benchmarks, sweeps, training and inference"};
  app.require_subcommand(1);
  Common common;
  const auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "model config JSON")->check(CLI::ExistingFile);
    sub->add_option("--out", common.out, "output path (stdout when omitted)");
    sub->add_option("--format", common.format, "report format")->check(CLI::IsMember({"csv", "markdown", "md"}));
    sub->add_option("--seed", common.seed, "override the seed");
    sub->add_option("--precision", common.precision, "kernel precision")->check(CLI::IsMember({"f32", "f64"}));
    sub->add_option("--reps", common.reps, "timed repetitions")->check(CLI::PositiveNumber);
  };

  std::vector<std::string> variants{"pemca", "masked_ca"};
  std::vector<std::size_t> hw{2048, 8192, 32768, 131072};
  std::size_t n = 100, c = 256, d = 256, heads = 8, warmup = 3;
  const auto add_shape = [&](CLI::App* sub) {
    sub->add_option("--variants", variants, "attention variants")->delimiter(',');
    sub->add_option("--hw", hw, "token counts, ascending")->delimiter(',');
    sub->add_option("-N,--queries", n, "queries");
    sub->add_option("-C,--channels", c, "channels");
    sub->add_option("-D,--proj-dim", d, "attention width");
    sub->add_option("--heads", heads, "heads");
  };

  auto* bench = app.add_subcommand("bench-attention", "time cross-attention variants over an HW ladder");
  add_common(bench);
  add_shape(bench);
  bench->add_option("--warmup", warmup, "untimed calls per variant");

  auto* fl = app.add_subcommand("flops", "itemized analytic FLOPs of cross-attention variants");
  add_common(fl);
  add_shape(fl);
  variants = {"pemca", "pemca_no_mask", "pemca_no_proto", "masked_ca", "plain_ca"};

  std::string checkpoint;
  auto* layers = app.add_subcommand("sweep-layers", "loss, mIoU and latency per decoder depth");
  add_common(layers);
  layers->add_option("--checkpoint", checkpoint, "weights to load")->check(CLI::ExistingFile);
  layers->add_option("--warmup", warmup, "untimed forwards per depth");

  std::vector<std::size_t> query_counts{50, 100, 200};
  std::size_t steps = 200;
  auto* queries = app.add_subcommand("sweep-queries", "rebuild the toy model per query count");
  add_common(queries);
  queries->add_option("--queries", query_counts, "query counts")->delimiter(',');
  queries->add_option("--steps", steps, "training steps per query count");

  double lr = pem::AdamConfig{}.lr;
  std::string checkpoint_out;
  auto* train = app.add_subcommand("train-toy", "train on the synthetic fixture, per-layer loss per step");
  add_common(train);
  train->add_option("--steps", steps, "Adam steps");
  train->add_option("--lr", lr, "learning rate");
  train->add_option("--save", checkpoint_out, "write the trained weights here");

  std::string image_path;
  auto* fwd = app.add_subcommand("forward", "run the model on an image tensor file");
  add_common(fwd);
  fwd->add_option("--checkpoint", checkpoint, "weights to load")->check(CLI::ExistingFile);
  fwd->add_option("--image", image_path, "tensor file holding 'image' [3,H,W]")->required()->check(CLI::ExistingFile);

  std::string pred_path, gt_path;
  auto* eval = app.add_subcommand("evaluate", "mIoU and PQ of label-map tensor files");
  add_common(eval);
  eval->add_option("--pred", pred_path, "tensor file with 'classes' and optional 'instances'")
      ->required()
      ->check(CLI::ExistingFile);
  eval->add_option("--gt", gt_path, "ground truth in the same layout")->required()->check(CLI::ExistingFile);

  auto* self = app.add_subcommand("selftest", "quick structural gates");
  add_common(self);

  CLI11_PARSE(app, argc, argv);
  try {
    if (*bench) {
      if (bench->count("--variants") == 0) variants = {"pemca", "masked_ca"};
      return bench_attention(common, variants, hw, n, c, d, heads, warmup);
    }
    if (*fl) return flops(common, variants, hw, n, c, d, heads);
    if (*layers) return sweep_layers(common, checkpoint, warmup);
    if (*queries) return sweep_queries(common, query_counts, queries->count("--steps") ? steps : 0);
    if (*train) return train_toy(common, steps, lr, checkpoint_out);
    if (*fwd) return forward(common, checkpoint, image_path);
    if (*eval) return evaluate(common, pred_path, gt_path);
    if (*self) return selftest(common);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
