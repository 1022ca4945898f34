#pragma once

// Evaluation harness: top-k accuracy, parameter cost accounting, oracle early
// exit, and the per-layer / sweep experiment drivers with CSV + JSON reports.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "exitrate/actstore.hpp"
#include "exitrate/binio.hpp"
#include "exitrate/errors.hpp"
#include "exitrate/numkernel.hpp"
#include "exitrate/parallel.hpp"
#include "exitrate/sampler.hpp"
#include "exitrate/tgem.hpp"

namespace exitrate {

inline constexpr const char* kVersion = "0.1.0";

// ---------------------------------------------------------------------------
// Top-k accuracy

enum class ScoreDirection { lower_is_better, higher_is_better };

/// 0-based rank of `label` among the scores of one sample; ties go to the lower class index.
inline std::size_t rank_of(std::span<const double> scores, std::size_t label, ScoreDirection dir) {
  const double own = scores[label];
  std::size_t rank = 0;
  for (std::size_t c = 0; c < scores.size(); ++c) {
    if (c == label) continue;
    const bool better = dir == ScoreDirection::lower_is_better ? scores[c] < own : scores[c] > own;
    if (better || (scores[c] == own && c < label)) ++rank;
  }
  return rank;
}

inline double topk_accuracy(const Matrix& scores, std::span<const std::uint32_t> labels,
                            std::size_t k, ScoreDirection dir) {
  detail::require_same(scores.rows(), labels.size(), "topk_accuracy labels");
  if (k < 1 || k > scores.cols()) {
    throw UsageError("topk_accuracy: k=" + std::to_string(k) + " outside 1.." +
                     std::to_string(scores.cols()));
  }
  if (scores.rows() == 0) return 0.0;
  std::size_t hits = 0;
  for (std::size_t s = 0; s < scores.rows(); ++s) {
    if (labels[s] >= scores.cols()) throw ShapeError("topk_accuracy: label out of range");
    if (rank_of(scores.row(s), labels[s], dir) < k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(scores.rows());
}

// ---------------------------------------------------------------------------
// Parameter cost

struct CostModel {
  std::string name;
  std::vector<std::int64_t> blocks;  // parameters per residual block, in order
  std::int64_t other = 0;            // parameters outside the blocks (stem, head)

  std::int64_t total() const {
    return std::accumulate(blocks.begin(), blocks.end(), std::int64_t{0}) + other;
  }

  std::int64_t blocks_through(std::size_t exit_layer) const {
    if (exit_layer < 1 || exit_layer > blocks.size()) {
      throw UsageError("exit layer " + std::to_string(exit_layer) + " outside 1.." +
                       std::to_string(blocks.size()) + " of cost model");
    }
    return std::accumulate(blocks.begin(), blocks.begin() + static_cast<std::ptrdiff_t>(exit_layer),
                           std::int64_t{0});
  }

  void validate() const {
    if (blocks.empty()) throw FormatError("cost model: no blocks");
    for (auto b : blocks)
      if (b < 0) throw FormatError("cost model: negative block size");
    if (other < 0) throw FormatError("cost model: negative 'other'");
    if (total() <= 0) throw FormatError("cost model: zero total");
  }
};

inline CostModel load_cost_model(const std::filesystem::path& path) {
  CostModel m;
  try {
    const auto j = nlohmann::json::parse(binio::read_text(path));
    m.blocks = j.at("blocks").get<std::vector<std::int64_t>>();
    m.other = j.at("other").get<std::int64_t>();
    m.name = j.value("name", path.stem().string());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.filename().string() + ": " + e.what());
  }
  m.validate();
  return m;
}

/// (block parameters through `exit_layer` + exit-module parameters) / encoder parameters.
inline double compression_ratio(std::size_t exit_layer, const CostModel& cost,
                                std::int64_t ee_params) {
  return static_cast<double>(cost.blocks_through(exit_layer) + ee_params) /
         static_cast<double>(cost.total());
}

/// Parameters not executed when exiting after `exit_layer`, net of the exit module.
inline std::int64_t parameter_saving(std::size_t exit_layer, const CostModel& cost,
                                     std::int64_t ee_params) {
  return cost.total() - cost.blocks_through(exit_layer) - ee_params;
}

// ---------------------------------------------------------------------------
// Oracle early exit

/// Class predictions, samples x exit layers.
struct PredictionMatrix {
  std::size_t samples = 0;
  std::size_t layers = 0;
  std::vector<std::uint32_t> data;

  PredictionMatrix() = default;
  PredictionMatrix(std::size_t s, std::size_t l) : samples(s), layers(l), data(s * l, 0) {}

  std::uint32_t& operator()(std::size_t s, std::size_t l) { return data[s * layers + l]; }
  std::uint32_t operator()(std::size_t s, std::size_t l) const { return data[s * layers + l]; }
};

struct OracleResult {
  double accuracy = 0.0;
  std::vector<std::size_t> exit_histogram;  // one bin per layer column
};

/// Each sample exits at the first layer whose prediction is correct, else at the last layer.
inline OracleResult oracle_early_exit(const PredictionMatrix& preds,
                                      std::span<const std::uint32_t> labels) {
  detail::require_same(preds.samples, labels.size(), "oracle_early_exit labels");
  if (preds.layers == 0) throw ShapeError("oracle_early_exit: no layers");
  detail::require_same(preds.data.size(), preds.samples * preds.layers, "oracle_early_exit data");
  OracleResult r;
  r.exit_histogram.assign(preds.layers, 0);
  std::size_t correct = 0;
  for (std::size_t s = 0; s < preds.samples; ++s) {
    std::size_t exit = preds.layers - 1;
    for (std::size_t l = 0; l < preds.layers; ++l) {
      if (preds(s, l) == labels[s]) {
        exit = l;
        ++correct;
        break;
      }
    }
    ++r.exit_histogram[exit];
  }
  r.accuracy = preds.samples ? static_cast<double>(correct) / static_cast<double>(preds.samples) : 0.0;
  return r;
}

/// Per-layer top-1 accuracy of a prediction matrix.
inline std::vector<double> per_layer_accuracy(const PredictionMatrix& preds,
                                              std::span<const std::uint32_t> labels) {
  std::vector<double> acc(preds.layers, 0.0);
  for (std::size_t l = 0; l < preds.layers; ++l) {
    std::size_t hit = 0;
    for (std::size_t s = 0; s < preds.samples; ++s) hit += preds(s, l) == labels[s];
    acc[l] = preds.samples ? static_cast<double>(hit) / static_cast<double>(preds.samples) : 0.0;
  }
  return acc;
}

// ---------------------------------------------------------------------------
// Methods

enum class Method {
  sampling_rate,    // calibration Gaussians, class-rate
  sampling_cosine,  // calibration prototypes, cosine
  tgem_rate,        // T-GEM + jumper trained with L_r + L_s, class-rate
  tgem_cosine,      // same module, cosine
  jumper_cosine,    // jumper trained with L_s only, cosine
  tgem_rateonly,    // T-GEM + jumper trained with L_r only, class-rate
};

inline const char* to_string(Method m) {
  switch (m) {
    case Method::sampling_rate: return "sampling-rate";
    case Method::sampling_cosine: return "sampling-cosine";
    case Method::tgem_rate: return "tgem-rate";
    case Method::tgem_cosine: return "tgem-cosine";
    case Method::jumper_cosine: return "jumper-cosine";
    case Method::tgem_rateonly: return "tgem-rateonly";
  }
  return "?";
}

inline Method method_from_string(const std::string& s) {
  for (Method m : {Method::sampling_rate, Method::sampling_cosine, Method::tgem_rate,
                   Method::tgem_cosine, Method::jumper_cosine, Method::tgem_rateonly}) {
    if (s == to_string(m)) return m;
  }
  throw UsageError("unknown method '" + s +
                   "' (expected sampling-rate, sampling-cosine, tgem-rate, tgem-cosine, "
                   "jumper-cosine, tgem-rateonly)");
}

inline std::vector<Method> default_methods() {
  return {Method::sampling_rate, Method::sampling_cosine, Method::tgem_rate, Method::tgem_cosine};
}

inline ScoreDirection direction_of(Method m) {
  switch (m) {
    case Method::sampling_rate:
    case Method::tgem_rate:
    case Method::tgem_rateonly: return ScoreDirection::lower_is_better;
    default: return ScoreDirection::higher_is_better;
  }
}

struct EvalConfig {
  std::vector<Method> methods = default_methods();
  std::vector<std::size_t> layers;  // empty: all layers
  std::size_t cap = 100;
  RateForm rate_form = RateForm::printed;
  LossConfig loss;  // use_rate/use_cosine are set per method
  ModuleShape shape;
  std::optional<std::size_t> k;  // default: embed dim
  std::optional<std::filesystem::path> modules_dir;  // load exit_<i> instead of training
  CostModel cost;
};

struct ReportRow {
  std::size_t layer = 0;
  Method method = Method::sampling_rate;
  double top1 = 0.0, top2 = 0.0, top3 = 0.0;
  double compression = 0.0;
  std::int64_t ap = 0;
};

struct OracleSummary {
  Method method = Method::sampling_rate;
  OracleResult result;
  double best_layer_top1 = 0.0;
};

struct EvalReport {
  std::vector<std::size_t> layers;
  std::vector<ReportRow> rows;
  std::vector<OracleSummary> oracle;
  std::vector<double> tgem_agreement;  // per layer, rate vs cosine top-1 agreement
  nlohmann::ordered_json config;
  nlohmann::ordered_json extras = nlohmann::ordered_json::object();

  const ReportRow& row(std::size_t layer, Method m) const {
    for (const auto& r : rows)
      if (r.layer == layer && r.method == m) return r;
    throw UsageError(std::string("no report row for ") + to_string(m) + " at layer " +
                     std::to_string(layer));
  }

  const OracleSummary& oracle_for(Method m) const {
    for (const auto& o : oracle)
      if (o.method == m) return o;
    throw UsageError(std::string("no oracle summary for ") + to_string(m));
  }
};

namespace eval_detail {

inline std::vector<std::size_t> resolve_layers(const ActivationDataset& ds,
                                               const std::vector<std::size_t>& requested) {
  std::vector<std::size_t> layers = requested;
  if (layers.empty()) {
    for (std::size_t i = 1; i <= ds.num_layers(); ++i) layers.push_back(i);
  }
  for (std::size_t l : layers) (void)ds.layer(l);
  return layers;
}

/// Test split, checked for equal per-class counts.
inline std::vector<std::size_t> balanced_test(const ActivationDataset& ds) {
  const auto& test = ds.split(SplitName::test);
  if (test.empty()) throw InvariantError("test split is empty");
  std::vector<std::size_t> counts(ds.num_classes(), 0);
  for (std::size_t k : test) ++counts[ds.labels[k]];
  const auto [lo, hi] = std::minmax_element(counts.begin(), counts.end());
  if (*lo != *hi) {
    throw InvariantError("test split is not class-balanced (per-class counts " +
                         std::to_string(*lo) + ".." + std::to_string(*hi) + ")");
  }
  if (test.size() != 1000) {
    std::cerr << "warning: test split has " << test.size()
              << " samples; expect about +-3 points of noise at 1000\n";
  }
  return test;
}

struct LayerScores {
  std::vector<std::pair<Method, Matrix>> scores;
  std::vector<std::pair<Method, std::int64_t>> ap;
  double agreement = std::nan("");
};

inline LossConfig loss_for(const EvalConfig& cfg, bool rate, bool cosine) {
  LossConfig l = cfg.loss;
  l.use_rate = rate;
  l.use_cosine = cosine;
  return l;
}

inline ModuleShape shape_for(const EvalConfig& cfg, const ActivationDataset& ds) {
  ModuleShape s = cfg.shape;
  s.k = cfg.k.value_or(ds.embed_dim());
  return s;
}

inline Matrix score_matrix(std::size_t rows, std::size_t cols) { return Matrix(rows, cols); }

inline LayerScores score_layer(const ActivationDataset& ds, std::size_t layer,
                               const std::vector<std::size_t>& test, const EvalConfig& cfg) {
  auto has = [&](Method m) {
    return std::find(cfg.methods.begin(), cfg.methods.end(), m) != cfg.methods.end();
  };
  const Matrix& act = ds.layer(layer);
  const std::size_t C = ds.num_classes();
  LayerScores out;

  if (has(Method::sampling_rate)) {
    const auto g = fit_gaussians(ds, layer, SplitName::calibration, cfg.cap);
    Matrix s(test.size(), C);
    for (std::size_t r = 0; r < test.size(); ++r) {
      const Vector v = class_rate(act.row(test[r]), g, cfg.rate_form);
      std::copy(v.begin(), v.end(), s.row(r).begin());
    }
    out.scores.emplace_back(Method::sampling_rate, std::move(s));
    out.ap.emplace_back(Method::sampling_rate, 0);
  }
  if (has(Method::sampling_cosine)) {
    const auto p = fit_prototypes(ds, layer, SplitName::calibration, cfg.cap);
    Matrix s(test.size(), C);
    for (std::size_t r = 0; r < test.size(); ++r) {
      const Vector v = cosine_scores(act.row(test[r]), p);
      std::copy(v.begin(), v.end(), s.row(r).begin());
    }
    out.scores.emplace_back(Method::sampling_cosine, std::move(s));
    out.ap.emplace_back(Method::sampling_cosine, 0);
  }

  auto module_scores = [&](const ExitModule& em, Method m, ScoreMode mode) {
    const auto heads = class_heads(em, ds.text_embeddings);
    Matrix s(test.size(), C);
    for (std::size_t r = 0; r < test.size(); ++r) {
      const Vector v = tgem_scores(em, act.row(test[r]), heads, mode);
      std::copy(v.begin(), v.end(), s.row(r).begin());
    }
    out.scores.emplace_back(m, std::move(s));
    out.ap.emplace_back(m, static_cast<std::int64_t>(count_additional_parameters(em)));
  };

  if (has(Method::tgem_rate) || has(Method::tgem_cosine)) {
    const ExitModule em = cfg.modules_dir
                              ? load_exit_module(*cfg.modules_dir, layer)
                              : train_exit_module(ds, layer, loss_for(cfg, true, true),
                                                  shape_for(cfg, ds));
    if (has(Method::tgem_rate)) module_scores(em, Method::tgem_rate, ScoreMode::rate);
    if (has(Method::tgem_cosine)) module_scores(em, Method::tgem_cosine, ScoreMode::cosine);
    if (has(Method::tgem_rate) && has(Method::tgem_cosine)) {
      const Matrix& sr = out.scores[out.scores.size() - 2].second;
      const Matrix& sc = out.scores.back().second;
      std::size_t agree = 0;
      for (std::size_t r = 0; r < test.size(); ++r) {
        agree += argmin_lowest(sr.row(r)) == argmax_lowest(sc.row(r));
      }
      out.agreement = static_cast<double>(agree) / static_cast<double>(test.size());
    }
  }
  if (has(Method::jumper_cosine)) {
    const ExitModule em =
        train_exit_module(ds, layer, loss_for(cfg, false, true), shape_for(cfg, ds));
    module_scores(em, Method::jumper_cosine, ScoreMode::cosine);
  }
  if (has(Method::tgem_rateonly)) {
    const ExitModule em =
        train_exit_module(ds, layer, loss_for(cfg, true, false), shape_for(cfg, ds));
    module_scores(em, Method::tgem_rateonly, ScoreMode::rate);
  }
  return out;
}

inline nlohmann::ordered_json config_echo(const ActivationDataset& ds, const EvalConfig& cfg,
                                          const std::vector<std::size_t>& layers) {
  nlohmann::ordered_json j;
  std::vector<std::string> methods;
  for (Method m : cfg.methods) methods.emplace_back(to_string(m));
  j["methods"] = methods;
  j["layers"] = layers;
  j["cap"] = cfg.cap;
  j["rate_form"] = to_string(cfg.rate_form);
  j["k"] = cfg.k.value_or(ds.embed_dim());
  j["hidden"] = shape_for(cfg, ds).hidden_or_default();
  j["normalize_projection"] = cfg.shape.normalize_projection;
  j["pred_var_floor"] = cfg.shape.pred_var_floor;
  j["loss"] = tgem_detail::config_json(cfg.loss);
  j["modules_dir"] = cfg.modules_dir ? cfg.modules_dir->string() : "";
  j["cost_model"] = {{"name", cfg.cost.name}, {"blocks", cfg.cost.blocks}, {"other", cfg.cost.other}};
  j["dataset"] = {{"num_layers", ds.num_layers()},
                  {"num_samples", ds.num_samples()},
                  {"classes", ds.num_classes()},
                  {"embed_dim", ds.embed_dim()},
                  {"test_samples", ds.splits.test.size()}};
  return j;
}

}  // namespace eval_detail

/// Per-layer accuracy table over the requested methods and layers.
inline EvalReport run_table1(const ActivationDataset& ds, const EvalConfig& cfg) {
  if (cfg.methods.empty()) throw UsageError("eval: no methods selected");
  cfg.cost.validate();
  const auto layers = eval_detail::resolve_layers(ds, cfg.layers);
  for (std::size_t l : layers) (void)cfg.cost.blocks_through(l);
  const auto test = eval_detail::balanced_test(ds);
  std::vector<std::uint32_t> test_labels;
  for (std::size_t k : test) test_labels.push_back(ds.labels[k]);

  std::vector<eval_detail::LayerScores> per_layer(layers.size());
  parallel_for(layers.size(), [&](std::size_t i) {
    per_layer[i] = eval_detail::score_layer(ds, layers[i], test, cfg);
  });

  EvalReport report;
  report.layers = layers;
  report.config = eval_detail::config_echo(ds, cfg, layers);
  for (Method m : cfg.methods) {
    PredictionMatrix preds(test.size(), layers.size());
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& ls = per_layer[i];
      const auto it = std::find_if(ls.scores.begin(), ls.scores.end(),
                                   [&](const auto& p) { return p.first == m; });
      const auto ap_it = std::find_if(ls.ap.begin(), ls.ap.end(),
                                      [&](const auto& p) { return p.first == m; });
      const Matrix& s = it->second;
      const auto dir = direction_of(m);
      ReportRow row;
      row.layer = layers[i];
      row.method = m;
      row.top1 = topk_accuracy(s, test_labels, 1, dir);
      row.top2 = topk_accuracy(s, test_labels, std::min<std::size_t>(2, s.cols()), dir);
      row.top3 = topk_accuracy(s, test_labels, std::min<std::size_t>(3, s.cols()), dir);
      row.ap = ap_it->second;
      row.compression = compression_ratio(layers[i], cfg.cost, row.ap);
      report.rows.push_back(row);
      for (std::size_t r = 0; r < test.size(); ++r) {
        preds(r, i) = static_cast<std::uint32_t>(dir == ScoreDirection::lower_is_better
                                                     ? argmin_lowest(s.row(r))
                                                     : argmax_lowest(s.row(r)));
      }
    }
    OracleSummary o;
    o.method = m;
    o.result = oracle_early_exit(preds, test_labels);
    const auto acc = per_layer_accuracy(preds, test_labels);
    o.best_layer_top1 = *std::max_element(acc.begin(), acc.end());
    report.oracle.push_back(std::move(o));
  }
  for (const auto& ls : per_layer) report.tgem_agreement.push_back(ls.agreement);

  auto has = [&](Method m) {
    return std::find(cfg.methods.begin(), cfg.methods.end(), m) != cfg.methods.end();
  };
  if (has(Method::jumper_cosine) && has(Method::tgem_cosine)) {
    // Reported, not asserted: does adding the rate term help the cosine classifier?
    nlohmann::ordered_json cmp;
    auto gains = nlohmann::ordered_json::array();
    double sum = 0.0, best = -1.0;
    std::size_t best_layer = 0;
    for (std::size_t l : layers) {
      const double g = report.row(l, Method::tgem_cosine).top1 - report.row(l, Method::jumper_cosine).top1;
      gains.push_back({{"layer", l}, {"gain", g}});
      sum += g;
      if (g > best) {
        best = g;
        best_layer = l;
      }
    }
    cmp["per_layer"] = gains;
    cmp["mean_gain"] = sum / static_cast<double>(layers.size());
    cmp["max_gain"] = best;
    cmp["max_gain_layer"] = best_layer;
    cmp["direction"] = sum > 0.0 ? "rate-regularizer-helps" : "no-gain";
    report.extras["regularizer_comparison"] = cmp;
  }
  return report;
}

// ---------------------------------------------------------------------------
// Sweeps

enum class SweepAxis { samples, k };

inline SweepAxis axis_from_string(const std::string& s) {
  if (s == "samples") return SweepAxis::samples;
  if (s == "k") return SweepAxis::k;
  throw UsageError("unknown sweep axis '" + s + "' (expected samples or k)");
}

inline std::vector<std::size_t> default_sweep_values(SweepAxis axis) {
  return axis == SweepAxis::samples ? std::vector<std::size_t>{1, 10, 100, 250, 1000}
                                    : std::vector<std::size_t>{16, 32, 128, 512, 1024};
}

struct SweepRow {
  std::size_t value = 0;
  std::size_t layer = 0;
  double top1 = 0.0;
  std::int64_t ap = 0;
};

struct SweepReport {
  SweepAxis axis = SweepAxis::samples;
  std::vector<SweepRow> rows;
  std::optional<std::size_t> saturation_value;  // smallest value within 2 points of the best
  nlohmann::ordered_json config;

  double top1(std::size_t value, std::size_t layer) const {
    for (const auto& r : rows)
      if (r.value == value && r.layer == layer) return r.top1;
    throw UsageError("no sweep row for value " + std::to_string(value) + " at layer " +
                     std::to_string(layer));
  }
};

/// Sweep over the calibration cap (sampling-based class-rate) or over K
/// (T-GEM + jumper, class-rate; trained with L_r + L_s when K equals the
/// embedding dimension and with L_r alone otherwise, since cosine needs K == E).
inline SweepReport run_table2(const ActivationDataset& ds, SweepAxis axis,
                              const std::vector<std::size_t>& values, const EvalConfig& cfg) {
  if (values.empty()) throw UsageError("sweep: no values");
  const auto layers = eval_detail::resolve_layers(ds, cfg.layers);
  const auto test = eval_detail::balanced_test(ds);
  std::vector<std::uint32_t> test_labels;
  for (std::size_t k : test) test_labels.push_back(ds.labels[k]);

  SweepReport rep;
  rep.axis = axis;
  rep.rows.resize(values.size() * layers.size());
  parallel_for(rep.rows.size(), [&](std::size_t idx) {
    const std::size_t v = values[idx / layers.size()];
    const std::size_t layer = layers[idx % layers.size()];
    const Matrix& act = ds.layer(layer);
    SweepRow row;
    row.value = v;
    row.layer = layer;
    Matrix s(test.size(), ds.num_classes());
    if (axis == SweepAxis::samples) {
      const auto g = fit_gaussians(ds, layer, SplitName::calibration, v);
      for (std::size_t r = 0; r < test.size(); ++r) {
        const Vector sc = class_rate(act.row(test[r]), g, cfg.rate_form);
        std::copy(sc.begin(), sc.end(), s.row(r).begin());
      }
    } else {
      ModuleShape shape = cfg.shape;
      shape.k = v;
      LossConfig loss = cfg.loss;
      loss.use_rate = true;
      loss.use_cosine = v == ds.embed_dim();
      const ExitModule em = train_exit_module(ds, layer, loss, shape);
      const auto heads = class_heads(em, ds.text_embeddings);
      for (std::size_t r = 0; r < test.size(); ++r) {
        const Vector sc = tgem_scores(em, act.row(test[r]), heads, ScoreMode::rate);
        std::copy(sc.begin(), sc.end(), s.row(r).begin());
      }
      row.ap = static_cast<std::int64_t>(count_additional_parameters(em));
    }
    row.top1 = topk_accuracy(s, test_labels, 1, ScoreDirection::lower_is_better);
    rep.rows[idx] = row;
  });

  // Saturation: smallest value whose mean top-1 over layers is within 2 points of the best.
  std::vector<double> mean(values.size(), 0.0);
  for (const auto& r : rep.rows) {
    const auto vi = static_cast<std::size_t>(std::find(values.begin(), values.end(), r.value) - values.begin());
    mean[vi] += r.top1 / static_cast<double>(layers.size());
  }
  const double best = *std::max_element(mean.begin(), mean.end());
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return values[a] < values[b]; });
  for (auto vi : order) {
    if (mean[vi] >= best - 0.02) {
      rep.saturation_value = values[vi];
      break;
    }
  }
  rep.config = eval_detail::config_echo(ds, cfg, layers);
  rep.config["axis"] = axis == SweepAxis::samples ? "samples" : "k";
  rep.config["values"] = values;
  return rep;
}

// ---------------------------------------------------------------------------
// Report files

namespace eval_detail {

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace eval_detail

inline std::string report_csv(const EvalReport& r) {
  std::ostringstream os;
  os << "layer,method,top1,top2,top3,compression,ap\n";
  for (const auto& row : r.rows) {
    os << row.layer << ',' << to_string(row.method) << ',' << eval_detail::fmt(row.top1) << ','
       << eval_detail::fmt(row.top2) << ',' << eval_detail::fmt(row.top3) << ','
       << eval_detail::fmt(row.compression) << ',' << row.ap << '\n';
  }
  return os.str();
}

/// (layer, exit_count, cumulative_fraction) for one method's oracle run.
inline std::string oracle_csv(const OracleSummary& o, const std::vector<std::size_t>& layers) {
  std::ostringstream os;
  os << "layer,exit_count,cumulative_fraction\n";
  const auto& h = o.result.exit_histogram;
  const std::size_t total = std::accumulate(h.begin(), h.end(), std::size_t{0});
  std::size_t cum = 0;
  for (std::size_t i = 0; i < h.size(); ++i) {
    cum += h[i];
    os << layers[i] << ',' << h[i] << ','
       << eval_detail::fmt(total ? static_cast<double>(cum) / static_cast<double>(total) : 0.0) << '\n';
  }
  return os.str();
}

inline nlohmann::ordered_json report_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["config"] = r.config;
  j["runtime"] = {{"tool", "exitrate"}, {"version", kVersion}};
  auto rows = nlohmann::ordered_json::array();
  for (const auto& row : r.rows) {
    rows.push_back({{"layer", row.layer},
                    {"method", to_string(row.method)},
                    {"top1", row.top1},
                    {"top2", row.top2},
                    {"top3", row.top3},
                    {"compression", row.compression},
                    {"ap", row.ap}});
  }
  j["rows"] = rows;
  auto oracle = nlohmann::ordered_json::array();
  for (const auto& o : r.oracle) {
    oracle.push_back({{"method", to_string(o.method)},
                      {"accuracy", o.result.accuracy},
                      {"best_layer_top1", o.best_layer_top1},
                      {"exit_histogram", o.result.exit_histogram},
                      {"layers", r.layers}});
  }
  j["oracle"] = oracle;
  auto agreement = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < r.layers.size(); ++i) {
    if (!std::isnan(r.tgem_agreement[i])) {
      agreement.push_back({{"layer", r.layers[i]}, {"rate_cosine_agreement", r.tgem_agreement[i]}});
    }
  }
  j["tgem_agreement"] = agreement;
  for (auto it = r.extras.begin(); it != r.extras.end(); ++it) j[it.key()] = it.value();
  return j;
}

inline void write_report(const EvalReport& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  binio::write_text(dir / "report.csv", report_csv(r));
  binio::write_text(dir / "report.json", report_json(r).dump(2) + "\n");
  if (!r.oracle.empty()) binio::write_text(dir / "oracle.csv", oracle_csv(r.oracle.front(), r.layers));
}

inline std::string sweep_csv(const SweepReport& r) {
  std::ostringstream os;
  os << "axis,value,layer,top1,ap\n";
  for (const auto& row : r.rows) {
    os << (r.axis == SweepAxis::samples ? "samples" : "k") << ',' << row.value << ',' << row.layer
       << ',' << eval_detail::fmt(row.top1) << ',' << row.ap << '\n';
  }
  return os.str();
}

inline void write_sweep(const SweepReport& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  binio::write_text(dir / "sweep.csv", sweep_csv(r));
  nlohmann::ordered_json j;
  j["config"] = r.config;
  auto rows = nlohmann::ordered_json::array();
  for (const auto& row : r.rows) {
    rows.push_back({{"value", row.value}, {"layer", row.layer}, {"top1", row.top1}, {"ap", row.ap}});
  }
  j["rows"] = rows;
  if (r.saturation_value) j["saturation_value"] = *r.saturation_value;
  binio::write_text(dir / "sweep.json", j.dump(2) + "\n");
}

}  // namespace exitrate
