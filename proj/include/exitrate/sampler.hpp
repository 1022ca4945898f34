#pragma once

// Sampling-based estimation: per-class, per-neuron Gaussians fitted on a
// calibration split, class-rate scoring and minimum-rate prediction, plus the
// cosine-to-class-prototype baseline.

#include <cmath>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "exitrate/actstore.hpp"
#include "exitrate/binio.hpp"
#include "exitrate/errors.hpp"
#include "exitrate/numkernel.hpp"

namespace exitrate {

/// Which per-neuron rate to average.
///   printed:  log2(var) + (x - mu)^2 / (2 var)
///   full_nll: -log2 N(x | mu, var) = 0.5 log2(2 pi var) + (x - mu)^2 / (2 var ln 2)
enum class RateForm { printed, full_nll };

inline const char* to_string(RateForm f) { return f == RateForm::printed ? "printed" : "full_nll"; }

struct ClassGaussians {
  std::size_t layer = 0;
  Matrix mean;  // C x N
  Matrix var;   // C x N, >= kVarFloor
  std::vector<std::size_t> counts;

  std::size_t num_classes() const noexcept { return mean.rows(); }
  std::size_t neurons() const noexcept { return mean.cols(); }

  void validate() const {
    if (mean.rows() != var.rows() || mean.cols() != var.cols()) {
      throw ShapeError("ClassGaussians: mean/var table shapes differ");
    }
    if (counts.size() != mean.rows()) throw ShapeError("ClassGaussians: counts size mismatch");
    for (double v : var.flat()) {
      if (!(v >= kVarFloor)) throw NumericError("ClassGaussians: variance below floor");
    }
    require_finite(mean.flat(), "ClassGaussians mean");
  }

  bool operator==(const ClassGaussians&) const = default;
};

struct ClassPrototypes {
  std::size_t layer = 0;
  Matrix mean;  // C x N
};

namespace sampler_detail {

/// Indices of `split` grouped by class, at most `cap` per class, split order kept.
inline std::vector<std::vector<std::size_t>> per_class(const ActivationDataset& ds, SplitName split,
                                                       std::size_t cap) {
  if (cap == 0) throw UsageError("per-class calibration cap must be >= 1");
  std::vector<std::vector<std::size_t>> groups(ds.num_classes());
  for (std::size_t k : ds.split(split)) {
    auto& g = groups[ds.labels[k]];
    if (g.size() < cap) g.push_back(k);
  }
  for (std::size_t c = 0; c < groups.size(); ++c) {
    if (groups[c].empty()) {
      throw InvariantError("class " + std::to_string(c) + " (" + ds.class_names[c] +
                           ") has no samples in split '" + to_string(split) + "'");
    }
  }
  return groups;
}

}  // namespace sampler_detail

/// Mean and population (divide-by-n) variance per class and neuron, floored.
inline ClassGaussians fit_gaussians(const ActivationDataset& ds, std::size_t layer,
                                    SplitName split = SplitName::calibration,
                                    std::size_t per_class_cap = 100) {
  const Matrix& act = ds.layer(layer);
  const auto groups = sampler_detail::per_class(ds, split, per_class_cap);
  const std::size_t C = ds.num_classes(), N = act.cols();
  ClassGaussians g;
  g.layer = layer;
  g.mean = Matrix(C, N);
  g.var = Matrix(C, N);
  g.counts.resize(C);
  for (std::size_t c = 0; c < C; ++c) {
    // Welford accumulation.
    Vector mean(N, 0.0), m2(N, 0.0);
    std::size_t n = 0;
    for (std::size_t k : groups[c]) {
      ++n;
      const auto x = act.row(k);
      for (std::size_t j = 0; j < N; ++j) {
        const double d = x[j] - mean[j];
        mean[j] += d / static_cast<double>(n);
        m2[j] += d * (x[j] - mean[j]);
      }
    }
    g.counts[c] = n;
    for (std::size_t j = 0; j < N; ++j) {
      g.mean(c, j) = mean[j];
      g.var(c, j) = std::max(m2[j] / static_cast<double>(n), kVarFloor);
    }
  }
  return g;
}

inline ClassPrototypes fit_prototypes(const ActivationDataset& ds, std::size_t layer,
                                      SplitName split = SplitName::calibration,
                                      std::size_t per_class_cap = 100) {
  const Matrix& act = ds.layer(layer);
  const auto groups = sampler_detail::per_class(ds, split, per_class_cap);
  ClassPrototypes p;
  p.layer = layer;
  p.mean = Matrix(ds.num_classes(), act.cols());
  for (std::size_t c = 0; c < groups.size(); ++c) {
    auto row = p.mean.row(c);
    for (std::size_t k : groups[c]) {
      const auto x = act.row(k);
      for (std::size_t j = 0; j < row.size(); ++j) row[j] += x[j];
    }
    for (double& v : row) v /= static_cast<double>(groups[c].size());
  }
  return p;
}

/// One rate per class; lower means the activation is less surprising under that class.
inline Vector class_rate(std::span<const double> act, const ClassGaussians& g,
                         RateForm form = RateForm::printed) {
  detail::require_same(act.size(), g.neurons(), "class_rate");
  const std::size_t C = g.num_classes(), N = g.neurons();
  const double inv_n = 1.0 / static_cast<double>(N);
  Vector rates(C);
  for (std::size_t c = 0; c < C; ++c) {
    const auto mu = g.mean.row(c);
    const auto var = g.var.row(c);
    if (form == RateForm::full_nll) {
      rates[c] = gaussian_nll_bits(act, mu, var) * inv_n;
      continue;
    }
    double log_term = 0.0, quad_term = 0.0;
    for (std::size_t j = 0; j < N; ++j) {
      const double d = act[j] - mu[j];
      log_term += std::log2(var[j]);
      quad_term += d * d / (2.0 * var[j]);
    }
    rates[c] = (log_term + quad_term) * inv_n;
  }
  require_finite(rates, "class_rate");
  return rates;
}

/// First index of the minimum.
inline std::size_t argmin_lowest(std::span<const double> v) {
  if (v.empty()) throw ShapeError("argmin over empty score vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] < v[best]) best = i;
  return best;
}

/// First index of the maximum.
inline std::size_t argmax_lowest(std::span<const double> v) {
  if (v.empty()) throw ShapeError("argmax over empty score vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

inline std::size_t predict_by_rate(std::span<const double> act, const ClassGaussians& g,
                                   RateForm form = RateForm::printed) {
  return argmin_lowest(class_rate(act, g, form));
}

inline Vector cosine_scores(std::span<const double> act, const ClassPrototypes& p) {
  detail::require_same(act.size(), p.mean.cols(), "cosine_scores");
  Vector s(p.mean.rows());
  for (std::size_t c = 0; c < s.size(); ++c) s[c] = cosine_similarity(act, p.mean.row(c));
  return s;
}

inline std::size_t predict_by_cosine(std::span<const double> act, const ClassPrototypes& p) {
  return argmax_lowest(cosine_scores(act, p));
}

// ---------------------------------------------------------------------------
// gaussians_layer_<i>.json + gaussians_layer_<i>.bin
// The .bin holds the mean table then the variance table, each C x N float32 LE.

inline void save_gaussians(const ClassGaussians& g, const std::filesystem::path& dir) {
  g.validate();
  std::filesystem::create_directories(dir);
  const std::string stem = "gaussians_layer_" + std::to_string(g.layer);
  nlohmann::ordered_json j;
  j["version"] = 1;
  j["layer"] = g.layer;
  j["classes"] = g.num_classes();
  j["neurons"] = g.neurons();
  j["counts"] = g.counts;
  j["var_floor"] = kVarFloor;
  j["dtype"] = "f32le";
  j["layout"] = "mean[C][N] then var[C][N]";
  binio::write_text(dir / (stem + ".json"), j.dump(2) + "\n");
  std::vector<char> bytes;
  binio::append_f32(bytes, g.mean.flat());
  binio::append_f32(bytes, g.var.flat());
  binio::write_file(dir / (stem + ".bin"), bytes);
}

inline ClassGaussians load_gaussians(const std::filesystem::path& dir, std::size_t layer) {
  const std::string stem = "gaussians_layer_" + std::to_string(layer);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(binio::read_text(dir / (stem + ".json")));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(stem + ".json: " + e.what());
  }
  ClassGaussians g;
  std::size_t C = 0, N = 0;
  try {
    g.layer = j.at("layer").get<std::size_t>();
    C = j.at("classes").get<std::size_t>();
    N = j.at("neurons").get<std::size_t>();
    g.counts = j.at("counts").get<std::vector<std::size_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(stem + ".json: " + e.what());
  }
  const auto values = binio::decode_f32(binio::read_words(dir / (stem + ".bin"), 2 * C * N));
  g.mean = Matrix(C, N, Vector(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(C * N)));
  g.var = Matrix(C, N, Vector(values.begin() + static_cast<std::ptrdiff_t>(C * N), values.end()));
  // float32 rounding can land just under the floor.
  for (double& v : g.var.flat()) v = std::max(v, kVarFloor);
  g.validate();
  return g;
}

}  // namespace exitrate
