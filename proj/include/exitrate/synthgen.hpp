#pragma once

// Synthetic activation datasets with depth-growing class separation.
//
// Layer i (1..L) activation of a class-c sample:
//
//   gain * s_i * m_c  +  (i / L) * b  +  N(0, noise_sigma^2) per neuron
//                     +  N(0, outlier_sigma^2) on the outlier neurons
//
// with s_i = floor + (1 - floor) * i / L (floor = depth_floor, 0 by default).
// m_c are per-class directions of norm `mean_norm`, b is a class-independent
// offset shared by all classes, and the outlier neurons carry a zero-mean
// high-variance fluctuation that is also shared across classes (the analogue
// of the few very large activation channels found in transformer residual
// streams). Text embeddings t_c are orthonormal, and m_c = mean_norm *
// normalize(A t_c) for a random map A, so each class's activations are a
// function of its text embedding.

#include <cstdint>
#include <string>
#include <vector>

#include "exitrate/actstore.hpp"
#include "exitrate/errors.hpp"
#include "exitrate/numkernel.hpp"

namespace exitrate {

struct SynthConfig {
  std::size_t classes = 10;
  std::size_t layers = 12;
  std::size_t neurons = 64;
  std::size_t embed_dim = 32;
  std::size_t samples = 3000;
  double depth_gain = 3.0;
  double noise_sigma = 1.0;
  std::uint64_t seed = 7;

  double mean_norm = 3.0;
  double depth_floor = 0.0;  // fraction of the class separation already present before layer 1
  double offset_sigma = 1.0;  // per-neuron sd of b
  std::size_t outlier_neurons = 8;
  double outlier_sigma = 4.0;

  std::size_t calibration_per_class = 100;
  std::size_t test_per_class = 100;

  void validate() const {
    if (classes < 2) throw UsageError("synth: need at least 2 classes");
    if (layers < 1) throw UsageError("synth: need at least 1 layer");
    if (neurons < 1 || embed_dim < 1) throw UsageError("synth: neurons and embed_dim must be >= 1");
    if (!(depth_gain >= 0.0)) throw UsageError("synth: depth_gain must be >= 0");
    if (!(noise_sigma > 0.0)) throw UsageError("synth: noise_sigma must be > 0");
    if (!(mean_norm >= 0.0) || !(offset_sigma >= 0.0) || !(outlier_sigma >= 0.0)) {
      throw UsageError("synth: scales must be >= 0");
    }
    if (classes > embed_dim) {
      throw UsageError("synth: cannot orthogonalize " + std::to_string(classes) +
                       " text embeddings in " + std::to_string(embed_dim) + " dimensions");
    }
    if (!(depth_floor >= 0.0 && depth_floor <= 1.0)) throw UsageError("synth: depth_floor must be in [0, 1]");
    if (outlier_neurons > neurons) throw UsageError("synth: outlier_neurons exceeds neurons");
    const std::size_t smallest_class = samples / classes;
    if (samples > 0 && smallest_class < calibration_per_class + test_per_class) {
      throw UsageError("synth: " + std::to_string(samples) + " samples give only " +
                       std::to_string(smallest_class) + " per class, need " +
                       std::to_string(calibration_per_class + test_per_class) +
                       " for calibration + test");
    }
  }
};

/// Ground-truth parameters behind a generated dataset.
struct SynthTruth {
  Matrix text;        // C x E, orthonormal rows
  Matrix directions;  // C x N, m_c
  Vector offset;      // N, b
  std::vector<char> outlier;  // N flags

  /// Expected activation of class c at layer i.
  Vector class_mean(const SynthConfig& cfg, std::size_t c, std::size_t i) const {
    const double depth = static_cast<double>(i) / static_cast<double>(cfg.layers);
    const double sep = cfg.depth_floor + (1.0 - cfg.depth_floor) * depth;
    Vector m(cfg.neurons);
    for (std::size_t j = 0; j < cfg.neurons; ++j) {
      m[j] = cfg.depth_gain * sep * directions(c, j) + depth * offset[j];
    }
    return m;
  }

  /// Per-neuron standard deviation of any class at any layer.
  double neuron_sd(const SynthConfig& cfg, std::size_t j) const {
    const double o = outlier[j] ? cfg.outlier_sigma : 0.0;
    return std::sqrt(cfg.noise_sigma * cfg.noise_sigma + o * o);
  }
};

struct SynthOutput {
  ActivationDataset dataset;
  SynthTruth truth;
};

inline SynthOutput generate_with_truth(const SynthConfig& cfg) {
  cfg.validate();
  const std::size_t C = cfg.classes, N = cfg.neurons, E = cfg.embed_dim, L = cfg.layers;
  SynthOutput out;
  SynthTruth& truth = out.truth;
  Rng rng = Rng::derived(cfg.seed, 0);

  // Orthonormal text embeddings by Gram-Schmidt on Gaussian draws.
  truth.text = Matrix(C, E);
  for (std::size_t c = 0; c < C; ++c) {
    auto row = truth.text.row(c);
    double n = 0.0;
    while (n < 1e-8) {
      for (double& v : row) v = rng.normal();
      for (std::size_t p = 0; p < c; ++p) {
        const auto prev = truth.text.row(p);
        const double proj = dot(row, prev);
        for (std::size_t e = 0; e < E; ++e) row[e] -= proj * prev[e];
      }
      n = norm2(row);
    }
    for (double& v : row) v /= n;
  }

  Matrix map(N, E);
  for (double& v : map.flat()) v = rng.normal();
  truth.directions = Matrix(C, N);
  for (std::size_t c = 0; c < C; ++c) {
    const Vector proj = affine(map, Vector(N, 0.0), truth.text.row(c));
    const double n = norm2(proj);
    for (std::size_t j = 0; j < N; ++j) truth.directions(c, j) = cfg.mean_norm * proj[j] / n;
  }

  truth.offset.resize(N);
  for (double& v : truth.offset) v = rng.normal(0.0, cfg.offset_sigma);

  std::vector<std::size_t> order(N);
  for (std::size_t j = 0; j < N; ++j) order[j] = j;
  rng.shuffle(order);
  truth.outlier.assign(N, 0);
  for (std::size_t k = 0; k < cfg.outlier_neurons; ++k) truth.outlier[order[k]] = 1;

  ActivationDataset& ds = out.dataset;
  const std::size_t S = cfg.samples;
  ds.labels.resize(S);
  for (std::size_t k = 0; k < S; ++k) ds.labels[k] = static_cast<std::uint32_t>(k % C);
  for (std::size_t c = 0; c < C; ++c) {
    ds.class_names.push_back("class_" + std::to_string(c));
    ds.descriptions.push_back("a photo of a class_" + std::to_string(c));
  }
  ds.text_embeddings = truth.text;

  // Per-class rank r = k / C: first test_per_class to test, next
  // calibration_per_class to calibration, remainder to train.
  for (std::size_t k = 0; k < S; ++k) {
    const std::size_t r = k / C;
    if (r < cfg.test_per_class) {
      ds.splits.test.push_back(k);
    } else if (r < cfg.test_per_class + cfg.calibration_per_class) {
      ds.splits.calibration.push_back(k);
    } else {
      ds.splits.train.push_back(k);
    }
  }

  ds.layers.resize(L);
  for (std::size_t i = 1; i <= L; ++i) {
    Rng lr = Rng::derived(cfg.seed, i);
    Matrix act(S, N);
    std::vector<Vector> means(C);
    for (std::size_t c = 0; c < C; ++c) means[c] = truth.class_mean(cfg, c, i);
    for (std::size_t k = 0; k < S; ++k) {
      const Vector& mean = means[ds.labels[k]];
      auto row = act.row(k);
      for (std::size_t j = 0; j < N; ++j) {
        double v = mean[j] + cfg.noise_sigma * lr.normal();
        if (truth.outlier[j]) v += cfg.outlier_sigma * lr.normal();
        row[j] = v;
      }
    }
    ds.layers[i - 1] = std::move(act);
  }
  return out;
}

inline ActivationDataset generate(const SynthConfig& cfg) {
  return generate_with_truth(cfg).dataset;
}

}  // namespace exitrate
