#pragma once

// Shared helpers for the unit and acceptance suites: scratch directories,
// random datasets and the central-difference gradient oracle.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <unistd.h>

#include "exitrate/actstore.hpp"
#include "exitrate/binio.hpp"
#include "exitrate/numkernel.hpp"
#include "exitrate/tgem.hpp"

namespace testsupport {

using namespace exitrate;

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::uint64_t counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("exitrate_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

inline Vector random_vector(Rng& rng, std::size_t n, double sd = 1.0) {
  Vector v(n);
  for (double& x : v) x = rng.normal(0.0, sd);
  return v;
}

inline Matrix random_matrix(Rng& rng, std::size_t r, std::size_t c, double sd = 1.0) {
  Matrix m(r, c);
  for (double& x : m.flat()) x = rng.normal(0.0, sd);
  return m;
}

inline Matrix unit_rows(Rng& rng, std::size_t r, std::size_t c) {
  Matrix m = random_matrix(rng, r, c);
  for (std::size_t i = 0; i < r; ++i) {
    auto row = m.row(i);
    const double n = norm2(row);
    for (double& x : row) x /= n;
  }
  return m;
}

/// Small valid dataset: labels cycle through classes, every sample in calibration
/// unless `split_thirds`, in which case per-class rank r goes to split r % 3.
inline ActivationDataset random_dataset(Rng& rng, std::size_t classes, std::size_t layers,
                                        std::size_t neurons, std::size_t embed_dim,
                                        std::size_t samples, bool split_thirds = false) {
  ActivationDataset ds;
  for (std::size_t c = 0; c < classes; ++c) {
    ds.class_names.push_back("c" + std::to_string(c));
    ds.descriptions.push_back("a photo of c" + std::to_string(c));
  }
  ds.text_embeddings = unit_rows(rng, classes, embed_dim);
  for (std::size_t k = 0; k < samples; ++k) {
    ds.labels.push_back(static_cast<std::uint32_t>(k % classes));
    if (!split_thirds) {
      ds.splits.calibration.push_back(k);
    } else if (k / classes % 3 == 0) {
      ds.splits.calibration.push_back(k);
    } else if (k / classes % 3 == 1) {
      ds.splits.train.push_back(k);
    } else {
      ds.splits.test.push_back(k);
    }
  }
  for (std::size_t i = 0; i < layers; ++i) {
    Matrix m(samples, neurons);
    for (std::size_t k = 0; k < samples; ++k) {
      for (std::size_t j = 0; j < neurons; ++j) {
        m(k, j) = rng.normal(0.3 * static_cast<double>(ds.labels[k]), 1.0 + 0.1 * static_cast<double>(j % 3));
      }
    }
    ds.layers.push_back(std::move(m));
  }
  return ds;
}

inline std::vector<char> file_bytes(const std::filesystem::path& p) { return binio::read_file(p); }

/// Norm-wise relative error ||a - b|| / max(||a|| + ||b||, tiny).
inline double relative_error(const Vector& a, const Vector& b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max(std::sqrt(na) + std::sqrt(nb), 1e-300);
}

/// Central differences of `f` with respect to every entry of `params`.
inline Vector numeric_gradient(const std::vector<std::span<double>>& params,
                               const std::function<double()>& f, double h = 1e-5) {
  Vector g;
  for (auto block : params) {
    for (double& p : block) {
      const double keep = p;
      p = keep + h;
      const double up = f();
      p = keep - h;
      const double down = f();
      p = keep;
      g.push_back((up - down) / (2.0 * h));
    }
  }
  return g;
}

inline Vector flatten(const std::vector<std::span<const double>>& blocks) {
  Vector v;
  for (auto b : blocks) v.insert(v.end(), b.begin(), b.end());
  return v;
}

struct GradCheck {
  double rel_error = 0.0;
  double loss = 0.0;
};

/// Compares loss_and_grads against central differences on a random exit module
/// and a random batch drawn from `classes` text embeddings.
inline GradCheck check_tgem_gradients(std::uint64_t seed, const LossConfig& cfg,
                                      bool normalize = true) {
  Rng rng(seed);
  const std::size_t n = 6 + rng.below(5), e = 3 + rng.below(3), classes = 3, batch = 5;
  ModuleShape shape;
  shape.k = e;
  shape.hidden = 4 + rng.below(4);
  shape.normalize_projection = normalize;
  ExitModule em = ExitModule::create(1, n, e, shape, rng);
  em.config = cfg;
  // Perturb everything so biases are non-zero and relu units sit away from their kinks.
  for (auto block : tgem_detail::parameter_blocks(em))
    for (double& p : block) p += rng.normal(0.0, 0.05);

  const Matrix text = unit_rows(rng, classes, e);
  Matrix act = random_matrix(rng, batch, n);
  std::vector<TrainingPair> pairs;
  for (std::size_t b = 0; b < batch; ++b) pairs.push_back({act.row(b), text.row(b % classes)});

  const LossGrads g = loss_and_grads(em, pairs, cfg);
  std::vector<std::span<const double>> analytic_blocks = g.jumper.blocks();
  for (auto b : g.psi.blocks()) analytic_blocks.push_back(b);
  const Vector analytic = flatten(analytic_blocks);
  const Vector numeric = numeric_gradient(tgem_detail::parameter_blocks(em), [&] {
    return loss_and_grads(em, pairs, cfg, false).loss;
  });
  return {relative_error(analytic, numeric), g.loss};
}

}  // namespace testsupport
