#pragma once

// Numeric foundation: dense vectors/matrices, a portable seeded RNG,
// Gaussian log-density in bits, cosine similarity, a small feed-forward
// network with a hand-derived backward pass, and Adam.
//
// All math is double precision. Nothing here allocates behind the caller's
// back except the returned values and the explicit caches.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "exitrate/errors.hpp"

namespace exitrate {

using Vector = std::vector<double>;

/// Variances are clamped from below at this value everywhere (sampled and predicted).
inline constexpr double kVarFloor = 1e-6;

inline constexpr double kLn2 = std::numbers::ln2;

/// Row-major dense matrix.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("Matrix: element count " + std::to_string(data_.size()) +
                       " != rows*cols " + std::to_string(rows_ * cols_));
    }
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<double> flat() noexcept { return data_; }
  std::span<const double> flat() const noexcept { return data_; }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// Random numbers
//
// std::mt19937_64 output is fully specified by the standard, but the std
// distributions are not, so uniforms/normals/shuffles are derived here to keep
// generated data identical across standard library implementations.

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Independent stream for a (seed, a, b) triple, e.g. (seed, layer).
  static Rng derived(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
    std::uint64_t s = seed;
    s = mix(s ^ (a + 0x9e3779b97f4a7c15ULL));
    s = mix(s ^ (b + 0xbf58476d1ce4e5b9ULL));
    return Rng(s);
  }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) return 0;
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  /// Standard normal (Marsaglia polar method).
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double f = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * f;
    has_spare_ = true;
    return u * f;
  }

  double normal(double mean, double sd) { return mean + sd * normal(); }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {  // splitmix64 finalizer
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// ---------------------------------------------------------------------------
// Basic vector ops

inline bool all_finite(std::span<const double> v) noexcept {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

inline void require_finite(std::span<const double> v, const char* what) {
  if (!all_finite(v)) throw NumericError(std::string(what) + ": non-finite value");
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  detail::require_same(a.size(), b.size(), "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

/// y = W x + b
inline Vector affine(const Matrix& w, std::span<const double> b, std::span<const double> x) {
  detail::require_same(w.cols(), x.size(), "affine input");
  detail::require_same(w.rows(), b.size(), "affine bias");
  Vector y(b.begin(), b.end());
  for (std::size_t r = 0; r < w.rows(); ++r) {
    const auto wr = w.row(r);
    double s = 0.0;
    for (std::size_t c = 0; c < wr.size(); ++c) s += wr[c] * x[c];
    y[r] += s;
  }
  return y;
}

// ---------------------------------------------------------------------------
// Gaussian negative log-likelihood in bits

/// -log2 N(x | mu, diag(var)), summed over dimensions.
inline double gaussian_nll_bits(std::span<const double> x, std::span<const double> mu,
                                std::span<const double> var) {
  detail::require_same(x.size(), mu.size(), "gaussian_nll_bits mu");
  detail::require_same(x.size(), var.size(), "gaussian_nll_bits var");
  constexpr double two_pi = 2.0 * std::numbers::pi;
  double nats = 0.0;
  for (std::size_t j = 0; j < x.size(); ++j) {
    if (!(var[j] >= kVarFloor)) {
      throw NumericError("gaussian_nll_bits: variance " + std::to_string(var[j]) +
                         " below floor at dim " + std::to_string(j));
    }
    const double d = x[j] - mu[j];
    nats += 0.5 * std::log(two_pi * var[j]) + d * d / (2.0 * var[j]);
  }
  const double bits = nats / kLn2;
  if (!std::isfinite(bits)) throw NumericError("gaussian_nll_bits: non-finite result");
  return bits;
}

struct GaussianNllGrad {
  double value = 0.0;
  Vector d_x;
  Vector d_mu;
  Vector d_var;
};

/// Value and partial derivatives of gaussian_nll_bits.
inline GaussianNllGrad gaussian_nll_bits_grad(std::span<const double> x,
                                              std::span<const double> mu,
                                              std::span<const double> var) {
  GaussianNllGrad g;
  g.value = gaussian_nll_bits(x, mu, var);
  const std::size_t n = x.size();
  g.d_x.resize(n);
  g.d_mu.resize(n);
  g.d_var.resize(n);
  for (std::size_t j = 0; j < n; ++j) {
    const double d = x[j] - mu[j];
    g.d_x[j] = d / (var[j] * kLn2);
    g.d_mu[j] = -g.d_x[j];
    g.d_var[j] = (0.5 / var[j] - d * d / (2.0 * var[j] * var[j])) / kLn2;
  }
  return g;
}

// ---------------------------------------------------------------------------
// Cosine similarity

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  detail::require_same(a.size(), b.size(), "cosine_similarity");
  const double na = norm2(a);
  const double nb = norm2(b);
  if (!(na > 0.0) || !(nb > 0.0)) throw NumericError("cosine_similarity: zero-norm input");
  const double c = dot(a, b) / (na * nb);
  if (!std::isfinite(c)) throw NumericError("cosine_similarity: non-finite result");
  return std::clamp(c, -1.0, 1.0);
}

/// d CS(a, b) / d b
inline Vector cosine_similarity_grad_b(std::span<const double> a, std::span<const double> b) {
  const double na = norm2(a);
  const double nb = norm2(b);
  if (!(na > 0.0) || !(nb > 0.0)) throw NumericError("cosine_similarity: zero-norm input");
  const double c = dot(a, b) / (na * nb);
  Vector g(b.size());
  for (std::size_t i = 0; i < b.size(); ++i) {
    g[i] = a[i] / (na * nb) - c * b[i] / (nb * nb);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Feed-forward network

enum class Activation { identity, relu, tanh };

inline const char* to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
  }
  return "?";
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "identity") return Activation::identity;
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  throw FormatError("unknown activation '" + s + "'");
}

struct DenseLayer {
  Matrix weight;  // out x in
  Vector bias;    // out
  Activation activation = Activation::identity;

  std::size_t in_dim() const noexcept { return weight.cols(); }
  std::size_t out_dim() const noexcept { return weight.rows(); }
  std::size_t parameter_count() const noexcept { return weight.size() + bias.size(); }
};

/// Per-layer inputs and pre-activations recorded by Mlp::forward.
struct ForwardCache {
  std::vector<Vector> inputs;
  std::vector<Vector> pre_activations;

  bool empty() const noexcept { return inputs.empty(); }
  void clear() {
    inputs.clear();
    pre_activations.clear();
  }
};

struct MlpGradients {
  std::vector<Matrix> weight;
  std::vector<Vector> bias;

  void fill(double v) {
    for (auto& w : weight) std::fill(w.flat().begin(), w.flat().end(), v);
    for (auto& b : bias) std::fill(b.begin(), b.end(), v);
  }
  void scale(double s) {
    for (auto& w : weight)
      for (double& x : w.flat()) x *= s;
    for (auto& b : bias)
      for (double& x : b) x *= s;
  }
  std::vector<std::span<const double>> blocks() const {
    std::vector<std::span<const double>> out;
    for (std::size_t k = 0; k < weight.size(); ++k) {
      out.emplace_back(weight[k].flat());
      out.emplace_back(bias[k]);
    }
    return out;
  }
};

class Mlp {
 public:
  Mlp() = default;

  explicit Mlp(std::vector<DenseLayer> layers) : layers_(std::move(layers)) { validate(); }

  /// He-normal for layers followed by relu, Xavier-normal otherwise; zero biases.
  static Mlp random(std::span<const std::size_t> widths, Activation hidden, Activation output,
                    Rng& rng) {
    if (widths.size() < 2) throw UsageError("Mlp::random: need at least input and output width");
    std::vector<DenseLayer> layers;
    for (std::size_t k = 0; k + 1 < widths.size(); ++k) {
      const std::size_t in = widths[k];
      const std::size_t out = widths[k + 1];
      const bool last = k + 2 == widths.size();
      DenseLayer layer;
      layer.activation = last ? output : hidden;
      layer.weight = Matrix(out, in);
      layer.bias.assign(out, 0.0);
      const double sd = layer.activation == Activation::relu
                            ? std::sqrt(2.0 / static_cast<double>(in))
                            : std::sqrt(2.0 / static_cast<double>(in + out));
      for (double& w : layer.weight.flat()) w = rng.normal(0.0, sd);
      layers.push_back(std::move(layer));
    }
    return Mlp(std::move(layers));
  }

  std::size_t in_dim() const noexcept { return layers_.empty() ? 0 : layers_.front().in_dim(); }
  std::size_t out_dim() const noexcept { return layers_.empty() ? 0 : layers_.back().out_dim(); }
  std::size_t depth() const noexcept { return layers_.size(); }

  std::size_t parameter_count() const noexcept {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.parameter_count();
    return n;
  }

  const std::vector<DenseLayer>& layers() const noexcept { return layers_; }
  std::vector<DenseLayer>& layers() noexcept { return layers_; }

  Vector forward(std::span<const double> x) const {
    return run(x, nullptr);
  }

  Vector forward(std::span<const double> x, ForwardCache& cache) const {
    cache.clear();
    return run(x, &cache);
  }

  /// Accumulates parameter gradients into `grads` and returns d loss / d input.
  Vector backward(const ForwardCache& cache, std::span<const double> upstream,
                  MlpGradients& grads) const {
    if (cache.empty() || cache.inputs.size() != layers_.size()) {
      throw UsageError("Mlp::backward: missing forward cache");
    }
    detail::require_same(upstream.size(), out_dim(), "Mlp::backward upstream");
    if (grads.weight.size() != layers_.size()) grads = zero_gradients();

    Vector delta(upstream.begin(), upstream.end());
    for (std::size_t k = layers_.size(); k-- > 0;) {
      const DenseLayer& layer = layers_[k];
      const Vector& pre = cache.pre_activations[k];
      for (std::size_t r = 0; r < delta.size(); ++r) {
        switch (layer.activation) {
          case Activation::identity: break;
          case Activation::relu: delta[r] = pre[r] > 0.0 ? delta[r] : 0.0; break;
          case Activation::tanh: {
            const double t = std::tanh(pre[r]);
            delta[r] *= 1.0 - t * t;
            break;
          }
        }
      }
      const Vector& in = cache.inputs[k];
      Matrix& gw = grads.weight[k];
      Vector& gb = grads.bias[k];
      for (std::size_t r = 0; r < layer.out_dim(); ++r) {
        gb[r] += delta[r];
        auto gr = gw.row(r);
        for (std::size_t c = 0; c < in.size(); ++c) gr[c] += delta[r] * in[c];
      }
      Vector next(layer.in_dim(), 0.0);
      for (std::size_t r = 0; r < layer.out_dim(); ++r) {
        const auto wr = layer.weight.row(r);
        for (std::size_t c = 0; c < next.size(); ++c) next[c] += wr[c] * delta[r];
      }
      delta = std::move(next);
    }
    return delta;
  }

  MlpGradients zero_gradients() const {
    MlpGradients g;
    for (const auto& l : layers_) {
      g.weight.emplace_back(l.weight.rows(), l.weight.cols());
      g.bias.emplace_back(l.bias.size(), 0.0);
    }
    return g;
  }

  /// Weight then bias for each layer, in layer order.
  std::vector<std::span<double>> parameter_blocks() {
    std::vector<std::span<double>> out;
    for (auto& l : layers_) {
      out.emplace_back(l.weight.flat());
      out.emplace_back(l.bias);
    }
    return out;
  }

  bool operator==(const Mlp& o) const {
    if (layers_.size() != o.layers_.size()) return false;
    for (std::size_t k = 0; k < layers_.size(); ++k) {
      if (layers_[k].weight != o.layers_[k].weight || layers_[k].bias != o.layers_[k].bias ||
          layers_[k].activation != o.layers_[k].activation)
        return false;
    }
    return true;
  }

 private:
  void validate() const {
    for (std::size_t k = 0; k < layers_.size(); ++k) {
      detail::require_same(layers_[k].bias.size(), layers_[k].out_dim(), "Mlp layer bias");
      if (k > 0) {
        detail::require_same(layers_[k].in_dim(), layers_[k - 1].out_dim(), "Mlp layer chain");
      }
    }
  }

  Vector run(std::span<const double> x, ForwardCache* cache) const {
    detail::require_same(x.size(), in_dim(), "Mlp::forward input");
    Vector h(x.begin(), x.end());
    for (const auto& layer : layers_) {
      Vector pre = affine(layer.weight, layer.bias, h);
      Vector out = pre;
      for (double& v : out) {
        switch (layer.activation) {
          case Activation::identity: break;
          case Activation::relu: v = v > 0.0 ? v : 0.0; break;
          case Activation::tanh: v = std::tanh(v); break;
        }
      }
      if (cache) {
        cache->inputs.push_back(std::move(h));
        cache->pre_activations.push_back(std::move(pre));
      }
      h = std::move(out);
    }
    require_finite(h, "Mlp::forward");
    return h;
  }

  std::vector<DenseLayer> layers_;
};

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction over a fixed list of parameter blocks.
/// Moments are sized on the first step; later steps must present the same shapes.
class AdamState {
 public:
  AdamState() = default;
  explicit AdamState(AdamConfig cfg) : cfg_(cfg) {}

  double lr() const noexcept { return cfg_.lr; }
  void set_lr(double lr) noexcept { cfg_.lr = lr; }
  const AdamConfig& config() const noexcept { return cfg_; }
  std::int64_t step_count() const noexcept { return t_; }
  const std::vector<Vector>& first_moments() const noexcept { return m_; }
  const std::vector<Vector>& second_moments() const noexcept { return v_; }

  void step(std::span<const std::span<double>> params,
            std::span<const std::span<const double>> grads) {
    detail::require_same(params.size(), grads.size(), "adam_step blocks");
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.emplace_back(p.size(), 0.0);
        v_.emplace_back(p.size(), 0.0);
      }
    }
    detail::require_same(params.size(), m_.size(), "adam_step state blocks");
    for (std::size_t b = 0; b < params.size(); ++b) {
      detail::require_same(params[b].size(), grads[b].size(), "adam_step block");
      detail::require_same(params[b].size(), m_[b].size(), "adam_step moment");
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t b = 0; b < params.size(); ++b) {
      auto p = params[b];
      auto g = grads[b];
      auto& m = m_[b];
      auto& v = v_[b];
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        p[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

 private:
  AdamConfig cfg_;
  std::int64_t t_ = 0;
  std::vector<Vector> m_;
  std::vector<Vector> v_;
};

}  // namespace exitrate
