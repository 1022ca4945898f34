#pragma once

// Learning-based estimation for one exit layer.
//
//   jumper: activation (N) -> projection (K)          N -> H -> K
//   psi:    text embedding (E) -> (mean, log-var)     E -> H -> 2K
//
// The rate of an activation under a class is the Gaussian NLL in bits of the
// projection under psi(text of that class). Training pairs each activation
// with its own class's text embedding and minimizes
//   [use_rate] * rate + [use_cosine] * (1 - CS(text, projection)).
//
// By default the projection is L2-normalized, predicted variances are bounded
// below by `pred_var_floor`, and the training rate is taken per projected
// dimension. Without these the rate term can always be lowered by shrinking
// or merging all projections, which wipes out the class structure the cosine
// term is building.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "exitrate/actstore.hpp"
#include "exitrate/binio.hpp"
#include "exitrate/errors.hpp"
#include "exitrate/numkernel.hpp"
#include "exitrate/sampler.hpp"

namespace exitrate {

struct LossConfig {
  bool use_rate = true;
  bool use_cosine = true;
  std::size_t epochs = 120;
  double initial_lr = 1e-4;
  std::size_t patience = 10;
  double decay = 0.5;
  double min_lr = 1e-6;
  std::size_t batch_size = 16;
  bool rate_per_dimension = true;
  double holdout_fraction = 0.1;
  std::uint64_t seed = 0;

  bool operator==(const LossConfig&) const = default;

  void validate() const {
    if (!use_rate && !use_cosine) throw UsageError("loss: at least one of rate/cosine must be enabled");
    if (batch_size == 0) throw UsageError("loss: batch size must be >= 1");
    if (!(initial_lr > 0.0)) throw UsageError("loss: learning rate must be > 0");
    if (!(decay > 0.0 && decay <= 1.0)) throw UsageError("loss: plateau decay must be in (0, 1]");
    if (!(holdout_fraction >= 0.0 && holdout_fraction < 1.0)) {
      throw UsageError("loss: holdout fraction must be in [0, 1)");
    }
  }
};

inline const char* loss_name(const LossConfig& c) {
  return c.use_rate && c.use_cosine ? "both" : c.use_rate ? "rate" : "cosine";
}

inline constexpr double kPredictedVarFloor = 1e-2;

struct ModuleShape {
  std::size_t k = 32;
  std::optional<std::size_t> hidden;  // default 2K; 0 means a single affine layer
  bool normalize_projection = true;
  double pred_var_floor = kPredictedVarFloor;

  std::size_t hidden_or_default() const { return hidden.value_or(2 * k); }
};

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double train_rate = 0.0;
  double train_cosine = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;

  bool operator==(const EpochLog&) const = default;
};

/// Gaussian parameters predicted for one text embedding.
struct PredictedGaussian {
  Vector mean;
  Vector log_var;
  Vector var;  // exp(log_var) floored
};

struct ExitModule {
  std::size_t layer = 0;
  std::size_t k = 0;
  std::size_t hidden = 0;
  bool normalize_projection = true;
  double pred_var_floor = kPredictedVarFloor;
  Mlp jumper;
  Mlp psi;
  LossConfig config;
  std::vector<EpochLog> log;

  std::size_t neurons() const noexcept { return jumper.in_dim(); }
  std::size_t embed_dim() const noexcept { return psi.in_dim(); }

  static ExitModule create(std::size_t layer, std::size_t neurons, std::size_t embed_dim,
                           const ModuleShape& shape, Rng& rng, const LossConfig& cfg = {}) {
    if (shape.k == 0) throw UsageError("exit module: K must be >= 1");
    ExitModule em;
    em.layer = layer;
    em.k = shape.k;
    em.hidden = shape.hidden_or_default();
    em.normalize_projection = shape.normalize_projection;
    em.pred_var_floor = shape.pred_var_floor;
    em.config = cfg;
    const auto widths = [&](std::size_t in, std::size_t out) {
      return em.hidden == 0 ? std::vector<std::size_t>{in, out}
                            : std::vector<std::size_t>{in, em.hidden, out};
    };
    const auto jw = widths(neurons, shape.k);
    const auto pw = widths(embed_dim, 2 * shape.k);
    em.jumper = Mlp::random(jw, Activation::relu, Activation::identity, rng);
    em.psi = Mlp::random(pw, Activation::relu, Activation::identity, rng);
    em.validate();
    return em;
  }

  void validate() const {
    if (jumper.out_dim() != k) throw ShapeError("exit module: jumper output != K");
    if (psi.out_dim() != 2 * k) throw ShapeError("exit module: psi output != 2K");
    if (!(pred_var_floor >= kVarFloor)) {
      throw UsageError("exit module: predicted variance floor below " + std::to_string(kVarFloor));
    }
    if (config.use_cosine && k != embed_dim()) {
      throw UsageError("exit module: cosine loss needs K == embed_dim (K=" + std::to_string(k) +
                       ", E=" + std::to_string(embed_dim()) + ")");
    }
  }

  Vector project(std::span<const double> act) const { return finish_projection(jumper.forward(act)); }

  Vector finish_projection(Vector z) const {
    if (!normalize_projection) return z;
    const double n = norm2(z);
    if (n == 0.0) return z;  // every jumper unit dead: stays at the origin
    for (double& v : z) v /= n;
    return z;
  }

  PredictedGaussian predict_gaussian(std::span<const double> text) const {
    return split_head(psi.forward(text));
  }

  PredictedGaussian split_head(const Vector& out) const {
    PredictedGaussian g;
    g.mean.assign(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(k));
    g.log_var.assign(out.begin() + static_cast<std::ptrdiff_t>(k), out.end());
    g.var.resize(k);
    for (std::size_t i = 0; i < k; ++i) g.var[i] = std::max(std::exp(g.log_var[i]), pred_var_floor);
    return g;
  }

  bool operator==(const ExitModule&) const = default;
};

inline std::size_t count_additional_parameters(const ExitModule& em) {
  return em.jumper.parameter_count() + em.psi.parameter_count();
}

/// Rate in bits of `act` under the Gaussian that psi predicts from `text`.
inline double forward_rate(const ExitModule& em, std::span<const double> act,
                           std::span<const double> text) {
  detail::require_same(act.size(), em.neurons(), "forward_rate activation");
  detail::require_same(text.size(), em.embed_dim(), "forward_rate text embedding");
  const Vector proj = em.project(act);
  const PredictedGaussian g = em.predict_gaussian(text);
  return gaussian_nll_bits(proj, g.mean, g.var);
}

struct TrainingPair {
  std::span<const double> activation;
  std::span<const double> text;
};

struct LossGrads {
  double loss = 0.0;     // batch mean of the enabled terms
  double rate = 0.0;     // batch mean forward_rate in bits (always computed)
  double cosine = 0.0;   // batch mean 1 - CS (0 when K != E)
  MlpGradients jumper;
  MlpGradients psi;
};

/// Batch-mean loss and exact gradients w.r.t. jumper and psi parameters.
inline LossGrads loss_and_grads(const ExitModule& em, std::span<const TrainingPair> batch,
                                const LossConfig& cfg, bool want_grads = true) {
  cfg.validate();
  if (batch.empty()) throw UsageError("loss_and_grads: empty batch");
  if (cfg.use_cosine && em.k != em.embed_dim()) {
    throw UsageError("cosine loss needs K == embed_dim (K=" + std::to_string(em.k) +
                     ", E=" + std::to_string(em.embed_dim()) + ")");
  }
  LossGrads out;
  if (want_grads) {
    out.jumper = em.jumper.zero_gradients();
    out.psi = em.psi.zero_gradients();
  }
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  const double rate_scale = cfg.rate_per_dimension ? 1.0 / static_cast<double>(em.k) : 1.0;

  // psi depends only on the text embedding; evaluate once per distinct text.
  struct TextEntry {
    const double* key;
    ForwardCache cache;
    PredictedGaussian head;
    Vector upstream;
  };
  std::vector<TextEntry> texts;
  auto text_entry = [&](std::span<const double> t) -> TextEntry& {
    for (auto& e : texts)
      if (e.key == t.data()) return e;
    detail::require_same(t.size(), em.embed_dim(), "loss_and_grads text embedding");
    TextEntry e;
    e.key = t.data();
    e.head = em.split_head(em.psi.forward(t, e.cache));
    e.upstream.assign(2 * em.k, 0.0);
    texts.push_back(std::move(e));
    return texts.back();
  };

  ForwardCache jcache;
  for (const auto& pair : batch) {
    detail::require_same(pair.activation.size(), em.neurons(), "loss_and_grads activation");
    TextEntry& te = text_entry(pair.text);
    const Vector raw = em.jumper.forward(pair.activation, jcache);
    const Vector proj = em.finish_projection(raw);
    const auto nll = gaussian_nll_bits_grad(proj, te.head.mean, te.head.var);
    out.rate += nll.value * inv_b;

    Vector d_proj(em.k, 0.0);
    if (cfg.use_rate) {
      const double w = inv_b * rate_scale;
      out.loss += nll.value * w;
      for (std::size_t i = 0; i < em.k; ++i) {
        d_proj[i] += nll.d_x[i] * w;
        te.upstream[i] += nll.d_mu[i] * w;
        // var = exp(s) above the floor, constant below it.
        const double e = std::exp(te.head.log_var[i]);
        if (e > em.pred_var_floor) te.upstream[em.k + i] += nll.d_var[i] * e * w;
      }
    }
    if (em.k == em.embed_dim()) {
      const bool dead = norm2(proj) == 0.0;
      const double cs = dead ? 0.0 : cosine_similarity(pair.text, proj);
      out.cosine += (1.0 - cs) * inv_b;
      if (cfg.use_cosine) out.loss += (1.0 - cs) * inv_b;
      if (cfg.use_cosine && !dead) {
        const Vector g = cosine_similarity_grad_b(pair.text, proj);
        for (std::size_t i = 0; i < em.k; ++i) d_proj[i] -= g[i] * inv_b;
      }
    }
    if (want_grads) {
      if (em.normalize_projection) {
        // y = z / |z|  =>  dL/dz = (dL/dy - y (y . dL/dy)) / |z|; zero subgradient at z = 0
        const double n = norm2(raw);
        const double yg = dot(proj, d_proj);
        for (std::size_t i = 0; i < em.k; ++i) d_proj[i] = n == 0.0 ? 0.0 : (d_proj[i] - proj[i] * yg) / n;
      }
      em.jumper.backward(jcache, d_proj, out.jumper);
    }
  }
  if (want_grads && cfg.use_rate) {
    for (const auto& te : texts) em.psi.backward(te.cache, te.upstream, out.psi);
  }
  if (!std::isfinite(out.loss)) throw NumericError("loss_and_grads: non-finite loss");
  return out;
}

namespace tgem_detail {

inline std::vector<std::span<double>> parameter_blocks(ExitModule& em) {
  auto blocks = em.jumper.parameter_blocks();
  for (auto b : em.psi.parameter_blocks()) blocks.push_back(b);
  return blocks;
}

inline std::vector<std::span<const double>> gradient_blocks(const LossGrads& g) {
  auto blocks = g.jumper.blocks();
  for (auto b : g.psi.blocks()) blocks.push_back(b);
  return blocks;
}

inline std::vector<TrainingPair> pairs(const ActivationDataset& ds, const Matrix& act,
                                       std::span<const std::size_t> idx) {
  std::vector<TrainingPair> out;
  out.reserve(idx.size());
  for (std::size_t k : idx) out.push_back({act.row(k), ds.text_embedding(ds.labels[k])});
  return out;
}

}  // namespace tgem_detail

/// Mean loss over `pairs`, evaluated in chunks without gradients.
inline double evaluate_loss(const ExitModule& em, std::span<const TrainingPair> pairs,
                            const LossConfig& cfg) {
  double total = 0.0;
  constexpr std::size_t chunk = 256;
  for (std::size_t s = 0; s < pairs.size(); s += chunk) {
    const auto part = pairs.subspan(s, std::min(chunk, pairs.size() - s));
    total += loss_and_grads(em, part, cfg, false).loss * static_cast<double>(part.size());
  }
  return total / static_cast<double>(pairs.size());
}

/// Trains jumper + psi for one layer on the train split. The tail
/// `holdout_fraction` of the split (in split order) drives the plateau
/// scheduler; the rest is shuffled each epoch and fed in minibatches.
inline ExitModule train_exit_module(const ActivationDataset& ds, std::size_t layer,
                                    const LossConfig& cfg, const ModuleShape& shape = {}) {
  cfg.validate();
  const Matrix& act = ds.layer(layer);
  const auto& train = ds.split(SplitName::train);
  if (train.empty()) throw InvariantError("train split is empty");
  if (cfg.use_cosine && shape.k != ds.embed_dim()) {
    throw UsageError("cosine loss needs K == embed_dim (K=" + std::to_string(shape.k) +
                     ", E=" + std::to_string(ds.embed_dim()) + ")");
  }

  Rng init_rng = Rng::derived(cfg.seed, layer, 1);
  Rng order_rng = Rng::derived(cfg.seed, layer, 2);
  ExitModule em = ExitModule::create(layer, act.cols(), ds.embed_dim(), shape, init_rng, cfg);
  em.validate();

  const auto n_hold = static_cast<std::size_t>(cfg.holdout_fraction * static_cast<double>(train.size()));
  const std::size_t n_fit = train.size() - n_hold;
  if (n_fit == 0) throw InvariantError("train split too small after holdout");
  std::vector<std::size_t> fit_idx(train.begin(), train.begin() + static_cast<std::ptrdiff_t>(n_fit));
  const std::vector<std::size_t> hold_idx(train.begin() + static_cast<std::ptrdiff_t>(n_fit), train.end());
  const auto hold_pairs = tgem_detail::pairs(ds, act, hold_idx);

  AdamState adam(AdamConfig{.lr = cfg.initial_lr});
  double best = std::numeric_limits<double>::infinity();
  std::size_t bad_epochs = 0;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    order_rng.shuffle(fit_idx);
    const auto fit_pairs = tgem_detail::pairs(ds, act, fit_idx);
    EpochLog entry;
    entry.epoch = epoch;
    entry.lr = adam.lr();
    for (std::size_t s = 0; s < fit_pairs.size(); s += cfg.batch_size) {
      const auto batch = std::span<const TrainingPair>(fit_pairs).subspan(
          s, std::min(cfg.batch_size, fit_pairs.size() - s));
      LossGrads g = loss_and_grads(em, batch, cfg);
      const double w = static_cast<double>(batch.size());
      entry.train_loss += g.loss * w;
      entry.train_rate += g.rate * w;
      entry.train_cosine += g.cosine * w;
      auto params = tgem_detail::parameter_blocks(em);
      auto grads = tgem_detail::gradient_blocks(g);
      adam.step(params, grads);
    }
    const double n = static_cast<double>(fit_pairs.size());
    entry.train_loss /= n;
    entry.train_rate /= n;
    entry.train_cosine /= n;
    entry.val_loss = hold_pairs.empty() ? entry.train_loss : evaluate_loss(em, hold_pairs, cfg);
    if (!std::isfinite(entry.train_loss) || !std::isfinite(entry.val_loss)) {
      throw NumericError("training diverged at layer " + std::to_string(layer) + ", epoch " +
                         std::to_string(epoch) + " (train loss " +
                         std::to_string(entry.train_loss) + ", lr " + std::to_string(adam.lr()) +
                         ")");
    }
    em.log.push_back(entry);

    if (entry.val_loss < best) {
      best = entry.val_loss;
      bad_epochs = 0;
    } else if (++bad_epochs > cfg.patience) {
      adam.set_lr(std::max(adam.lr() * cfg.decay, cfg.min_lr));
      bad_epochs = 0;
    }
  }
  return em;
}

// ---------------------------------------------------------------------------
// Inference

enum class ScoreMode { rate, cosine };

inline const char* to_string(ScoreMode m) { return m == ScoreMode::rate ? "rate" : "cosine"; }

/// psi evaluated once per class text embedding.
struct TgemClassHeads {
  std::vector<PredictedGaussian> heads;
  const Matrix* text = nullptr;
};

inline TgemClassHeads class_heads(const ExitModule& em, const Matrix& all_text_embs) {
  detail::require_same(all_text_embs.cols(), em.embed_dim(), "class_heads text embeddings");
  TgemClassHeads h;
  h.text = &all_text_embs;
  for (std::size_t c = 0; c < all_text_embs.rows(); ++c) {
    h.heads.push_back(em.predict_gaussian(all_text_embs.row(c)));
  }
  return h;
}

/// Per-class scores: rates (lower is better) or cosine similarities (higher is better).
inline Vector tgem_scores(const ExitModule& em, std::span<const double> act,
                          const TgemClassHeads& heads, ScoreMode mode) {
  detail::require_same(act.size(), em.neurons(), "tgem_scores activation");
  const Vector proj = em.project(act);
  Vector s(heads.heads.size());
  for (std::size_t c = 0; c < s.size(); ++c) {
    if (mode == ScoreMode::rate) {
      s[c] = gaussian_nll_bits(proj, heads.heads[c].mean, heads.heads[c].var);
    } else {
      detail::require_same(em.k, heads.text->cols(), "cosine scoring needs K == embed_dim");
      s[c] = norm2(proj) == 0.0 ? 0.0 : cosine_similarity(heads.text->row(c), proj);
    }
  }
  return s;
}

inline std::size_t predict_tgem(const ExitModule& em, std::span<const double> act,
                                const Matrix& all_text_embs, ScoreMode mode) {
  if (all_text_embs.rows() == 0) throw ShapeError("predict_tgem: no classes");
  const Vector s = tgem_scores(em, act, class_heads(em, all_text_embs), mode);
  return mode == ScoreMode::rate ? argmin_lowest(s) : argmax_lowest(s);
}

// ---------------------------------------------------------------------------
// exit_<i>.json + exit_<i>.bin
// .bin order: jumper layers then psi layers; per layer weight (row-major) then bias; float32 LE.

namespace tgem_detail {

inline nlohmann::ordered_json layer_shapes(const Mlp& m) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& l : m.layers()) {
    arr.push_back({{"in", l.in_dim()}, {"out", l.out_dim()}, {"activation", to_string(l.activation)}});
  }
  return arr;
}

inline nlohmann::ordered_json config_json(const LossConfig& c) {
  return {{"use_rate", c.use_rate},       {"use_cosine", c.use_cosine},
          {"epochs", c.epochs},           {"initial_lr", c.initial_lr},
          {"patience", c.patience},       {"decay", c.decay},
          {"min_lr", c.min_lr},           {"batch_size", c.batch_size},
          {"rate_per_dimension", c.rate_per_dimension},
          {"holdout_fraction", c.holdout_fraction}, {"seed", c.seed}};
}

inline Mlp mlp_from_shapes(const nlohmann::json& shapes, std::span<const double> values,
                           std::size_t& offset) {
  std::vector<DenseLayer> layers;
  for (const auto& s : shapes) {
    DenseLayer l;
    const auto in = s.at("in").get<std::size_t>();
    const auto out = s.at("out").get<std::size_t>();
    l.activation = activation_from_string(s.at("activation").get<std::string>());
    if (offset + out * in + out > values.size()) throw SizeMismatchError("exit module: parameter file too short");
    l.weight = Matrix(out, in, Vector(values.begin() + static_cast<std::ptrdiff_t>(offset),
                                      values.begin() + static_cast<std::ptrdiff_t>(offset + out * in)));
    offset += out * in;
    l.bias.assign(values.begin() + static_cast<std::ptrdiff_t>(offset),
                  values.begin() + static_cast<std::ptrdiff_t>(offset + out));
    offset += out;
    layers.push_back(std::move(l));
  }
  return Mlp(std::move(layers));
}

}  // namespace tgem_detail

inline void save_exit_module(const ExitModule& em, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::string stem = "exit_" + std::to_string(em.layer);
  nlohmann::ordered_json j;
  j["version"] = 1;
  j["layer"] = em.layer;
  j["neurons"] = em.neurons();
  j["embed_dim"] = em.embed_dim();
  j["k"] = em.k;
  j["hidden"] = em.hidden;
  j["normalize_projection"] = em.normalize_projection;
  j["pred_var_floor"] = em.pred_var_floor;
  j["parameter_count"] = count_additional_parameters(em);
  j["dtype"] = "f32le";
  j["layout"] = "jumper layers then psi layers; weight row-major then bias";
  j["jumper"] = tgem_detail::layer_shapes(em.jumper);
  j["psi"] = tgem_detail::layer_shapes(em.psi);
  j["config"] = tgem_detail::config_json(em.config);
  auto log = nlohmann::ordered_json::array();
  for (const auto& e : em.log) {
    log.push_back({{"epoch", e.epoch},
                   {"train_loss", e.train_loss},
                   {"train_rate", e.train_rate},
                   {"train_cosine", e.train_cosine},
                   {"val_loss", e.val_loss},
                   {"lr", e.lr}});
  }
  j["log"] = log;
  binio::write_text(dir / (stem + ".json"), j.dump(2) + "\n");

  std::vector<char> bytes;
  for (const Mlp* m : {&em.jumper, &em.psi}) {
    for (const auto& l : m->layers()) {
      binio::append_f32(bytes, l.weight.flat());
      binio::append_f32(bytes, l.bias);
    }
  }
  binio::write_file(dir / (stem + ".bin"), bytes);
}

inline ExitModule load_exit_module(const std::filesystem::path& dir, std::size_t layer) {
  const std::string stem = "exit_" + std::to_string(layer);
  ExitModule em;
  try {
    const auto j = nlohmann::json::parse(binio::read_text(dir / (stem + ".json")));
    em.layer = j.at("layer").get<std::size_t>();
    em.k = j.at("k").get<std::size_t>();
    em.hidden = j.at("hidden").get<std::size_t>();
    em.normalize_projection = j.at("normalize_projection").get<bool>();
    em.pred_var_floor = j.at("pred_var_floor").get<double>();
    const auto& c = j.at("config");
    em.config.use_rate = c.at("use_rate").get<bool>();
    em.config.use_cosine = c.at("use_cosine").get<bool>();
    em.config.epochs = c.at("epochs").get<std::size_t>();
    em.config.initial_lr = c.at("initial_lr").get<double>();
    em.config.patience = c.at("patience").get<std::size_t>();
    em.config.decay = c.at("decay").get<double>();
    em.config.min_lr = c.at("min_lr").get<double>();
    em.config.batch_size = c.at("batch_size").get<std::size_t>();
    em.config.rate_per_dimension = c.at("rate_per_dimension").get<bool>();
    em.config.holdout_fraction = c.at("holdout_fraction").get<double>();
    em.config.seed = c.at("seed").get<std::uint64_t>();
    for (const auto& e : j.at("log")) {
      em.log.push_back({e.at("epoch").get<std::size_t>(), e.at("train_loss").get<double>(),
                        e.at("train_rate").get<double>(), e.at("train_cosine").get<double>(),
                        e.at("val_loss").get<double>(), e.at("lr").get<double>()});
    }
    const auto bytes = binio::read_file(dir / (stem + ".bin"));
    if (bytes.size() % 4 != 0) throw SizeMismatchError(stem + ".bin: size not a multiple of 4");
    const auto values = binio::decode_f32(bytes);
    std::size_t offset = 0;
    em.jumper = tgem_detail::mlp_from_shapes(j.at("jumper"), values, offset);
    em.psi = tgem_detail::mlp_from_shapes(j.at("psi"), values, offset);
    if (offset != values.size()) throw SizeMismatchError(stem + ".bin: trailing parameters");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(stem + ".json: " + e.what());
  }
  em.validate();
  return em;
}

}  // namespace exitrate
