#pragma once

// ACTD activation container: per-layer token-averaged activations, labels,
// class text embeddings and explicit dataset splits.
//
// Directory layout:
//   manifest.json   version, shapes, class names/descriptions, splits, dtype
//   layer_<i>.bin   S x N_i float32 LE, row-major, i = 1..L
//   labels.bin      S uint32 LE
//   text_emb.bin    C x E float32 LE, unit-norm rows

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "exitrate/binio.hpp"
#include "exitrate/errors.hpp"
#include "exitrate/numkernel.hpp"

namespace exitrate {

inline constexpr int kActdVersion = 1;
inline constexpr double kUnitNormTolerance = 1e-5;

struct Splits {
  std::vector<std::size_t> calibration;
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;

  bool operator==(const Splits&) const = default;
};

enum class SplitName { calibration, train, test };

inline const char* to_string(SplitName s) {
  switch (s) {
    case SplitName::calibration: return "calibration";
    case SplitName::train: return "train";
    case SplitName::test: return "test";
  }
  return "?";
}

inline SplitName split_from_string(const std::string& s) {
  if (s == "calibration") return SplitName::calibration;
  if (s == "train") return SplitName::train;
  if (s == "test") return SplitName::test;
  throw UsageError("unknown split '" + s + "'");
}

struct ActivationDataset {
  std::vector<Matrix> layers;  // L entries of S x N_i
  std::vector<std::uint32_t> labels;
  std::vector<std::string> class_names;
  std::vector<std::string> descriptions;
  Matrix text_embeddings;  // C x E
  Splits splits;

  std::size_t num_layers() const noexcept { return layers.size(); }
  std::size_t num_samples() const noexcept { return labels.size(); }
  std::size_t num_classes() const noexcept { return class_names.size(); }
  std::size_t embed_dim() const noexcept { return text_embeddings.cols(); }

  /// Activations of exit layer `i`, counted from 1.
  const Matrix& layer(std::size_t i) const {
    if (i < 1 || i > layers.size()) {
      throw UsageError("layer " + std::to_string(i) + " out of range 1.." +
                       std::to_string(layers.size()));
    }
    return layers[i - 1];
  }

  std::size_t neurons(std::size_t i) const { return layer(i).cols(); }

  const std::vector<std::size_t>& split(SplitName s) const {
    switch (s) {
      case SplitName::calibration: return splits.calibration;
      case SplitName::train: return splits.train;
      case SplitName::test: return splits.test;
    }
    return splits.test;
  }

  std::span<const double> text_embedding(std::size_t c) const { return text_embeddings.row(c); }

  bool operator==(const ActivationDataset&) const = default;

  /// Throws DataError subclasses on any violated container invariant.
  void validate() const {
    const std::size_t s = num_samples();
    const std::size_t c = num_classes();
    if (layers.empty()) throw InvariantError("dataset has no layers");
    if (c == 0) throw InvariantError("dataset has no classes");
    if (descriptions.size() != c) {
      throw InvariantError("descriptions count " + std::to_string(descriptions.size()) +
                           " != class count " + std::to_string(c));
    }
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (layers[i].rows() != s) {
        throw SizeMismatchError("layer " + std::to_string(i + 1) + " has " +
                                std::to_string(layers[i].rows()) + " rows but there are " +
                                std::to_string(s) + " labels");
      }
      if (layers[i].cols() == 0) throw InvariantError("layer " + std::to_string(i + 1) + " has no neurons");
      if (!all_finite(layers[i].flat())) {
        throw InvariantError("layer " + std::to_string(i + 1) + " contains non-finite values");
      }
    }
    for (std::size_t k = 0; k < s; ++k) {
      if (labels[k] >= c) {
        throw InvariantError("label " + std::to_string(labels[k]) + " at sample " +
                             std::to_string(k) + " out of range for " + std::to_string(c) +
                             " classes");
      }
    }
    if (text_embeddings.rows() != c) {
      throw SizeMismatchError("text embedding rows " + std::to_string(text_embeddings.rows()) +
                              " != class count " + std::to_string(c));
    }
    if (embed_dim() == 0) throw InvariantError("embed_dim is zero");
    if (!all_finite(text_embeddings.flat())) {
      throw InvariantError("text embeddings contain non-finite values");
    }
    for (std::size_t r = 0; r < c; ++r) {
      const double n = norm2(text_embeddings.row(r));
      if (std::abs(n - 1.0) > kUnitNormTolerance) {
        throw InvariantError("text embedding row " + std::to_string(r) + " has norm " +
                             std::to_string(n) + ", expected 1");
      }
    }
    std::vector<char> seen(s, 0);
    auto check = [&](const std::vector<std::size_t>& idx, const char* name) {
      for (std::size_t k : idx) {
        if (k >= s) {
          throw InvariantError(std::string("split '") + name + "' index " + std::to_string(k) +
                               " >= num_samples " + std::to_string(s));
        }
        if (seen[k]) {
          throw InvariantError(std::string("split '") + name + "' index " + std::to_string(k) +
                               " is repeated or shared with another split");
        }
        seen[k] = 1;
      }
    };
    check(splits.calibration, "calibration");
    check(splits.train, "train");
    check(splits.test, "test");
  }
};

/// Column-wise mean over T token rows.
inline Vector token_average(const Matrix& tokens) {
  if (tokens.rows() == 0) throw ShapeError("token_average: no tokens");
  Vector mean(tokens.cols(), 0.0);
  for (std::size_t t = 0; t < tokens.rows(); ++t) {
    const auto r = tokens.row(t);
    for (std::size_t j = 0; j < mean.size(); ++j) mean[j] += r[j];
  }
  const double inv = 1.0 / static_cast<double>(tokens.rows());
  for (double& m : mean) m *= inv;
  return mean;
}

/// The dataset as it reads back from disk (float32 rounding applied once).
inline ActivationDataset quantized(ActivationDataset ds) {
  for (auto& m : ds.layers)
    for (double& v : m.flat()) v = binio::quantize(v);
  for (double& v : ds.text_embeddings.flat()) v = binio::quantize(v);
  return ds;
}

namespace actd_detail {

inline nlohmann::ordered_json manifest_of(const ActivationDataset& ds) {
  nlohmann::ordered_json j;
  j["version"] = kActdVersion;
  j["num_layers"] = ds.num_layers();
  std::vector<std::size_t> neurons;
  for (const auto& m : ds.layers) neurons.push_back(m.cols());
  j["neurons"] = neurons;
  j["embed_dim"] = ds.embed_dim();
  j["num_samples"] = ds.num_samples();
  j["classes"] = ds.class_names;
  j["descriptions"] = ds.descriptions;
  j["splits"] = {{"calibration", ds.splits.calibration},
                 {"train", ds.splits.train},
                 {"test", ds.splits.test}};
  j["dtype"] = "f32le";
  return j;
}

template <class T>
T field(const nlohmann::json& j, const char* key) {
  if (!j.contains(key)) throw FormatError(std::string("manifest: missing field '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("manifest: bad field '") + key + "': " + e.what());
  }
}

}  // namespace actd_detail

inline std::filesystem::path layer_file(const std::filesystem::path& dir, std::size_t i) {
  return dir / ("layer_" + std::to_string(i) + ".bin");
}

inline void write_dataset(const ActivationDataset& ds, const std::filesystem::path& dir) {
  ds.validate();
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());

  binio::write_text(dir / "manifest.json", actd_detail::manifest_of(ds).dump(2) + "\n");
  for (std::size_t i = 0; i < ds.layers.size(); ++i) {
    std::vector<char> bytes;
    binio::append_f32(bytes, ds.layers[i].flat());
    binio::write_file(layer_file(dir, i + 1), bytes);
  }
  std::vector<char> labels;
  binio::append_u32(labels, ds.labels);
  binio::write_file(dir / "labels.bin", labels);
  std::vector<char> text;
  binio::append_f32(text, ds.text_embeddings.flat());
  binio::write_file(dir / "text_emb.bin", text);
}

inline ActivationDataset read_dataset(const std::filesystem::path& dir) {
  using actd_detail::field;
  const auto manifest_path = dir / "manifest.json";
  if (!std::filesystem::exists(manifest_path)) {
    throw IoError("no manifest.json in '" + dir.string() + "'");
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(binio::read_text(manifest_path));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("manifest.json: ") + e.what());
  }
  if (!j.is_object()) throw FormatError("manifest.json: not an object");
  if (field<int>(j, "version") != kActdVersion) {
    throw FormatError("manifest.json: unsupported version " + j["version"].dump());
  }
  if (field<std::string>(j, "dtype") != "f32le") {
    throw FormatError("manifest.json: unsupported dtype " + j["dtype"].dump());
  }
  const auto num_layers = field<std::size_t>(j, "num_layers");
  const auto neurons = field<std::vector<std::size_t>>(j, "neurons");
  const auto embed_dim = field<std::size_t>(j, "embed_dim");
  const auto num_samples = field<std::size_t>(j, "num_samples");
  if (neurons.size() != num_layers) {
    throw FormatError("manifest.json: neurons list has " + std::to_string(neurons.size()) +
                      " entries for " + std::to_string(num_layers) + " layers");
  }

  ActivationDataset ds;
  ds.class_names = field<std::vector<std::string>>(j, "classes");
  ds.descriptions = field<std::vector<std::string>>(j, "descriptions");
  if (!j.contains("splits") || !j["splits"].is_object()) {
    throw FormatError("manifest.json: missing 'splits' object");
  }
  ds.splits.calibration = field<std::vector<std::size_t>>(j["splits"], "calibration");
  ds.splits.train = field<std::vector<std::size_t>>(j["splits"], "train");
  ds.splits.test = field<std::vector<std::size_t>>(j["splits"], "test");

  for (std::size_t i = 1; i <= num_layers; ++i) {
    const auto bytes = binio::read_words(layer_file(dir, i), num_samples * neurons[i - 1]);
    ds.layers.emplace_back(num_samples, neurons[i - 1], binio::decode_f32(bytes));
  }
  ds.labels = binio::decode_u32(binio::read_words(dir / "labels.bin", num_samples));
  const std::size_t c = ds.class_names.size();
  ds.text_embeddings =
      Matrix(c, embed_dim, binio::decode_f32(binio::read_words(dir / "text_emb.bin", c * embed_dim)));
  ds.validate();
  return ds;
}

}  // namespace exitrate
