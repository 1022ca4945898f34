// Quickstart: synthesize a dataset, score a few exit layers with the
// calibration Gaussians, train one small exit module, and price the exits.

#include <cstdio>

#include "exitrate/evalharness.hpp"
#include "exitrate/sampler.hpp"
#include "exitrate/synthgen.hpp"
#include "exitrate/tgem.hpp"

using namespace exitrate;

int main() {
  const ActivationDataset ds = generate(SynthConfig{});
  const CostModel cost = load_cost_model(EXITRATE_DATA_DIR "/costmodels/vit-b-32.json");
  const auto& test = ds.split(SplitName::test);

  for (std::size_t layer : {1, 4, 6, 12}) {
    const ClassGaussians g = fit_gaussians(ds, layer);
    std::size_t hits = 0;
    for (std::size_t k : test) hits += predict_by_rate(ds.layer(layer).row(k), g) == ds.labels[k];
    std::printf("layer %2zu  class-rate top-1 %.3f  compression %.3f\n", layer,
                static_cast<double>(hits) / static_cast<double>(test.size()),
                compression_ratio(layer, cost, 0));
  }

  LossConfig loss;
  loss.epochs = 30;
  ModuleShape shape;
  shape.k = ds.embed_dim();
  const ExitModule em = train_exit_module(ds, 6, loss, shape);
  std::size_t hits = 0;
  for (std::size_t k : test) {
    hits += predict_tgem(em, ds.layer(6).row(k), ds.text_embeddings, ScoreMode::cosine) == ds.labels[k];
  }
  const auto ap = static_cast<std::int64_t>(count_additional_parameters(em));
  std::printf("layer  6  T-GEM cosine top-1 %.3f after %zu epochs, %lld extra params, saves %lld\n",
              static_cast<double>(hits) / static_cast<double>(test.size()), em.log.size(),
              static_cast<long long>(ap), static_cast<long long>(parameter_saving(6, cost, ap)));
}
