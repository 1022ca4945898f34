// exitrate: command-line driver for the early-exit toolkit.
//
//   exitrate synth --out D            generate a synthetic ACTD container
//   exitrate validate --dataset D     container check
//   exitrate fit-sampling ...         calibration Gaussians per layer
//   exitrate train-tgem ...           one T-GEM + jumper module
//   exitrate eval ...                 per-layer accuracy table (report.csv/json, oracle.csv)
//   exitrate sweep ...                cap or K sweep
//   exitrate oracle ...               oracle early-exit histogram for one method
//
// Exit codes: 0 ok, 1 usage, 2 data, 3 numeric.

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "exitrate/actstore.hpp"
#include "exitrate/errors.hpp"
#include "exitrate/evalharness.hpp"
#include "exitrate/sampler.hpp"
#include "exitrate/synthgen.hpp"
#include "exitrate/tgem.hpp"

namespace fs = std::filesystem;
using namespace exitrate;

namespace {

#ifndef EXITRATE_DATA_DIR
#define EXITRATE_DATA_DIR "data"
#endif

std::size_t parse_index(const std::string& s, const std::string& spec) {
  std::size_t v = 0;
  const auto* end = s.data() + s.size();
  const auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || p != end) throw UsageError("bad layer selection '" + spec + "'");
  return v;
}

/// "" (all), "6", "1..12", or "1,4,6".
std::vector<std::size_t> parse_layers(const std::string& spec) {
  std::vector<std::size_t> out;
  if (spec.empty() || spec == "all") return out;
  if (const auto dots = spec.find(".."); dots != std::string::npos) {
    const std::size_t a = parse_index(spec.substr(0, dots), spec);
    const std::size_t b = parse_index(spec.substr(dots + 2), spec);
    if (a < 1 || b < a) throw UsageError("bad layer range '" + spec + "'");
    for (std::size_t i = a; i <= b; ++i) out.push_back(i);
    return out;
  }
  std::size_t start = 0;
  while (start <= spec.size()) {
    const auto comma = spec.find(',', start);
    const auto piece = spec.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    const std::size_t v = parse_index(piece, spec);
    if (v < 1) throw UsageError("layers are 1-based: '" + spec + "'");
    out.push_back(v);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

std::vector<std::size_t> all_or(const ActivationDataset& ds, std::vector<std::size_t> layers) {
  if (layers.empty())
    for (std::size_t i = 1; i <= ds.num_layers(); ++i) layers.push_back(i);
  for (std::size_t l : layers) (void)ds.layer(l);
  return layers;
}

RateForm rate_form_from(const std::string& s) {
  if (s == "printed") return RateForm::printed;
  if (s == "full_nll") return RateForm::full_nll;
  throw UsageError("unknown rate form '" + s + "' (expected printed or full_nll)");
}

LossConfig loss_from(const std::string& name) {
  LossConfig c;
  if (name == "rate") {
    c.use_cosine = false;
  } else if (name == "cosine") {
    c.use_rate = false;
  } else if (name != "both") {
    throw UsageError("unknown loss '" + name + "' (expected rate, cosine or both)");
  }
  return c;
}

// Options shared by the commands that train exit modules.
struct TrainFlags {
  std::size_t epochs = 120;
  double lr = 1e-4;
  std::size_t batch = 16;
  std::size_t patience = 10;
  std::uint64_t seed = 0;
  std::optional<std::size_t> k;
  std::optional<std::size_t> hidden;

  void add(CLI::App* app) {
    app->add_option("--epochs", epochs, "Training epochs")->capture_default_str();
    app->add_option("--lr", lr, "Initial Adam learning rate")->capture_default_str();
    app->add_option("--batch-size", batch, "Minibatch size")->capture_default_str();
    app->add_option("--patience", patience, "Plateau patience in epochs before halving the lr")
        ->capture_default_str();
    app->add_option("--seed", seed, "Training seed")->capture_default_str();
    app->add_option("--k", k, "Jumper output dimension K (default: text embedding dim)");
    app->add_option("--hidden", hidden, "Hidden width of jumper and psi (default 2K, 0 = affine)");
  }

  void apply(LossConfig& c, ModuleShape& shape, const ActivationDataset& ds) const {
    c.epochs = epochs;
    c.initial_lr = lr;
    c.batch_size = batch;
    c.patience = patience;
    c.seed = seed;
    shape.k = k.value_or(ds.embed_dim());
    shape.hidden = hidden;
  }
};

void print_summary(const ActivationDataset& ds, std::ostream& os) {
  os << "layers " << ds.num_layers() << ", samples " << ds.num_samples() << ", classes "
     << ds.num_classes() << ", embed_dim " << ds.embed_dim() << ", neurons";
  for (std::size_t i = 1; i <= ds.num_layers(); ++i) os << (i == 1 ? " " : ",") << ds.neurons(i);
  os << "\nsplits: calibration " << ds.splits.calibration.size() << ", train "
     << ds.splits.train.size() << ", test " << ds.splits.test.size() << "\n";
}

int run(int argc, char** argv) {
  CLI::App app{"Static early-exit classification from per-class Gaussian models of intermediate activations"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  // synth
  SynthConfig sc;
  std::string synth_out;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic ACTD container");
  synth->add_option("--out", synth_out, "Output container directory")->required();
  synth->add_option("--seed", sc.seed, "Generator seed")->capture_default_str();
  synth->add_option("--classes", sc.classes, "Number of classes")->capture_default_str();
  synth->add_option("--layers", sc.layers, "Number of layers")->capture_default_str();
  synth->add_option("--neurons", sc.neurons, "Neurons per layer")->capture_default_str();
  synth->add_option("--embed-dim", sc.embed_dim, "Text embedding dimension")->capture_default_str();
  synth->add_option("--samples", sc.samples, "Total samples")->capture_default_str();
  synth->add_option("--depth-gain", sc.depth_gain, "Class separation at the last layer")
      ->capture_default_str();
  synth->add_option("--noise-sigma", sc.noise_sigma, "Per-neuron noise sd")->capture_default_str();
  synth->add_option("--mean-norm", sc.mean_norm, "Norm of each class direction")->capture_default_str();
  synth->add_option("--depth-floor", sc.depth_floor, "Fraction of the class separation present before layer 1")
      ->capture_default_str();
  synth->add_option("--offset-sigma", sc.offset_sigma, "Sd of the shared depth-growing offset")
      ->capture_default_str();
  synth->add_option("--outlier-neurons", sc.outlier_neurons, "Neurons with extra shared variance")
      ->capture_default_str();
  synth->add_option("--outlier-sigma", sc.outlier_sigma, "Extra sd on outlier neurons")
      ->capture_default_str();
  synth->add_option("--calibration-per-class", sc.calibration_per_class,
                    "Calibration samples per class")->capture_default_str();
  synth->add_option("--test-per-class", sc.test_per_class, "Test samples per class")
      ->capture_default_str();

  // validate
  std::string dataset;
  auto* validate = app.add_subcommand("validate", "Check an ACTD container");
  validate->add_option("--dataset", dataset, "Container directory")->required();

  // fit-sampling
  std::string layers_spec, out_dir;
  std::size_t cap = 100;
  auto* fit = app.add_subcommand("fit-sampling", "Fit per-class Gaussians on the calibration split");
  fit->add_option("--dataset", dataset, "Container directory")->required();
  fit->add_option("--layers", layers_spec, "Layers: a..b, a,b,c, or all")->capture_default_str();
  fit->add_option("--cap", cap, "Calibration samples per class")->capture_default_str();
  fit->add_option("--out", out_dir, "Output directory")->required();

  // train-tgem
  std::size_t layer = 0;
  std::string loss_name_flag = "both";
  TrainFlags tf;
  auto* train = app.add_subcommand("train-tgem", "Train one T-GEM + jumper exit module");
  train->add_option("--dataset", dataset, "Container directory")->required();
  train->add_option("--layer", layer, "Exit layer (1-based)")->required();
  train->add_option("--loss", loss_name_flag, "rate, cosine or both")->capture_default_str();
  tf.add(train);
  train->add_option("--out", out_dir, "Output directory")->required();

  // eval
  std::vector<std::string> methods;
  std::string rate_form = "printed";
  std::string costmodel = std::string(EXITRATE_DATA_DIR) + "/costmodels/vit-b-32.json";
  std::string modules_dir;
  auto* eval = app.add_subcommand("eval", "Per-layer accuracy table with oracle early exit");
  eval->add_option("--dataset", dataset, "Container directory")->required();
  eval->add_option("--methods", methods,
                   "Methods: sampling-rate sampling-cosine tgem-rate tgem-cosine jumper-cosine "
                   "tgem-rateonly (default: first four)")
      ->delimiter(',');
  eval->add_option("--layers", layers_spec, "Layers: a..b, a,b,c, or all")->capture_default_str();
  eval->add_option("--cap", cap, "Calibration samples per class")->capture_default_str();
  eval->add_option("--rate-form", rate_form, "printed or full_nll")->capture_default_str();
  eval->add_option("--costmodel", costmodel, "Cost-model JSON")->capture_default_str();
  eval->add_option("--modules", modules_dir, "Load exit_<i> modules from here instead of training");
  tf.add(eval);
  eval->add_option("--out", out_dir, "Output directory")->required();

  // sweep
  std::string axis = "samples";
  std::vector<std::size_t> values;
  auto* sweep = app.add_subcommand("sweep", "Sweep the calibration cap or K");
  sweep->add_option("--dataset", dataset, "Container directory")->required();
  sweep->add_option("--axis", axis, "samples or k")->capture_default_str();
  sweep->add_option("--values", values,
                    "Sweep values (default samples: 1,10,100,250,1000; k: 16,32,128,512,1024)")
      ->delimiter(',');
  sweep->add_option("--layers", layers_spec, "Layers: a..b, a,b,c, or all")->capture_default_str();
  sweep->add_option("--rate-form", rate_form, "printed or full_nll")->capture_default_str();
  tf.add(sweep);
  sweep->add_option("--out", out_dir, "Output directory")->required();

  // oracle
  std::string method = "sampling-rate";
  auto* oracle = app.add_subcommand("oracle", "Oracle early exit for one method");
  oracle->add_option("--dataset", dataset, "Container directory")->required();
  oracle->add_option("--method", method, "Method name, as for eval")->capture_default_str();
  oracle->add_option("--layers", layers_spec, "Layers: a..b, a,b,c, or all")->capture_default_str();
  oracle->add_option("--cap", cap, "Calibration samples per class")->capture_default_str();
  oracle->add_option("--costmodel", costmodel, "Cost-model JSON")->capture_default_str();
  oracle->add_option("--modules", modules_dir, "Load exit_<i> modules from here instead of training");
  tf.add(oracle);
  oracle->add_option("--out", out_dir, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  if (synth->parsed()) {
    write_dataset(generate(sc), synth_out);
    std::cout << "wrote " << synth_out << "\n";
    return 0;
  }

  const ActivationDataset ds = read_dataset(dataset);

  if (validate->parsed()) {
    print_summary(ds, std::cout);
    std::cout << "ok\n";
    return 0;
  }

  if (fit->parsed()) {
    for (std::size_t l : all_or(ds, parse_layers(layers_spec))) {
      const auto g = fit_gaussians(ds, l, SplitName::calibration, cap);
      save_gaussians(g, out_dir);
      std::cout << "layer " << l << ": " << g.num_classes() << " classes x " << g.neurons()
                << " neurons\n";
    }
    return 0;
  }

  if (train->parsed()) {
    LossConfig lc = loss_from(loss_name_flag);
    ModuleShape shape;
    tf.apply(lc, shape, ds);
    if (lc.use_cosine && shape.k != ds.embed_dim()) {
      throw UsageError("--loss " + loss_name_flag + " uses the cosine term, which needs K == E; got --k " +
                       std::to_string(shape.k) + " with a " + std::to_string(ds.embed_dim()) +
                       "-dim text embedding. Use --loss rate or --k " + std::to_string(ds.embed_dim()));
    }
    const ExitModule em = train_exit_module(ds, layer, lc, shape);
    save_exit_module(em, out_dir);
    const auto& last = em.log.back();
    std::printf("layer %zu: %zu epochs, train loss %.6f, val loss %.6f, lr %.3g, params %zu\n", layer,
                em.log.size(), last.train_loss, last.val_loss, last.lr,
                count_additional_parameters(em));
    return 0;
  }

  EvalConfig ec;
  ec.layers = parse_layers(layers_spec);
  ec.cap = cap;
  ec.rate_form = rate_form_from(rate_form);
  ModuleShape shape;
  tf.apply(ec.loss, shape, ds);
  ec.k = shape.k;
  ec.shape = shape;
  if (!modules_dir.empty()) ec.modules_dir = fs::path(modules_dir);

  if (eval->parsed()) {
    if (!methods.empty()) {
      ec.methods.clear();
      for (const auto& m : methods) ec.methods.push_back(method_from_string(m));
    }
    ec.cost = load_cost_model(costmodel);
    const auto report = run_table1(ds, ec);
    write_report(report, out_dir);
    std::cout << report_csv(report);
    return 0;
  }

  if (sweep->parsed()) {
    const SweepAxis ax = axis_from_string(axis);
    if (values.empty()) values = default_sweep_values(ax);
    const auto rep = run_table2(ds, ax, values, ec);
    write_sweep(rep, out_dir);
    std::cout << sweep_csv(rep);
    if (rep.saturation_value) std::cout << "saturation at " << *rep.saturation_value << "\n";
    return 0;
  }

  if (oracle->parsed()) {
    ec.methods = {method_from_string(method)};
    ec.cost = load_cost_model(costmodel);
    const auto report = run_table1(ds, ec);
    fs::create_directories(out_dir);
    const auto& o = report.oracle.front();
    binio::write_text(fs::path(out_dir) / "oracle.csv", oracle_csv(o, report.layers));
    binio::write_text(fs::path(out_dir) / "oracle.json", report_json(report).dump(2) + "\n");
    std::printf("%s: oracle accuracy %.4f, best single layer %.4f\n", method.c_str(),
                o.result.accuracy, o.best_layer_top1);
    std::cout << oracle_csv(o, report.layers);
    return 0;
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}
