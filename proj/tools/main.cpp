// fcnbnl command line: dataset synthesis, training, evaluation, robustness
// sweeps, gradient checks and extraction benchmarks.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <string>

#include "fcnbnl/bench.hpp"
#include "fcnbnl/checkpoint.hpp"
#include "fcnbnl/config.hpp"
#include "fcnbnl/dataset.hpp"
#include "fcnbnl/perturb.hpp"
#include "fcnbnl/train.hpp"

namespace fs = std::filesystem;
using namespace fcnbnl;

namespace {

struct CliState {
  std::string config_path;
  std::string out_dir = "out";
  std::uint64_t seed = 1234;
  std::string precision = "f32";
  std::map<std::string, std::string> overrides;
};

void add_common_options(CLI::App* sub, CliState& state) {
  sub->add_option("--config", state.config_path, "run configuration file (key = value lines)");
  sub->add_option("--seed", state.seed, "global random seed")->capture_default_str();
  sub->add_option("--out", state.out_dir, "output directory")->capture_default_str();
  sub->add_option("--precision", state.precision, "f32 or f64")
      ->check(CLI::IsMember({"f32", "f64"}))
      ->capture_default_str();
  for (const auto& key : config_schema()) {
    sub->add_option_function<std::string>(
        "--" + key, [&state, key](const std::string& v) { state.overrides[key] = v; },
        "override config key " + key);
  }
}

RunConfig resolve_config(const CliState& state) {
  std::map<std::string, std::string> values;
  if (!state.config_path.empty()) values = parse_config_file(state.config_path);
  for (const auto& [k, v] : state.overrides) values[k] = v;
  return make_run_config(values, state.seed);
}

void dump_config(std::ostream& os, const RunConfig& cfg, const CliState& state) {
  os << "seed = " << state.seed << "\n";
  os << "precision = " << state.precision << "\n";
  if (cfg.dataset_path) os << "dataset.path = " << *cfg.dataset_path << "\n";
  os << "dataset.train_fraction = " << cfg.train_fraction << "\n";
  os << "synth.k = " << cfg.synth.k << "\n";
  os << "synth.images_per_class = " << cfg.synth.images_per_class << "\n";
  os << "synth.image_size = " << cfg.synth.image_size << "\n";
  os << "synth.motif_size = " << cfg.synth.motif_size << "\n";
  os << "synth.noise_level = " << cfg.synth.noise_level << "\n";
  os << "synth.seed = " << cfg.synth.seed << "\n";
  os << "topology.layers = " << topology_layers_to_string(cfg.topology) << "\n";
  os << "topology.normalize = " << (cfg.topology.normalize_descriptors ? "true" : "false") << "\n";
  os << "topology.batch_norm = " << (cfg.topology.batch_norm_before_head ? "true" : "false") << "\n";
  os << "pyramid.base = " << cfg.pyramid.base_resolution << "\n";
  os << "pyramid.factors =";
  for (double f : cfg.pyramid.factors) os << " " << f;
  os << "\n";
  os << "nbnl.q = " << cfg.nbnl.q << "\n";
  os << "nbnl.p = " << cfg.nbnl.p << "\n";
  os << "train.epochs = " << cfg.training.epochs << "\n";
  os << "train.batch_size = " << cfg.training.batch_size << "\n";
  os << "train.lr = " << cfg.training.learning_rate << "\n";
  const auto drops = cfg.training.resolved_drops();
  os << "train.lr_drop_epochs = " << drops.first << "," << drops.second << "\n";
  os << "train.fine_tune_last_n_layers = " << cfg.training.fine_tune_last_n_layers << "\n";
}

/// Dataset source: a directory tree or the deterministic synthesizer. The
/// split comes from splits.txt when present, otherwise from a seeded
/// stratified split.
std::pair<Dataset, Dataset> load_train_test(const RunConfig& cfg, std::uint64_t seed) {
  if (cfg.dataset_path) {
    Dataset all = load_dataset_dir(*cfg.dataset_path);
    if (auto splits = load_splits_file(*cfg.dataset_path)) return apply_splits(all, *splits);
    return split_dataset(all, cfg.train_fraction, seed);
  }
  Dataset all = generate_synthetic_dataset(cfg.synth);
  return split_dataset(all, cfg.train_fraction, seed);
}

int cmd_synth(const CliState& state) {
  const RunConfig cfg = resolve_config(state);
  Dataset ds = generate_synthetic_dataset(cfg.synth);

  const fs::path out(state.out_dir);
  fs::create_directories(out);
  save_dataset_dir(ds, (out / "dataset").string());
  {
    std::ofstream manifest(out / "manifest.txt");
    manifest << "k = " << cfg.synth.k << "\n"
             << "images_per_class = " << cfg.synth.images_per_class << "\n"
             << "image_size = " << cfg.synth.image_size << "\n"
             << "motif_size = " << cfg.synth.motif_size << "\n"
             << "noise_level = " << cfg.synth.noise_level << "\n"
             << "seed = " << cfg.synth.seed << "\n"
             << "images = " << ds.size() << "\n";
  }
  std::cout << "synth: wrote " << ds.size() << " images across " << cfg.synth.k << " classes to "
            << (out / "dataset").string() << "\n";
  return 0;
}

template <typename T>
int cmd_train(const CliState& state) {
  const RunConfig cfg = resolve_config(state);
  auto [train_set, test_set] = load_train_test(cfg, state.seed);

  NbnlConfig ncfg = cfg.nbnl;
  ncfg.k = train_set.label_set.k();

  auto model = init_fcn_model<T>(cfg.topology, state.seed, cfg.training.fine_tune_last_n_layers);
  auto bank = init_prototype_bank(model, train_set, cfg.pyramid, ncfg, state.seed);

  std::cout << "train: " << train_set.size() << " train / " << test_set.size() << " test images, k=" << ncfg.k
            << ", D=" << cfg.topology.descriptor_dim() << "\n";
  auto history = train(model, bank, train_set, cfg.pyramid, cfg.training);
  for (const auto& e : history) {
    std::cout << "  epoch " << std::setw(3) << e.epoch << "  loss " << std::fixed << std::setprecision(6) << e.loss
              << "  lr " << std::defaultfloat << e.lr << "\n";
  }

  const fs::path out(state.out_dir);
  fs::create_directories(out);
  TrainedState<T> trained{std::move(model), std::move(bank), cfg.pyramid, cfg.training.epochs, state.seed};
  save_checkpoint(trained, (out / "model.ckpt").string());
  write_history_csv(history, (out / "history.csv").string());

  auto report = evaluate(trained.model, trained.bank, test_set, trained.pyramid);
  std::cout << "train: test accuracy " << std::fixed << std::setprecision(4) << report.accuracy
            << std::defaultfloat << "\n";

  std::ofstream log(out / "run.log");
  log << "command = train\n";
  dump_config(log, cfg, state);
  log << "final_train_loss = " << std::setprecision(12) << history.back().loss << "\n";
  log << "test_accuracy = " << report.accuracy << "\n";
  std::cout << "train: checkpoint at " << (out / "model.ckpt").string() << "\n";
  return 0;
}

template <typename T>
int eval_with_state(const CliState& state, const RunConfig& cfg, const CheckpointFile& file) {
  auto trained = checkpoint_to_state<T>(file);

  Dataset eval_set;
  if (cfg.dataset_path) {
    Dataset all = load_dataset_dir(*cfg.dataset_path);
    if (auto splits = load_splits_file(*cfg.dataset_path)) {
      eval_set = apply_splits(all, *splits).second;
    } else {
      eval_set = std::move(all);
    }
  } else {
    eval_set = split_dataset(generate_synthetic_dataset(cfg.synth), cfg.train_fraction, trained.seed).second;
  }
  check(eval_set.label_set.k() == trained.bank.config.k,
        "eval: dataset has " + std::to_string(eval_set.label_set.k()) + " classes, checkpoint expects " +
            std::to_string(trained.bank.config.k));

  std::vector<PerturbationKind> kinds;
  if (cfg.eval_perturb == "all") {
    kinds.assign(kAllPerturbations.begin(), kAllPerturbations.end());
  } else {
    kinds.push_back(perturbation_from_string(cfg.eval_perturb));
  }

  const fs::path out(state.out_dir);
  fs::create_directories(out);
  std::ofstream acc_csv(out / "accuracy.csv");
  acc_csv << "perturbation,accuracy\n";

  std::ofstream log(out / "run.log");
  log << "command = eval\n";
  log << "checkpoint = " << *cfg.eval_checkpoint << "\n";
  log << "images = " << eval_set.size() << "\n";

  for (auto kind : kinds) {
    Dataset perturbed;
    perturbed.label_set = eval_set.label_set;
    perturbed.labels = eval_set.labels;
    perturbed.provenance = eval_set.provenance + "/" + to_string(kind);
    perturbed.images.reserve(eval_set.size());
    for (const auto& im : eval_set.images) perturbed.images.push_back(apply_perturbation(im, kind));

    auto report = evaluate(trained.model, trained.bank, perturbed, trained.pyramid);
    write_confusion_csv(report, (out / (std::string("confusion_") + to_string(kind) + ".csv")).string());
    acc_csv << to_string(kind) << "," << std::setprecision(10) << report.accuracy << "\n";
    log << to_string(kind) << "_accuracy = " << std::setprecision(10) << report.accuracy << "\n";
    std::cout << "eval: " << std::left << std::setw(26) << to_string(kind) << std::right << " accuracy "
              << std::fixed << std::setprecision(4) << report.accuracy << std::defaultfloat << "\n";
  }
  return 0;
}

int cmd_eval(const CliState& state) {
  const RunConfig cfg = resolve_config(state);
  check(cfg.eval_checkpoint.has_value(), "eval: --eval.checkpoint is required");
  const auto file = load_checkpoint_file(*cfg.eval_checkpoint);
  if (checkpoint_precision(file) == kDtypeF32) return eval_with_state<float>(state, cfg, file);
  return eval_with_state<double>(state, cfg, file);
}

template <typename T>
int cmd_bench(const CliState& state) {
  const RunConfig cfg = resolve_config(state);
  Dataset source = cfg.dataset_path ? load_dataset_dir(*cfg.dataset_path) : generate_synthetic_dataset(cfg.synth);
  std::vector<Image> images;
  for (std::size_t i = 0; i < source.size() && static_cast<int>(images.size()) < cfg.bench_images; ++i)
    images.push_back(source.images[i]);

  auto model = init_fcn_model<T>(cfg.topology, state.seed, cfg.training.fine_tune_last_n_layers);
  auto rows = run_timing_sweep(model, images, cfg.bench_counts, cfg.bench_reps, cfg.bench_patch_sizes, state.seed);

  const fs::path out(state.out_dir);
  fs::create_directories(out);
  write_timing_csv(rows, (out / "timing.csv").string());

  std::ofstream log(out / "run.log");
  log << "command = bench\nimages = " << images.size() << "\n";
  for (const auto& r : rows) {
    std::cout << "bench: count " << std::setw(4) << r.requested_count << "  patch " << std::scientific
              << std::setprecision(3) << r.patch_median_s << "s  fc(" << r.fc_count << ") " << r.fc_median_s
              << "s  speedup x" << std::fixed << std::setprecision(2) << (r.patch_median_s / r.fc_median_s)
              << std::defaultfloat << "\n";
    log << "count_" << r.requested_count << "_patch_median_s = " << r.patch_median_s << "\n";
    log << "count_" << r.requested_count << "_fc_median_s = " << r.fc_median_s << "\n";
  }
  std::cout << "bench: timing table at " << (out / "timing.csv").string() << "\n";
  return 0;
}

int cmd_gradcheck(const CliState& state) {
  const RunConfig cfg = resolve_config(state);
  std::vector<GradCheckComponent> components;
  if (cfg.gradcheck_component == "all") {
    components = {GradCheckComponent::kOmega, GradCheckComponent::kSurrogate, GradCheckComponent::kFcnLayers,
                  GradCheckComponent::kFullStack};
  } else if (cfg.gradcheck_component == "omega") {
    components = {GradCheckComponent::kOmega};
  } else if (cfg.gradcheck_component == "surrogate") {
    components = {GradCheckComponent::kSurrogate};
  } else if (cfg.gradcheck_component == "fcn") {
    components = {GradCheckComponent::kFcnLayers};
  } else {
    components = {GradCheckComponent::kFullStack};
  }

  const fs::path out(state.out_dir);
  fs::create_directories(out);
  std::ofstream csv(out / "gradcheck.csv");
  csv << "component,max_rel_err,tolerance,passed\n";

  bool all_passed = true;
  for (auto c : components) {
    const double tol = cfg.gradcheck_tolerance.value_or(default_grad_tolerance(c));
    auto report = grad_check(c, tol, cfg.gradcheck_trials, state.seed);
    all_passed = all_passed && report.passed;
    csv << report.component << "," << std::setprecision(10) << report.max_rel_err << "," << report.tolerance << ","
        << (report.passed ? "true" : "false") << "\n";
    std::cout << "gradcheck: " << std::left << std::setw(12) << report.component << std::right << " max rel err "
              << std::scientific << std::setprecision(3) << report.max_rel_err << "  tol " << report.tolerance
              << (report.passed ? "  PASS" : "  FAIL") << std::defaultfloat << "\n";
  }
  return all_passed ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fcnbnl: part-based scene classification with a fully-convolutional NBNL head"};
  app.require_subcommand(1);

  CliState state;
  auto* synth = app.add_subcommand("synth", "write a synthetic dataset directory and its manifest");
  auto* train_cmd = app.add_subcommand("train", "train the extractor and prototype bank end to end");
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint, optionally under perturbations");
  auto* bench_cmd = app.add_subcommand("bench", "compare patch-mode and fully-convolutional extraction time");
  auto* gradcheck_cmd = app.add_subcommand("gradcheck", "verify analytic gradients against finite differences");
  for (auto* sub : {synth, train_cmd, eval_cmd, bench_cmd, gradcheck_cmd}) add_common_options(sub, state);

  CLI11_PARSE(app, argc, argv);

  try {
    if (app.got_subcommand(synth)) return cmd_synth(state);
    if (app.got_subcommand(train_cmd))
      return state.precision == "f64" ? cmd_train<double>(state) : cmd_train<float>(state);
    if (app.got_subcommand(eval_cmd)) return cmd_eval(state);
    if (app.got_subcommand(bench_cmd))
      return state.precision == "f64" ? cmd_bench<double>(state) : cmd_bench<float>(state);
    if (app.got_subcommand(gradcheck_cmd)) return cmd_gradcheck(state);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
