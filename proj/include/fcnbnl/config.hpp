#pragma once

#include <array>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fcnbnl/dataset.hpp"
#include "fcnbnl/fcn.hpp"
#include "fcnbnl/nbnl.hpp"
#include "fcnbnl/perturb.hpp"
#include "fcnbnl/train.hpp"

namespace fcnbnl {

/// Every key the run configuration understands. Anything else is rejected
/// before any work starts.
inline const std::vector<std::string>& config_schema() {
  static const std::vector<std::string> keys = {
      "dataset.path",
      "dataset.train_fraction",
      "synth.k",
      "synth.images_per_class",
      "synth.image_size",
      "synth.motif_size",
      "synth.noise_level",
      "synth.seed",
      "topology.layers",
      "topology.in_channels",
      "topology.normalize",
      "topology.batch_norm",
      "pyramid.factors",
      "pyramid.base",
      "nbnl.q",
      "nbnl.p",
      "train.epochs",
      "train.batch_size",
      "train.lr",
      "train.lr_drop_epochs",
      "train.lr_drop_factor",
      "train.weight_decay_prototypes",
      "train.weight_decay_network",
      "train.fine_tune_last_n_layers",
      "train.rgb_jitter",
      "eval.checkpoint",
      "eval.perturb",
      "bench.counts",
      "bench.reps",
      "bench.patch_sizes",
      "bench.images",
      "gradcheck.component",
      "gradcheck.tolerance",
      "gradcheck.trials",
  };
  return keys;
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  fail("config: '" + key + "' expects a boolean, got '" + v + "'");
}

inline long parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long x = std::stol(v, &used);
    check(used == v.size(), "config: '" + key + "' expects an integer, got '" + v + "'");
    return x;
  } catch (const std::invalid_argument&) {
    fail("config: '" + key + "' expects an integer, got '" + v + "'");
  } catch (const std::out_of_range&) {
    fail("config: '" + key + "' integer out of range: '" + v + "'");
  }
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    check(used == v.size(), "config: '" + key + "' expects a number, got '" + v + "'");
    return x;
  } catch (const std::invalid_argument&) {
    fail("config: '" + key + "' expects a number, got '" + v + "'");
  } catch (const std::out_of_range&) {
    fail("config: '" + key + "' number out of range: '" + v + "'");
  }
}

template <typename T, typename F>
std::vector<T> parse_list(const std::string& key, const std::string& v, const F& one) {
  std::vector<T> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(one(key, item));
  }
  check(!out.empty(), "config: '" + key + "' expects a non-empty comma list, got '" + v + "'");
  return out;
}

}  // namespace detail

/// Parse the flat `key = value` format; '#' starts a comment, blank lines are
/// skipped. Later assignments win.
inline std::map<std::string, std::string> parse_config_text(std::istream& in) {
  std::map<std::string, std::string> values;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    check(eq != std::string::npos, "config: line " + std::to_string(lineno) + " is not 'key = value': '" + line + "'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    check(!key.empty(), "config: empty key on line " + std::to_string(lineno));
    values[key] = value;
  }
  return values;
}

inline std::map<std::string, std::string> parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("config: cannot open '" + path + "'");
  return parse_config_text(in);
}

/// Layer list DSL: "conv5x16s2+relu, conv3x32s2+relu, conv3x64s1" — kernel,
/// filter count, stride, optional trailing +relu. Input channels chain from
/// layer to layer.
inline FcnTopology parse_topology_layers(const std::string& text, int in_channels) {
  FcnTopology topo;
  int prev_channels = in_channels;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    tok = detail::trim(tok);
    if (tok.empty()) continue;
    bool relu = false;
    std::string body = tok;
    if (const auto plus = body.find('+'); plus != std::string::npos) {
      const std::string suffix = detail::trim(body.substr(plus + 1));
      check(suffix == "relu", "config: unknown layer suffix '" + suffix + "' in '" + tok + "'");
      relu = true;
      body = detail::trim(body.substr(0, plus));
    }
    check(body.rfind("conv", 0) == 0, "config: layer '" + tok + "' must start with 'conv'");
    const auto x = body.find('x', 4);
    const auto s = body.find('s', x == std::string::npos ? 4 : x);
    check(x != std::string::npos && s != std::string::npos,
          "config: layer '" + tok + "' must look like convKxCsS[+relu]");
    const int kernel = static_cast<int>(detail::parse_int("topology.layers", body.substr(4, x - 4)));
    const int channels = static_cast<int>(detail::parse_int("topology.layers", body.substr(x + 1, s - x - 1)));
    const int stride = static_cast<int>(detail::parse_int("topology.layers", body.substr(s + 1)));
    topo.layers.push_back({.kernel_size = kernel,
                           .stride = stride,
                           .in_channels = prev_channels,
                           .out_channels = channels,
                           .has_bias = true});
    topo.relu_after.push_back(relu);
    prev_channels = channels;
  }
  check(!topo.layers.empty(), "config: 'topology.layers' defines no layers");
  return topo;
}

inline std::string topology_layers_to_string(const FcnTopology& topo) {
  std::string out;
  for (int i = 0; i < topo.num_layers(); ++i) {
    const auto& l = topo.layers[i];
    if (i) out += ",";
    out += "conv" + std::to_string(l.kernel_size) + "x" + std::to_string(l.out_channels) + "s" +
           std::to_string(l.stride);
    if (topo.relu_after[i]) out += "+relu";
  }
  return out;
}

/// Fully validated run configuration; the single source every subcommand
/// reads from.
struct RunConfig {
  std::optional<std::string> dataset_path;
  double train_fraction = 2.0 / 3.0;
  SynthConfig synth;
  FcnTopology topology = default_topology();
  ScalePyramidConfig pyramid;
  NbnlConfig nbnl;  // k is taken from the dataset at run time
  TrainingConfig training;
  std::optional<std::string> eval_checkpoint;
  std::string eval_perturb = "original";
  std::vector<int> bench_counts{16, 52, 110};
  int bench_reps = 5;
  std::vector<int> bench_patch_sizes{16, 24, 32};
  int bench_images = 4;
  std::string gradcheck_component = "all";
  std::optional<double> gradcheck_tolerance;  // overrides the per-component defaults
  int gradcheck_trials = 20;
};

/// Apply a flat key/value map on top of defaults. Unknown keys and malformed
/// values are hard errors; nothing is executed before this passes.
inline RunConfig make_run_config(const std::map<std::string, std::string>& values, std::uint64_t global_seed) {
  for (const auto& [key, value] : values) {
    const auto& schema = config_schema();
    check(std::find(schema.begin(), schema.end(), key) != schema.end(), "config: unknown key '" + key + "'");
  }

  RunConfig cfg;
  cfg.synth.seed = global_seed;
  cfg.training.seed = global_seed;

  auto get = [&](const char* key) -> std::optional<std::string> {
    auto it = values.find(key);
    if (it == values.end()) return std::nullopt;
    return it->second;
  };

  if (auto v = get("dataset.path")) cfg.dataset_path = *v;
  if (auto v = get("dataset.train_fraction")) cfg.train_fraction = detail::parse_double("dataset.train_fraction", *v);

  if (auto v = get("synth.k")) cfg.synth.k = static_cast<int>(detail::parse_int("synth.k", *v));
  if (auto v = get("synth.images_per_class"))
    cfg.synth.images_per_class = static_cast<int>(detail::parse_int("synth.images_per_class", *v));
  if (auto v = get("synth.image_size")) cfg.synth.image_size = static_cast<int>(detail::parse_int("synth.image_size", *v));
  if (auto v = get("synth.motif_size")) cfg.synth.motif_size = static_cast<int>(detail::parse_int("synth.motif_size", *v));
  if (auto v = get("synth.noise_level")) cfg.synth.noise_level = detail::parse_double("synth.noise_level", *v);
  if (auto v = get("synth.seed")) cfg.synth.seed = static_cast<std::uint64_t>(detail::parse_int("synth.seed", *v));

  int in_channels = 3;
  if (auto v = get("topology.in_channels")) in_channels = static_cast<int>(detail::parse_int("topology.in_channels", *v));
  if (auto v = get("topology.layers")) {
    cfg.topology = parse_topology_layers(*v, in_channels);
  } else if (in_channels != 3) {
    cfg.topology = default_topology(in_channels);
  }
  if (auto v = get("topology.normalize")) cfg.topology.normalize_descriptors = detail::parse_bool("topology.normalize", *v);
  if (auto v = get("topology.batch_norm")) cfg.topology.batch_norm_before_head = detail::parse_bool("topology.batch_norm", *v);
  cfg.topology.validate();

  if (auto v = get("pyramid.factors"))
    cfg.pyramid.factors = detail::parse_list<double>("pyramid.factors", *v, detail::parse_double);
  if (auto v = get("pyramid.base")) cfg.pyramid.base_resolution = static_cast<int>(detail::parse_int("pyramid.base", *v));
  cfg.pyramid.validate();

  if (auto v = get("nbnl.q")) cfg.nbnl.q = detail::parse_double("nbnl.q", *v);
  if (auto v = get("nbnl.p")) cfg.nbnl.p = static_cast<int>(detail::parse_int("nbnl.p", *v));
  check(cfg.nbnl.q >= 1.0, "config: 'nbnl.q' must be >= 1");
  check(cfg.nbnl.p >= 1, "config: 'nbnl.p' must be >= 1");

  if (auto v = get("train.epochs")) cfg.training.epochs = static_cast<int>(detail::parse_int("train.epochs", *v));
  if (auto v = get("train.batch_size"))
    cfg.training.batch_size = static_cast<int>(detail::parse_int("train.batch_size", *v));
  if (auto v = get("train.lr")) cfg.training.learning_rate = detail::parse_double("train.lr", *v);
  if (auto v = get("train.lr_drop_epochs")) {
    if (*v != "auto") {
      auto drops = detail::parse_list<long>("train.lr_drop_epochs", *v, detail::parse_int);
      check(drops.size() == 2, "config: 'train.lr_drop_epochs' expects two epochs or 'auto'");
      cfg.training.lr_drop_epochs = {{static_cast<int>(drops[0]), static_cast<int>(drops[1])}};
    }
  }
  if (auto v = get("train.lr_drop_factor")) cfg.training.lr_drop_factor = detail::parse_double("train.lr_drop_factor", *v);
  if (auto v = get("train.weight_decay_prototypes"))
    cfg.training.weight_decay_prototypes = detail::parse_double("train.weight_decay_prototypes", *v);
  if (auto v = get("train.weight_decay_network"))
    cfg.training.weight_decay_network = detail::parse_double("train.weight_decay_network", *v);
  if (auto v = get("train.fine_tune_last_n_layers"))
    cfg.training.fine_tune_last_n_layers = static_cast<int>(detail::parse_int("train.fine_tune_last_n_layers", *v));
  if (auto v = get("train.rgb_jitter")) cfg.training.rgb_jitter = detail::parse_bool("train.rgb_jitter", *v);
  cfg.training.validate();

  if (auto v = get("eval.checkpoint")) cfg.eval_checkpoint = *v;
  if (auto v = get("eval.perturb")) cfg.eval_perturb = *v;
  if (cfg.eval_perturb != "all") perturbation_from_string(cfg.eval_perturb);  // validates

  if (auto v = get("bench.counts"))
    cfg.bench_counts = detail::parse_list<int>("bench.counts", *v, [](const std::string& k, const std::string& s) {
      return static_cast<int>(detail::parse_int(k, s));
    });
  if (auto v = get("bench.reps")) cfg.bench_reps = static_cast<int>(detail::parse_int("bench.reps", *v));
  if (auto v = get("bench.patch_sizes"))
    cfg.bench_patch_sizes =
        detail::parse_list<int>("bench.patch_sizes", *v, [](const std::string& k, const std::string& s) {
          return static_cast<int>(detail::parse_int(k, s));
        });
  if (auto v = get("bench.images")) cfg.bench_images = static_cast<int>(detail::parse_int("bench.images", *v));
  check(cfg.bench_reps >= 5, "config: 'bench.reps' must be >= 5");
  check(cfg.bench_images >= 1, "config: 'bench.images' must be >= 1");

  if (auto v = get("gradcheck.component")) cfg.gradcheck_component = *v;
  check(cfg.gradcheck_component == "all" || cfg.gradcheck_component == "omega" ||
            cfg.gradcheck_component == "surrogate" || cfg.gradcheck_component == "fcn" ||
            cfg.gradcheck_component == "stack",
        "config: 'gradcheck.component' must be all|omega|surrogate|fcn|stack");
  if (auto v = get("gradcheck.tolerance")) {
    cfg.gradcheck_tolerance = detail::parse_double("gradcheck.tolerance", *v);
    check(*cfg.gradcheck_tolerance > 0.0, "config: 'gradcheck.tolerance' must be > 0");
  }
  if (auto v = get("gradcheck.trials")) cfg.gradcheck_trials = static_cast<int>(detail::parse_int("gradcheck.trials", *v));
  check(cfg.gradcheck_trials >= 1, "config: 'gradcheck.trials' must be >= 1");

  check(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0, "config: 'dataset.train_fraction' must be in (0,1)");
  cfg.synth.validate();
  return cfg;
}

}  // namespace fcnbnl
