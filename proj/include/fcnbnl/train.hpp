#pragma once

#include <algorithm>
#include <chrono>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "fcnbnl/dataset.hpp"
#include "fcnbnl/fcn.hpp"
#include "fcnbnl/nbnl.hpp"

namespace fcnbnl {

struct TrainingConfig {
  int epochs = 30;
  int batch_size = 8;
  double learning_rate = 0.5;
  std::optional<std::pair<int, int>> lr_drop_epochs;  // defaults to 50% / 75% of epochs
  double lr_drop_factor = 0.1;
  double weight_decay_prototypes = 1e-5;
  double weight_decay_network = 0.0;
  std::uint64_t seed = 0;
  int fine_tune_last_n_layers = 2;
  bool rgb_jitter = false;

  void validate() const {
    check(epochs >= 1, "training: epochs must be >= 1");
    check(batch_size >= 1, "training: batch_size must be >= 1");
    check(learning_rate >= 0.0, "training: learning rate must be >= 0");
    check(lr_drop_factor > 0.0, "training: lr_drop_factor must be > 0");
    check(weight_decay_prototypes >= 0.0 && weight_decay_network >= 0.0, "training: weight decay must be >= 0");
    check(fine_tune_last_n_layers >= 0, "training: fine_tune_last_n_layers must be >= 0");
    if (lr_drop_epochs) check(lr_drop_epochs->first <= lr_drop_epochs->second, "training: drop epochs must ascend");
  }

  std::pair<int, int> resolved_drops() const {
    if (lr_drop_epochs) return *lr_drop_epochs;
    return {epochs / 2, (3 * epochs) / 4};
  }

  /// Fixed base rate, dropped by lr_drop_factor at each of the two drop epochs.
  double lr_at_epoch(int epoch) const {
    const auto [d1, d2] = resolved_drops();
    double lr = learning_rate;
    if (epoch >= d1) lr *= lr_drop_factor;
    if (epoch >= d2) lr *= lr_drop_factor;
    return lr;
  }
};

struct EpochStats {
  int epoch = 0;
  double loss = 0.0;  // mean per-image surrogate loss
  double lr = 0.0;
};

/// Sample p descriptors per class uniformly at random (reservoir over the full
/// descriptor population), perturb with sigma=0.01 noise and project onto the
/// unit ball.
template <typename T>
PrototypeBank<T> init_prototype_bank(FcnModel<T>& model, const Dataset& train_set,
                                     const ScalePyramidConfig& pyramid, const NbnlConfig& cfg,
                                     std::uint64_t seed) {
  cfg.validate();
  train_set.validate();
  check(train_set.label_set.k() == cfg.k, "prototype init: dataset has " +
                                              std::to_string(train_set.label_set.k()) + " classes, config wants " +
                                              std::to_string(cfg.k));
  const int d = model.topology.descriptor_dim();
  PrototypeBank<T> bank(cfg, d);
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> seen(cfg.k, 0);

  for (std::size_t i = 0; i < train_set.size(); ++i) {
    const int y = train_set.labels[i];
    auto msd = extract_multiscale(model, train_set.images[i], pyramid, BnMode::kInfer);
    for (const auto& grid : msd.scales) {
      for (int j = 0; j < grid.eta(); ++j) {
        // reservoir of size p over the class's descriptor stream
        std::size_t pick = seen[y];
        if (seen[y] >= static_cast<std::size_t>(cfg.p)) {
          std::uniform_int_distribution<std::size_t> slot(0, seen[y]);
          pick = slot(rng);
        }
        if (pick < static_cast<std::size_t>(cfg.p)) {
          auto dst = bank.prototype(y, static_cast<int>(pick));
          auto src = grid.descriptor(j);
          std::copy(src.begin(), src.end(), dst.begin());
        }
        ++seen[y];
      }
    }
  }
  for (int y = 0; y < cfg.k; ++y)
    check(seen[y] >= static_cast<std::size_t>(cfg.p),
          "prototype init: class " + std::to_string(y) + " yielded fewer descriptors than prototypes");

  std::normal_distribution<double> noise(0.0, 0.01);
  for (auto& v : bank.w.data) v += static_cast<T>(noise(rng));
  project_prototypes(bank);
  return bank;
}

namespace detail {

inline Image jitter_rgb(const Image& im, std::mt19937_64& rng, double sigma) {
  std::normal_distribution<double> n(0.0, sigma);
  Image out = im;
  std::vector<float> shift(im.channels);
  for (auto& s : shift) s = static_cast<float>(n(rng));
  for (int y = 0; y < im.height; ++y)
    for (int x = 0; x < im.width; ++x)
      for (int c = 0; c < im.channels; ++c)
        out.at(y, x, c) = std::clamp(im.at(y, x, c) + shift[c], 0.0f, 1.0f);
  return out;
}

template <typename T>
bool any_trainable(const FcnModel<T>& model) {
  return std::any_of(model.trainable.begin(), model.trainable.end(), [](bool b) { return b; });
}

}  // namespace detail

/// Mini-batch SGD on the Jensen surrogate. Prototypes get weight decay and a
/// unit-ball projection after every step; only trainable layers of the
/// extractor are updated. Single-threaded and bit-reproducible per seed.
/// Aborts with the offending batch index if the loss turns non-finite.
template <typename T>
std::vector<EpochStats> train(FcnModel<T>& model, PrototypeBank<T>& bank, const Dataset& train_set,
                              const ScalePyramidConfig& pyramid, const TrainingConfig& cfg) {
  cfg.validate();
  model.validate();
  bank.config.validate();
  train_set.validate();
  pyramid.validate();
  check(train_set.label_set.k() == bank.config.k,
        "train: dataset classes (" + std::to_string(train_set.label_set.k()) + ") do not match bank k (" +
            std::to_string(bank.config.k) + ")");
  check(model.topology.descriptor_dim() == bank.dim(), "train: descriptor dim does not match prototype dim");

  const bool tune_extractor = detail::any_trainable(model);
  const bool bn_active = model.topology.batch_norm_before_head;
  const BnMode mode = bn_active ? BnMode::kTrain : BnMode::kInfer;
  // With a frozen extractor and static inputs the descriptors never change;
  // extract once instead of once per epoch.
  const bool cache_descriptors = !tune_extractor && !cfg.rgb_jitter && !bn_active;

  std::vector<MultiScaleDescriptors<T>> cached;
  if (cache_descriptors) {
    cached.reserve(train_set.size());
    for (const auto& im : train_set.images) cached.push_back(extract_multiscale(model, im, pyramid, BnMode::kInfer));
  }

  std::vector<EpochStats> history;
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.lr_at_epoch(epoch);
    std::mt19937_64 epoch_rng(cfg.seed + 0x9E3779B97F4A7C15ull * static_cast<std::uint64_t>(epoch + 1));
    std::shuffle(order.begin(), order.end(), epoch_rng);

    double loss_sum = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_index) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const auto batch_n = static_cast<T>(end - start);

      Tensor<T> grad_w(bank.w.dims);
      FcnGradients<T> grad_theta = zero_gradients(model);
      try {
        for (std::size_t b = start; b < end; ++b) {
          const std::size_t i = order[b];
          MultiScaleDescriptors<T> msd;
          std::vector<FcnForwardCache<T>> caches;
          if (cache_descriptors) {
            msd = cached[i];
          } else {
            const Image* input = &train_set.images[i];
            Image jittered;
            if (cfg.rgb_jitter) {
              jittered = detail::jitter_rgb(train_set.images[i], epoch_rng, 0.02);
              input = &jittered;
            }
            msd = extract_multiscale(model, *input, pyramid, mode, tune_extractor || bn_active ? &caches : nullptr);
          }

          auto sres = surrogate_loss(msd, bank, train_set.labels[i]);
          loss_sum += sres.loss;
          for (std::size_t j = 0; j < grad_w.data.size(); ++j) grad_w.data[j] += sres.grad_prototypes.data[j];
          if (tune_extractor || bn_active) {
            for (std::size_t s = 0; s < caches.size(); ++s) {
              grad_theta.accumulate(fcn_backward(model, caches[s], sres.grad_descriptors.scales[s]));
            }
          }
        }
      } catch (const std::runtime_error& e) {
        throw std::runtime_error("train: diverged at epoch " + std::to_string(epoch) + ", batch " +
                                 std::to_string(batch_index) + ": " + e.what());
      }

      // SGD step with decoupled l2 decay; prototypes are re-projected.
      const T step = static_cast<T>(lr) / batch_n;
      const T wd_p = static_cast<T>(lr * cfg.weight_decay_prototypes);
      for (std::size_t j = 0; j < bank.w.data.size(); ++j) {
        bank.w.data[j] -= step * grad_w.data[j] + wd_p * bank.w.data[j];
      }
      project_prototypes(bank);

      if (tune_extractor) {
        const T wd_n = static_cast<T>(lr * cfg.weight_decay_network);
        for (int l = 0; l < model.topology.num_layers(); ++l) {
          if (!model.trainable[l]) continue;
          auto& w = model.weights[l];
          for (std::size_t j = 0; j < w.data.size(); ++j)
            w.data[j] -= step * grad_theta.weights[l].data[j] + wd_n * w.data[j];
          if (model.topology.layers[l].has_bias) {
            auto& bb = model.biases[l];
            for (std::size_t j = 0; j < bb.data.size(); ++j) bb.data[j] -= step * grad_theta.biases[l].data[j];
          }
        }
      }
      if (bn_active && tune_extractor) {
        for (std::size_t j = 0; j < model.bn.gamma.size(); ++j) {
          model.bn.gamma[j] -= step * grad_theta.bn_gamma[j];
          model.bn.beta[j] -= step * grad_theta.bn_beta[j];
        }
      }
    }
    history.push_back({epoch, loss_sum / static_cast<double>(train_set.size()), lr});
  }
  return history;
}

/// Accuracy, confusion and per-class breakdown of f_NBNL over a dataset.
/// descriptors_per_second is wall-clock throughput and is deliberately not
/// part of equality: two evaluations of the same state compare equal.
struct EvalReport {
  double accuracy = 0.0;
  std::vector<std::vector<int>> confusion;  // rows = truth, cols = prediction
  std::vector<double> per_class_accuracy;
  double descriptors_per_second = 0.0;
  long long total_descriptors = 0;

  friend bool operator==(const EvalReport& a, const EvalReport& b) {
    return a.accuracy == b.accuracy && a.confusion == b.confusion &&
           a.per_class_accuracy == b.per_class_accuracy && a.total_descriptors == b.total_descriptors;
  }
};

template <typename T>
EvalReport evaluate(FcnModel<T>& model, const PrototypeBank<T>& bank, const Dataset& test_set,
                    const ScalePyramidConfig& pyramid) {
  test_set.validate();
  check(test_set.label_set.k() == bank.config.k,
        "evaluate: dataset classes (" + std::to_string(test_set.label_set.k()) + ") do not match bank k (" +
            std::to_string(bank.config.k) + ")");

  EvalReport report;
  const int k = bank.config.k;
  report.confusion.assign(k, std::vector<int>(k, 0));

  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t i = 0; i < test_set.size(); ++i) {
    auto msd = extract_multiscale(model, test_set.images[i], pyramid, BnMode::kInfer);
    report.total_descriptors += msd.total();
    const int pred = classify_nbnl(msd, bank);
    report.confusion[test_set.labels[i]][pred] += 1;
  }
  const auto t1 = std::chrono::steady_clock::now();
  const double secs = std::chrono::duration<double>(t1 - t0).count();
  report.descriptors_per_second = secs > 0.0 ? static_cast<double>(report.total_descriptors) / secs : 0.0;

  long long correct = 0;
  report.per_class_accuracy.assign(k, 0.0);
  for (int y = 0; y < k; ++y) {
    long long row = 0;
    for (int j = 0; j < k; ++j) row += report.confusion[y][j];
    correct += report.confusion[y][y];
    report.per_class_accuracy[y] = row > 0 ? static_cast<double>(report.confusion[y][y]) / static_cast<double>(row)
                                           : 0.0;
  }
  report.accuracy = static_cast<double>(correct) / static_cast<double>(test_set.size());
  return report;
}

inline void write_history_csv(const std::vector<EpochStats>& history, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("history csv: cannot open '" + path + "'");
  out << "epoch,loss,lr\n";
  for (const auto& e : history) out << e.epoch << "," << e.loss << "," << e.lr << "\n";
}

inline void write_confusion_csv(const EvalReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("confusion csv: cannot open '" + path + "'");
  out << "label_true,label_pred,count\n";
  for (std::size_t y = 0; y < report.confusion.size(); ++y)
    for (std::size_t j = 0; j < report.confusion[y].size(); ++j)
      out << y << "," << j << "," << report.confusion[y][j] << "\n";
}

// ---------------------------------------------------------------------------
// Gradient checking (64-bit): analytic gradients vs central finite
// differences with step 1e-5 on randomly sampled parameters.

enum class GradCheckComponent { kOmega, kSurrogate, kFcnLayers, kFullStack };

inline const char* to_string(GradCheckComponent c) {
  switch (c) {
    case GradCheckComponent::kOmega: return "omega";
    case GradCheckComponent::kSurrogate: return "surrogate";
    case GradCheckComponent::kFcnLayers: return "fcn_layers";
    case GradCheckComponent::kFullStack: return "full_stack";
  }
  fail("unknown gradcheck component");
}

struct GradCheckReport {
  std::string component;
  int trials = 0;
  double tolerance = 0.0;
  double max_rel_err = 0.0;
  bool passed = false;
};

namespace detail {

inline double gc_rel_err(double a, double b) {
  return std::abs(a - b) / std::max({1e-4, std::abs(a), std::abs(b)});
}

constexpr double kGcStep = 1e-5;

template <typename F>
double central_diff(std::vector<double>& params, std::size_t i, const F& f) {
  const double orig = params[i];
  params[i] = orig + kGcStep;
  const double fp = f();
  params[i] = orig - kGcStep;
  const double fm = f();
  params[i] = orig;
  return (fp - fm) / (2.0 * kGcStep);
}

inline std::vector<double> gc_unit_ball(int d, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> ur(0.2, 1.0);
  std::vector<double> v(d);
  double norm2 = 0;
  for (auto& x : v) {
    x = n(rng);
    norm2 += x * x;
  }
  const double s = ur(rng) / std::sqrt(std::max(norm2, 1e-30));
  for (auto& x : v) x *= s;
  return v;
}

inline double gc_omega_trial(std::mt19937_64& rng) {
  const int d = 5, p = 3;
  const double qs[4] = {1.0, 2.0, 4.0, 10.0};
  for (;;) {
    const double q = qs[rng() % 4];
    auto z = gc_unit_ball(d, rng);
    std::vector<double> protos;
    for (int j = 0; j < p; ++j) {
      auto s = gc_unit_ball(d, rng);
      protos.insert(protos.end(), s.begin(), s.end());
    }
    bool margin_ok = true, any_active = false;
    for (int j = 0; j < p; ++j) {
      double dot = 0;
      for (int t = 0; t < d; ++t) dot += z[t] * protos[j * d + t];
      if (std::abs(dot) < 1e-2) margin_ok = false;
      if (dot > 0) any_active = true;
    }
    if (!margin_ok || !any_active) continue;

    std::vector<double> gz(d, 0.0), gw(p * d, 0.0);
    omega_backward<double>(z, protos, p, q, 1.0, gz, gw);
    double err = 0.0;
    for (int t = 0; t < d; ++t)
      err = std::max(err, gc_rel_err(gz[t], central_diff(z, t, [&] { return omega<double>(z, protos, p, q); })));
    for (int t = 0; t < p * d; ++t)
      err = std::max(err,
                     gc_rel_err(gw[t], central_diff(protos, t, [&] { return omega<double>(z, protos, p, q); })));
    return err;
  }
}

inline double gc_min_hinge_margin(const MultiScaleDescriptors<double>& x, const PrototypeBank<double>& bank) {
  double m = 1e300;
  for (const auto& g : x.scales)
    for (int i = 0; i < g.eta(); ++i) {
      auto z = g.descriptor(i);
      for (int y = 0; y < bank.config.k; ++y)
        for (int j = 0; j < bank.config.p; ++j) {
          auto s = bank.prototype(y, j);
          double dot = 0;
          for (std::size_t t = 0; t < z.size(); ++t) dot += z[t] * s[t];
          m = std::min(m, std::abs(dot));
        }
    }
  return m;
}

inline double gc_surrogate_trial(std::mt19937_64& rng) {
  for (;;) {
    NbnlConfig cfg;
    cfg.k = 2 + static_cast<int>(rng() % 3);
    cfg.p = 1 + static_cast<int>(rng() % 2);
    cfg.q = std::vector<double>{1.0, 2.0, 4.0, 10.0}[rng() % 4];
    const int d = 4;
    PrototypeBank<double> bank(cfg, d);
    for (int y = 0; y < cfg.k; ++y)
      for (int j = 0; j < cfg.p; ++j) {
        auto v = gc_unit_ball(d, rng);
        std::copy(v.begin(), v.end(), bank.prototype(y, j).begin());
      }
    MultiScaleDescriptors<double> x;
    const int m = 1 + static_cast<int>(rng() % 2);
    for (int s = 0; s < m; ++s) {
      DescriptorGrid<double> g(1, 1 + static_cast<int>(rng() % 2), d);
      for (int i = 0; i < g.eta(); ++i) {
        auto v = gc_unit_ball(d, rng);
        std::copy(v.begin(), v.end(), g.descriptor(i).begin());
      }
      x.scales.push_back(std::move(g));
    }
    if (gc_min_hinge_margin(x, bank) < 1e-2) continue;
    const int label = static_cast<int>(rng() % cfg.k);

    auto res = surrogate_loss(x, bank, label);
    double err = 0.0;
    for (std::size_t t = 0; t < bank.w.data.size(); ++t)
      err = std::max(err, gc_rel_err(res.grad_prototypes.data[t], central_diff(bank.w.data, t, [&] {
                       return surrogate_loss(x, bank, label).loss;
                     })));
    for (auto& scale : x.scales) {
      const std::size_t s_idx = static_cast<std::size_t>(&scale - x.scales.data());
      for (std::size_t t = 0; t < scale.data.size(); ++t)
        err = std::max(err, gc_rel_err(res.grad_descriptors.scales[s_idx].data[t], central_diff(scale.data, t, [&] {
                         return surrogate_loss(x, bank, label).loss;
                       })));
    }
    return err;
  }
}

inline FcnTopology gc_tiny_topology() {
  FcnTopology t;
  t.layers = {
      {.kernel_size = 3, .stride = 1, .in_channels = 2, .out_channels = 4, .has_bias = true},
      {.kernel_size = 2, .stride = 2, .in_channels = 4, .out_channels = 4, .has_bias = true},
  };
  t.relu_after = {true, false};
  t.normalize_descriptors = true;
  t.batch_norm_before_head = false;
  return t;
}

inline double gc_min_abs_preact(FcnModel<double>& model, const Tensor<double>& image) {
  FcnForwardCache<double> cache;
  fcn_forward(model, image, BnMode::kInfer, &cache);
  double m = 1e300;
  for (const auto& pre : cache.preacts)
    for (double v : pre.data) m = std::min(m, std::abs(v));
  return m;
}

// One trial over a tiny stack: image -> descriptors -> surrogate loss.
// `layer_only` restricts the check to one conv layer's parameters.
inline double gc_stack_trial(std::mt19937_64& rng, std::optional<int> layer_only) {
  const auto topo = gc_tiny_topology();
  for (;;) {
    auto model = init_fcn_model<double>(topo, rng(), 2);
    Tensor<double> image({2, 6, 6});
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (auto& v : image.data) v = u(rng);
    if (gc_min_abs_preact(model, image) < 1e-3) continue;

    NbnlConfig cfg;
    cfg.k = 2;
    cfg.p = 2;
    cfg.q = 4.0;
    PrototypeBank<double> bank(cfg, topo.descriptor_dim());
    for (int y = 0; y < cfg.k; ++y)
      for (int j = 0; j < cfg.p; ++j) {
        auto v = gc_unit_ball(topo.descriptor_dim(), rng);
        std::copy(v.begin(), v.end(), bank.prototype(y, j).begin());
      }
    const int label = static_cast<int>(rng() % cfg.k);

    auto loss_of = [&](FcnModel<double>& m2) {
      auto grid = fcn_forward(m2, image, BnMode::kInfer);
      MultiScaleDescriptors<double> x;
      x.scales.push_back(grid);
      return surrogate_loss(x, bank, label).loss;
    };

    MultiScaleDescriptors<double> x;
    std::vector<FcnForwardCache<double>> caches;
    caches.emplace_back();
    x.scales.push_back(fcn_forward(model, image, BnMode::kInfer, &caches[0]));
    if (gc_min_hinge_margin(x, bank) < 1e-2) continue;

    auto sres = surrogate_loss(x, bank, label);
    auto theta = fcn_backward(model, caches[0], sres.grad_descriptors.scales[0]);

    double err = 0.0;
    std::uniform_int_distribution<std::size_t> pick;
    for (int layer = 0; layer < topo.num_layers(); ++layer) {
      if (layer_only && *layer_only != layer) continue;
      auto& wdata = model.weights[layer].data;
      // sample a subset of coordinates per layer
      const std::size_t samples = std::min<std::size_t>(wdata.size(), 20);
      for (std::size_t s = 0; s < samples; ++s) {
        const std::size_t t = rng() % wdata.size();
        err = std::max(err, gc_rel_err(theta.weights[layer].data[t],
                                       central_diff(wdata, t, [&] { return loss_of(model); })));
      }
      auto& bdata = model.biases[layer].data;
      for (std::size_t t = 0; t < bdata.size(); ++t)
        err = std::max(err,
                       gc_rel_err(theta.biases[layer].data[t], central_diff(bdata, t, [&] { return loss_of(model); })));
    }
    if (!layer_only) {
      for (std::size_t t = 0; t < bank.w.data.size(); ++t)
        err = std::max(err, gc_rel_err(sres.grad_prototypes.data[t], central_diff(bank.w.data, t, [&] {
                         auto grid = fcn_forward(model, image, BnMode::kInfer);
                         MultiScaleDescriptors<double> xx;
                         xx.scales.push_back(grid);
                         return surrogate_loss(xx, bank, label).loss;
                       })));
    }
    return err;
  }
}

}  // namespace detail

/// Default tolerances: 1e-5 for omega and the surrogate, 1e-4 through the
/// convolutional stack.
inline double default_grad_tolerance(GradCheckComponent c) {
  switch (c) {
    case GradCheckComponent::kOmega:
    case GradCheckComponent::kSurrogate: return 1e-5;
    case GradCheckComponent::kFcnLayers:
    case GradCheckComponent::kFullStack: return 1e-4;
  }
  fail("unknown gradcheck component");
}

inline GradCheckReport grad_check(GradCheckComponent component, double tolerance, int trials,
                                  std::uint64_t seed = 12345) {
  check(trials >= 1, "grad_check: trials must be >= 1");
  std::mt19937_64 rng(seed);
  GradCheckReport report;
  report.component = to_string(component);
  report.trials = trials;
  report.tolerance = tolerance;
  for (int t = 0; t < trials; ++t) {
    double err = 0.0;
    switch (component) {
      case GradCheckComponent::kOmega: err = detail::gc_omega_trial(rng); break;
      case GradCheckComponent::kSurrogate: err = detail::gc_surrogate_trial(rng); break;
      case GradCheckComponent::kFcnLayers: {
        for (int layer = 0; layer < 2; ++layer)
          err = std::max(err, detail::gc_stack_trial(rng, layer));
        break;
      }
      case GradCheckComponent::kFullStack: err = detail::gc_stack_trial(rng, std::nullopt); break;
    }
    report.max_rel_err = std::max(report.max_rel_err, err);
  }
  report.passed = report.max_rel_err < tolerance;
  return report;
}

}  // namespace fcnbnl
