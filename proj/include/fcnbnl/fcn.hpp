#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "fcnbnl/descriptors.hpp"
#include "fcnbnl/image.hpp"
#include "fcnbnl/ops.hpp"

namespace fcnbnl {

/// Topology of the fully-convolutional extractor. The final conv layer plays
/// the role of a fully-connected layer; its filter count is the descriptor
/// dimension D.
struct FcnTopology {
  std::vector<ConvLayerSpec> layers;
  std::vector<bool> relu_after;
  bool normalize_descriptors = true;
  bool batch_norm_before_head = false;

  int descriptor_dim() const { return layers.empty() ? 0 : layers.back().out_channels; }
  int num_layers() const { return static_cast<int>(layers.size()); }
  int input_channels() const { return layers.empty() ? 0 : layers.front().in_channels; }

  void validate() const {
    check(!layers.empty(), "topology: need at least one conv layer");
    check(relu_after.size() == layers.size(), "topology: relu flag per layer required");
    check(descriptor_dim() >= 2, "topology: descriptor dim must be >= 2");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      ::fcnbnl::validate(layers[i]);
      if (i + 1 < layers.size())
        check(layers[i].out_channels == layers[i + 1].in_channels,
              "topology: channel mismatch between layers " + std::to_string(i) + " and " + std::to_string(i + 1));
    }
  }
};

/// Desk-scale default: conv5x16s2 + relu, conv3x32s2 + relu, conv3x64s1.
inline FcnTopology default_topology(int in_channels = 3, int descriptor_dim = 64) {
  FcnTopology t;
  t.layers = {
      {.kernel_size = 5, .stride = 2, .in_channels = in_channels, .out_channels = 16, .has_bias = true},
      {.kernel_size = 3, .stride = 2, .in_channels = 16, .out_channels = 32, .has_bias = true},
      {.kernel_size = 3, .stride = 1, .in_channels = 32, .out_channels = descriptor_dim, .has_bias = true},
  };
  t.relu_after = {true, true, false};
  return t;
}

/// Receptive-field recurrence: rf += (k-1)*jump, jump *= stride.
struct ReceptiveField {
  int rf = 1;
  int jump = 1;
};

inline ReceptiveField receptive_field(const FcnTopology& topo) {
  ReceptiveField r;
  for (const auto& l : topo.layers) {
    r.rf += (l.kernel_size - 1) * r.jump;
    r.jump *= l.stride;
  }
  return r;
}

/// Output grid extent for one spatial dimension, layer by layer.
inline int output_extent(const FcnTopology& topo, int in) {
  int e = in;
  for (const auto& l : topo.layers) {
    check(e >= l.kernel_size, "fcn: input extent " + std::to_string(in) + " is below the receptive field (" +
                                  std::to_string(receptive_field(topo).rf) + " pixels minimum)");
    e = (e - l.kernel_size) / l.stride + 1;
  }
  return e;
}

/// Number of descriptors for a given resolution. Depends only on the
/// topology and the resolution, never on the weights.
inline int eta(const FcnTopology& topo, int height, int width) {
  topo.validate();
  check(height >= 1 && width >= 1, "eta: resolution must be >= 1");
  return output_extent(topo, height) * output_extent(topo, width);
}

/// Extractor parameters: per-layer weights/biases, optional batch-norm state,
/// and a per-layer trainable mask.
template <typename T>
struct FcnModel {
  FcnTopology topology;
  std::vector<Tensor<T>> weights;  // per layer: out x in x k x k
  std::vector<Tensor<T>> biases;   // per layer: out (zeros when has_bias is false)
  BatchNormState<T> bn;
  std::vector<bool> trainable;

  void validate() const {
    topology.validate();
    check(weights.size() == topology.layers.size() && biases.size() == topology.layers.size(),
          "model: parameter count mismatch");
    for (std::size_t i = 0; i < weights.size(); ++i) {
      const auto& l = topology.layers[i];
      const std::vector<int> want{l.out_channels, l.in_channels, l.kernel_size, l.kernel_size};
      check(weights[i].dims == want, "model: layer " + std::to_string(i) + " weights " + weights[i].shape_str() +
                                         " do not match the topology");
      check(biases[i].dims == std::vector<int>{l.out_channels}, "model: layer " + std::to_string(i) + " bias shape");
    }
    check(trainable.size() == weights.size(), "model: trainable mask per layer required");
    if (topology.batch_norm_before_head)
      check(bn.dim() == topology.descriptor_dim(), "model: batch-norm state dim mismatch");
  }
};

/// He-style initialisation, deterministic in the seed. Only the last
/// `fine_tune_last_n` layers are marked trainable (0 freezes the extractor).
template <typename T>
FcnModel<T> init_fcn_model(const FcnTopology& topo, std::uint64_t seed, int fine_tune_last_n) {
  topo.validate();
  check(fine_tune_last_n >= 0, "model: fine_tune_last_n must be >= 0");
  FcnModel<T> m;
  m.topology = topo;
  std::mt19937_64 rng(seed);
  for (const auto& l : topo.layers) {
    const double fan_in = static_cast<double>(l.in_channels) * l.kernel_size * l.kernel_size;
    std::normal_distribution<double> n(0.0, std::sqrt(2.0 / fan_in));
    Tensor<T> w({l.out_channels, l.in_channels, l.kernel_size, l.kernel_size});
    for (auto& v : w.data) v = static_cast<T>(n(rng));
    m.weights.push_back(std::move(w));
    m.biases.emplace_back(std::vector<int>{l.out_channels});
  }
  const int first_trainable = std::max(0, topo.num_layers() - fine_tune_last_n);
  m.trainable.assign(topo.layers.size(), false);
  for (int i = first_trainable; i < topo.num_layers(); ++i) m.trainable[i] = true;
  if (topo.batch_norm_before_head) m.bn = BatchNormState<T>(topo.descriptor_dim());
  return m;
}

/// Everything the backward pass needs from one forward call.
template <typename T>
struct FcnForwardCache {
  std::vector<Tensor<T>> layer_inputs;  // input to conv layer i
  std::vector<Tensor<T>> preacts;       // conv output of layer i before relu
  int grid_h = 0, grid_w = 0;
  Tensor<T> head;        // descriptors after transpose, eta x D, before bn/normalize
  BnCache<T> bn_cache;
  Tensor<T> prenorm;     // eta x D just before L2 normalization
  std::vector<T> norms;  // per-descriptor L2 norms (0 for zero descriptors)
};

namespace detail {

// D x h x w feature map -> (h*w) x D descriptor matrix.
template <typename T>
Tensor<T> grid_to_rows(const Tensor<T>& fm) {
  const int d = fm.dims[0], h = fm.dims[1], w = fm.dims[2];
  Tensor<T> rows({h * w, d});
  for (int c = 0; c < d; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) rows.data[(static_cast<std::size_t>(y) * w + x) * d + c] = fm(c, y, x);
  return rows;
}

template <typename T>
Tensor<T> rows_to_grid(const Tensor<T>& rows, int d, int h, int w) {
  Tensor<T> fm({d, h, w});
  for (int c = 0; c < d; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) fm(c, y, x) = rows.data[(static_cast<std::size_t>(y) * w + x) * d + c];
  return fm;
}

}  // namespace detail

/// Run the extractor on one image tensor (C x H x W). Produces one descriptor
/// per spatial cell of the last conv layer; optionally batch-normalized over
/// the grid and L2-normalized per descriptor (zero vectors stay zero).
/// Train mode updates the batch-norm running statistics.
template <typename T>
DescriptorGrid<T> fcn_forward(FcnModel<T>& model, const Tensor<T>& image, BnMode mode,
                              FcnForwardCache<T>* cache = nullptr) {
  model.validate();
  check(image.rank() == 3, "fcn_forward: image tensor must be CxHxW");
  check(image.dims[0] == model.topology.input_channels(),
        "fcn_forward: image has " + std::to_string(image.dims[0]) + " channels, topology expects " +
            std::to_string(model.topology.input_channels()));
  const int rf = receptive_field(model.topology).rf;
  check(std::min(image.dims[1], image.dims[2]) >= rf,
        "fcn_forward: input " + std::to_string(image.dims[1]) + "x" + std::to_string(image.dims[2]) +
            " is below the receptive field (minimum input " + std::to_string(rf) + "x" + std::to_string(rf) + ")");

  Tensor<T> act = image;
  for (int i = 0; i < model.topology.num_layers(); ++i) {
    if (cache) cache->layer_inputs.push_back(act);
    Tensor<T> pre = conv2d(act, model.weights[i], model.biases[i], model.topology.layers[i].stride);
    if (cache) cache->preacts.push_back(pre);
    act = model.topology.relu_after[i] ? relu(pre) : std::move(pre);
  }

  const int d = model.topology.descriptor_dim();
  const int gh = act.dims[1], gw = act.dims[2];
  Tensor<T> rows = detail::grid_to_rows(act);
  if (cache) {
    cache->grid_h = gh;
    cache->grid_w = gw;
    cache->head = rows;
  }

  if (model.topology.batch_norm_before_head) {
    rows = batch_norm(rows, model.bn, mode, cache ? &cache->bn_cache : nullptr);
  }

  std::vector<T> norms(static_cast<std::size_t>(gh) * gw, T(0));
  if (cache) cache->prenorm = rows;
  if (model.topology.normalize_descriptors) {
    for (int i = 0; i < gh * gw; ++i) {
      T* row = rows.data.data() + static_cast<std::size_t>(i) * d;
      T norm2 = T(0);
      for (int c = 0; c < d; ++c) norm2 += row[c] * row[c];
      const T norm = std::sqrt(norm2);
      norms[static_cast<std::size_t>(i)] = norm;
      if (norm < T(1e-12)) {
        for (int c = 0; c < d; ++c) row[c] = T(0);
      } else {
        for (int c = 0; c < d; ++c) row[c] /= norm;
      }
    }
  }
  if (cache) cache->norms = norms;

  DescriptorGrid<T> out(gh, gw, d);
  out.data = std::move(rows.data);
  ensure_all_finite(out.data, "fcn_forward");
  return out;
}

template <typename T>
struct FcnGradients {
  std::vector<Tensor<T>> weights;  // per layer, zero for frozen layers
  std::vector<Tensor<T>> biases;
  std::vector<T> bn_gamma, bn_beta;

  void accumulate(const FcnGradients<T>& other) {
    for (std::size_t i = 0; i < weights.size(); ++i) {
      for (std::size_t j = 0; j < weights[i].data.size(); ++j) weights[i].data[j] += other.weights[i].data[j];
      for (std::size_t j = 0; j < biases[i].data.size(); ++j) biases[i].data[j] += other.biases[i].data[j];
    }
    for (std::size_t j = 0; j < bn_gamma.size(); ++j) bn_gamma[j] += other.bn_gamma[j];
    for (std::size_t j = 0; j < bn_beta.size(); ++j) bn_beta[j] += other.bn_beta[j];
  }
};

template <typename T>
FcnGradients<T> zero_gradients(const FcnModel<T>& model) {
  FcnGradients<T> g;
  for (std::size_t i = 0; i < model.weights.size(); ++i) {
    g.weights.emplace_back(model.weights[i].dims);
    g.biases.emplace_back(model.biases[i].dims);
  }
  if (model.topology.batch_norm_before_head) {
    g.bn_gamma.assign(model.bn.dim(), T(0));
    g.bn_beta.assign(model.bn.dim(), T(0));
  }
  return g;
}

/// Backpropagate descriptor gradients (eta x D, same layout as the forward
/// output) through normalization, batch norm and the conv stack. Layers with
/// a cleared trainable flag receive zero parameter gradients, and the
/// backward pass stops below the lowest trainable layer.
template <typename T>
FcnGradients<T> fcn_backward(const FcnModel<T>& model, const FcnForwardCache<T>& cache,
                             const DescriptorGrid<T>& grad_descriptors) {
  check(!cache.layer_inputs.empty(), "fcn_backward: forward cache missing");
  const int d = model.topology.descriptor_dim();
  check(grad_descriptors.dim == d && grad_descriptors.rows == cache.grid_h && grad_descriptors.cols == cache.grid_w,
        "fcn_backward: gradient shape mismatch");

  FcnGradients<T> grads = zero_gradients(model);
  const int n = cache.grid_h * cache.grid_w;
  Tensor<T> g({std::max(n, 1), d});
  std::copy(grad_descriptors.data.begin(), grad_descriptors.data.end(), g.data.begin());

  // L2 normalization backward: d(x/|x|) = (I - y y^T) / |x|.
  if (model.topology.normalize_descriptors) {
    for (int i = 0; i < n; ++i) {
      const T norm = cache.norms[static_cast<std::size_t>(i)];
      T* gr = g.data.data() + static_cast<std::size_t>(i) * d;
      const T* pre = cache.prenorm.data.data() + static_cast<std::size_t>(i) * d;
      if (norm < T(1e-12)) {
        for (int c = 0; c < d; ++c) gr[c] = T(0);
        continue;
      }
      T dot = T(0);
      for (int c = 0; c < d; ++c) dot += gr[c] * pre[c] / norm;
      for (int c = 0; c < d; ++c) gr[c] = (gr[c] - dot * pre[c] / norm) / norm;
    }
  }

  if (model.topology.batch_norm_before_head) {
    auto bn_grads = batch_norm_backward(g, cache.bn_cache, model.bn);
    g = std::move(bn_grads.input);
    grads.bn_gamma = std::move(bn_grads.gamma);
    grads.bn_beta = std::move(bn_grads.beta);
  }

  int lowest_trainable = model.topology.num_layers();
  for (int i = 0; i < model.topology.num_layers(); ++i) {
    if (model.trainable[i]) {
      lowest_trainable = i;
      break;
    }
  }
  if (lowest_trainable == model.topology.num_layers()) return grads;  // fully frozen

  Tensor<T> grad_act = detail::rows_to_grid(g, d, cache.grid_h, cache.grid_w);
  for (int i = model.topology.num_layers() - 1; i >= lowest_trainable; --i) {
    if (model.topology.relu_after[i]) grad_act = relu_backward(grad_act, cache.preacts[i]);
    const bool want_input = i > lowest_trainable;
    auto cg = conv2d_backward(grad_act, cache.layer_inputs[i], model.weights[i],
                              model.topology.layers[i].stride, want_input);
    if (model.trainable[i]) {
      grads.weights[i] = std::move(cg.weights);
      if (model.topology.layers[i].has_bias) grads.biases[i] = std::move(cg.bias);
    }
    if (want_input) grad_act = std::move(cg.input);
  }
  return grads;
}

/// Scales at which the shared-weight extractor is applied. Factors multiply
/// the base resolution of the longest image side.
struct ScalePyramidConfig {
  std::vector<double> factors{1.0, 1.5, 2.0};
  int base_resolution = 48;

  int num_scales() const { return static_cast<int>(factors.size()); }

  void validate() const {
    check(!factors.empty(), "pyramid: need at least one factor");
    check(base_resolution >= 1, "pyramid: base resolution must be >= 1");
    for (std::size_t i = 0; i < factors.size(); ++i) {
      check(factors[i] > 0.0, "pyramid: factors must be positive");
      if (i > 0) check(factors[i] > factors[i - 1], "pyramid: factors must be strictly increasing");
    }
  }

  int longest_side(int scale_index) const {
    return std::max(1, static_cast<int>(std::lround(base_resolution * factors[scale_index])));
  }
};

/// Bilinear rescales of the input, one per factor; every resulting resolution
/// must be at least the receptive field.
inline std::vector<Image> scale_pyramid(const Image& im, const ScalePyramidConfig& cfg, const FcnTopology& topo) {
  cfg.validate();
  const int rf = receptive_field(topo).rf;
  std::vector<Image> out;
  out.reserve(cfg.factors.size());
  for (int s = 0; s < cfg.num_scales(); ++s) {
    Image scaled = rescale_longest_side(im, cfg.longest_side(s));
    check(std::min(scaled.width, scaled.height) >= rf,
          "pyramid: scale " + std::to_string(s) + " resolution " + std::to_string(scaled.width) + "x" +
              std::to_string(scaled.height) + " is below the receptive field " + std::to_string(rf));
    out.push_back(std::move(scaled));
  }
  return out;
}

/// Forward an image through the pyramid; one descriptor grid per scale.
template <typename T>
MultiScaleDescriptors<T> extract_multiscale(FcnModel<T>& model, const Image& im, const ScalePyramidConfig& cfg,
                                            BnMode mode, std::vector<FcnForwardCache<T>>* caches = nullptr) {
  auto pyramid = scale_pyramid(im, cfg, model.topology);
  MultiScaleDescriptors<T> out;
  out.scales.reserve(pyramid.size());
  for (const auto& scaled : pyramid) {
    FcnForwardCache<T>* cache = nullptr;
    if (caches) {
      caches->emplace_back();
      cache = &caches->back();
    }
    out.scales.push_back(fcn_forward(model, image_to_tensor<T>(scaled), mode, cache));
  }
  return out;
}

}  // namespace fcnbnl
