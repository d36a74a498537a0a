#pragma once

#include <algorithm>
#include <cmath>
#include <span>

#include "fcnbnl/tensor.hpp"

namespace fcnbnl {

/// One convolutional layer: square kernel, valid (no-pad) convolution.
struct ConvLayerSpec {
  int kernel_size = 1;
  int stride = 1;
  int in_channels = 1;
  int out_channels = 1;
  bool has_bias = true;
};

inline void validate(const ConvLayerSpec& s) {
  check(s.kernel_size >= 1, "conv layer: kernel_size must be >= 1");
  check(s.stride >= 1, "conv layer: stride must be >= 1");
  check(s.in_channels >= 1 && s.out_channels >= 1, "conv layer: channels must be >= 1");
}

/// Output extent of a valid convolution: floor((in - k) / stride) + 1.
inline int conv_out_extent(int in, int k, int stride) {
  check(in >= k, "conv: input extent " + std::to_string(in) + " smaller than kernel " + std::to_string(k));
  return (in - k) / stride + 1;
}

/// Valid 2-d convolution. input C x H x W, weights C' x C x k x k, bias C'.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias, int stride) {
  check(input.rank() == 3, "conv2d: input must be CxHxW, got " + input.shape_str());
  check(weights.rank() == 4, "conv2d: weights must be C'xCxkxk, got " + weights.shape_str());
  check(stride >= 1, "conv2d: stride must be >= 1");
  const int in_c = input.dims[0], in_h = input.dims[1], in_w = input.dims[2];
  const int out_c = weights.dims[0], k = weights.dims[2];
  check(weights.dims[3] == k, "conv2d: kernel must be square, got " + weights.shape_str());
  check(weights.dims[1] == in_c,
        "conv2d: input channels " + std::to_string(in_c) + " do not match weights " + weights.shape_str());
  check(bias.rank() == 1 && bias.dims[0] == out_c,
        "conv2d: bias must be [" + std::to_string(out_c) + "], got " + bias.shape_str());
  const int out_h = conv_out_extent(in_h, k, stride);
  const int out_w = conv_out_extent(in_w, k, stride);

  Tensor<T> out({out_c, out_h, out_w});
  const std::size_t out_plane = static_cast<std::size_t>(out_h) * out_w;
  const std::size_t in_plane = static_cast<std::size_t>(in_h) * in_w;
  for (int co = 0; co < out_c; ++co) {
    std::fill_n(out.data.begin() + co * out_plane, out_plane, bias.data[co]);
    for (int ci = 0; ci < in_c; ++ci) {
      const T* in_base = input.data.data() + ci * in_plane;
      for (int kh = 0; kh < k; ++kh) {
        for (int kw = 0; kw < k; ++kw) {
          const T w = weights(co, ci, kh, kw);
          if (w == T(0)) continue;
          for (int oh = 0; oh < out_h; ++oh) {
            const T* in_row = in_base + static_cast<std::size_t>(oh * stride + kh) * in_w + kw;
            T* out_row = out.data.data() + co * out_plane + static_cast<std::size_t>(oh) * out_w;
            if (stride == 1) {
              for (int ow = 0; ow < out_w; ++ow) out_row[ow] += w * in_row[ow];
            } else {
              for (int ow = 0; ow < out_w; ++ow) out_row[ow] += w * in_row[ow * stride];
            }
          }
        }
      }
    }
  }
  ensure_finite(out, "conv2d");
  return out;
}

template <typename T>
struct Conv2dGrads {
  Tensor<T> input;    // empty when skipped
  Tensor<T> weights;
  Tensor<T> bias;
};

/// Gradients of sum(grad_out . conv2d(input)) w.r.t. input, weights and bias.
/// Pass want_grad_input = false to skip the input gradient (frozen lower layers).
template <typename T>
Conv2dGrads<T> conv2d_backward(const Tensor<T>& grad_out, const Tensor<T>& input, const Tensor<T>& weights,
                               int stride, bool want_grad_input = true) {
  check(input.rank() == 3 && weights.rank() == 4 && grad_out.rank() == 3,
        "conv2d_backward: rank mismatch");
  const int in_c = input.dims[0], in_h = input.dims[1], in_w = input.dims[2];
  const int out_c = weights.dims[0], k = weights.dims[2];
  check(weights.dims[1] == in_c, "conv2d_backward: channel mismatch " + weights.shape_str());
  const int out_h = conv_out_extent(in_h, k, stride);
  const int out_w = conv_out_extent(in_w, k, stride);
  check(grad_out.dims[0] == out_c && grad_out.dims[1] == out_h && grad_out.dims[2] == out_w,
        "conv2d_backward: grad_out " + grad_out.shape_str() + " does not match forward output shape");

  Conv2dGrads<T> g;
  g.weights = Tensor<T>(weights.dims);
  g.bias = Tensor<T>({out_c});
  if (want_grad_input) g.input = Tensor<T>(input.dims);

  const std::size_t out_plane = static_cast<std::size_t>(out_h) * out_w;
  const std::size_t in_plane = static_cast<std::size_t>(in_h) * in_w;
  for (int co = 0; co < out_c; ++co) {
    const T* go_base = grad_out.data.data() + co * out_plane;
    T acc = T(0);
    for (std::size_t i = 0; i < out_plane; ++i) acc += go_base[i];
    g.bias.data[co] = acc;
    for (int ci = 0; ci < in_c; ++ci) {
      const T* in_base = input.data.data() + ci * in_plane;
      T* gi_base = want_grad_input ? g.input.data.data() + ci * in_plane : nullptr;
      for (int kh = 0; kh < k; ++kh) {
        for (int kw = 0; kw < k; ++kw) {
          const T w = weights(co, ci, kh, kw);
          T wsum = T(0);
          for (int oh = 0; oh < out_h; ++oh) {
            const T* go_row = go_base + static_cast<std::size_t>(oh) * out_w;
            const T* in_row = in_base + static_cast<std::size_t>(oh * stride + kh) * in_w + kw;
            T* gi_row = want_grad_input ? gi_base + static_cast<std::size_t>(oh * stride + kh) * in_w + kw : nullptr;
            for (int ow = 0; ow < out_w; ++ow) {
              const T go = go_row[ow];
              wsum += go * in_row[static_cast<std::size_t>(ow) * stride];
              if (want_grad_input) gi_row[static_cast<std::size_t>(ow) * stride] += w * go;
            }
          }
          g.weights(co, ci, kh, kw) = wsum;
        }
      }
    }
  }
  ensure_finite(g.weights, "conv2d_backward");
  if (want_grad_input) ensure_finite(g.input, "conv2d_backward");
  return g;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& input) {
  Tensor<T> out = input;
  for (T& v : out.data) v = std::max(v, T(0));
  return out;
}

/// Subgradient at exactly 0 is 0.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& grad_out, const Tensor<T>& input) {
  check(grad_out.dims == input.dims, "relu_backward: shape mismatch");
  Tensor<T> g = grad_out;
  for (std::size_t i = 0; i < g.data.size(); ++i) {
    if (input.data[i] <= T(0)) g.data[i] = T(0);
  }
  return g;
}

/// Elementwise x^e. Negative base with fractional exponent is an error.
template <typename T>
Tensor<T> pow_elem(const Tensor<T>& input, T exponent) {
  const bool integral = exponent == std::floor(exponent);
  Tensor<T> out = input;
  for (T& v : out.data) {
    check(integral || v >= T(0), "pow_elem: negative base with fractional exponent");
    v = std::pow(v, exponent);
  }
  ensure_finite(out, "pow_elem");
  return out;
}

/// Nearest-neighbor upsampling: every pixel replicated factor x factor.
template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& input, int factor) {
  check(factor >= 1, "upsample_nearest: factor must be >= 1");
  check(input.rank() == 3, "upsample_nearest: input must be CxHxW");
  if (factor == 1) return input;
  const int c = input.dims[0], h = input.dims[1], w = input.dims[2];
  Tensor<T> out({c, h * factor, w * factor});
  for (int ci = 0; ci < c; ++ci) {
    for (int y = 0; y < h * factor; ++y) {
      for (int x = 0; x < w * factor; ++x) {
        out(ci, y, x) = input(ci, y / factor, x / factor);
      }
    }
  }
  return out;
}

enum class BnMode { kTrain, kInfer };

/// Learned affine + running statistics for batch normalization over descriptor
/// dimensions. A single state must not be updated concurrently.
template <typename T>
struct BatchNormState {
  std::vector<T> gamma, beta, running_mean, running_var;
  T eps = T(1e-5);
  T momentum = T(0.1);

  BatchNormState() = default;
  explicit BatchNormState(int dim)
      : gamma(dim, T(1)), beta(dim, T(0)), running_mean(dim, T(0)), running_var(dim, T(1)) {}

  int dim() const { return static_cast<int>(gamma.size()); }
};

template <typename T>
struct BnCache {
  std::vector<T> mean, inv_std;
  Tensor<T> xhat;
  Tensor<T> input;
};

/// Batch normalization over a batch of descriptors (rows = batch, cols = dims).
/// Train mode normalizes by batch statistics and updates running stats;
/// infer mode normalizes by running stats. Variance is biased (1/n).
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& batch, BatchNormState<T>& state, BnMode mode, BnCache<T>* cache = nullptr) {
  check(batch.rank() == 2, "batch_norm: batch must be n x dim, got " + batch.shape_str());
  const int n = batch.dims[0], d = batch.dims[1];
  check(d == state.dim(), "batch_norm: state dim " + std::to_string(state.dim()) + " does not match batch " +
                              batch.shape_str());
  Tensor<T> out(batch.dims);
  if (mode == BnMode::kTrain) {
    check(n >= 2, "batch_norm: train mode requires batch size >= 2, got " + std::to_string(n));
    std::vector<T> mean(d, T(0)), var(d, T(0));
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) mean[j] += batch.data[static_cast<std::size_t>(i) * d + j];
    for (int j = 0; j < d; ++j) mean[j] /= T(n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) {
        const T c = batch.data[static_cast<std::size_t>(i) * d + j] - mean[j];
        var[j] += c * c;
      }
    for (int j = 0; j < d; ++j) var[j] /= T(n);

    std::vector<T> inv_std(d);
    for (int j = 0; j < d; ++j) inv_std[j] = T(1) / std::sqrt(var[j] + state.eps);
    Tensor<T> xhat(batch.dims);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) {
        const std::size_t ix = static_cast<std::size_t>(i) * d + j;
        xhat.data[ix] = (batch.data[ix] - mean[j]) * inv_std[j];
        out.data[ix] = state.gamma[j] * xhat.data[ix] + state.beta[j];
      }
    for (int j = 0; j < d; ++j) {
      state.running_mean[j] = (T(1) - state.momentum) * state.running_mean[j] + state.momentum * mean[j];
      state.running_var[j] = (T(1) - state.momentum) * state.running_var[j] + state.momentum * var[j];
    }
    if (cache) {
      cache->mean = std::move(mean);
      cache->inv_std = std::move(inv_std);
      cache->xhat = std::move(xhat);
      cache->input = batch;
    }
  } else {
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) {
        const std::size_t ix = static_cast<std::size_t>(i) * d + j;
        const T xh = (batch.data[ix] - state.running_mean[j]) / std::sqrt(state.running_var[j] + state.eps);
        out.data[ix] = state.gamma[j] * xh + state.beta[j];
      }
  }
  ensure_finite(out, "batch_norm");
  return out;
}

template <typename T>
struct BnGrads {
  Tensor<T> input;
  std::vector<T> gamma, beta;
};

/// Train-mode batch-norm backward (statistics are functions of the batch).
template <typename T>
BnGrads<T> batch_norm_backward(const Tensor<T>& grad_out, const BnCache<T>& cache, const BatchNormState<T>& state) {
  const int n = grad_out.dims[0], d = grad_out.dims[1];
  check(cache.xhat.dims == grad_out.dims, "batch_norm_backward: cache/grad shape mismatch");
  BnGrads<T> g;
  g.input = Tensor<T>(grad_out.dims);
  g.gamma.assign(d, T(0));
  g.beta.assign(d, T(0));
  std::vector<T> sum_dxhat(d, T(0)), sum_dxhat_xhat(d, T(0));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) {
      const std::size_t ix = static_cast<std::size_t>(i) * d + j;
      const T dy = grad_out.data[ix];
      g.gamma[j] += dy * cache.xhat.data[ix];
      g.beta[j] += dy;
      const T dxhat = dy * state.gamma[j];
      sum_dxhat[j] += dxhat;
      sum_dxhat_xhat[j] += dxhat * cache.xhat.data[ix];
    }
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) {
      const std::size_t ix = static_cast<std::size_t>(i) * d + j;
      const T dxhat = grad_out.data[ix] * state.gamma[j];
      g.input.data[ix] =
          cache.inv_std[j] * (dxhat - sum_dxhat[j] / T(n) - cache.xhat.data[ix] * sum_dxhat_xhat[j] / T(n));
    }
  return g;
}

/// log(sum(exp(u))) computed with max-shift for stability.
template <typename T>
T logsumexp(std::span<const T> values) {
  check(!values.empty(), "logsumexp: empty input");
  T m = values[0];
  for (T v : values) m = std::max(m, v);
  T acc = T(0);
  for (T v : values) acc += std::exp(v - m);
  return m + std::log(acc);
}

template <typename T>
T logsumexp(const std::vector<T>& values) {
  return logsumexp(std::span<const T>(values));
}

}  // namespace fcnbnl
