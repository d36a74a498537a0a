#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "fcnbnl/descriptors.hpp"
#include "fcnbnl/ops.hpp"

namespace fcnbnl {

struct NbnlConfig {
  double q = 10.0;  // exponent of the hinged l_q aggregation
  int p = 2;        // prototypes per class
  int k = 2;        // classes

  void validate() const {
    check(q >= 1.0, "nbnl: q must be >= 1");
    check(p >= 1, "nbnl: p must be >= 1");
    check(k >= 2, "nbnl: k must be >= 2");
  }
};

/// Learned prototypes, k x p x D. Kept on the unit ball by projection.
template <typename T>
struct PrototypeBank {
  Tensor<T> w;
  NbnlConfig config;

  PrototypeBank() = default;
  PrototypeBank(NbnlConfig cfg, int dim) : w({cfg.k, cfg.p, dim}), config(cfg) { cfg.validate(); }

  int dim() const { return w.dims[2]; }

  std::span<T> prototype(int y, int j) {
    return {w.data.data() + (static_cast<std::size_t>(y) * config.p + j) * dim(),
            static_cast<std::size_t>(dim())};
  }
  std::span<const T> prototype(int y, int j) const {
    return {w.data.data() + (static_cast<std::size_t>(y) * config.p + j) * dim(),
            static_cast<std::size_t>(dim())};
  }
  /// Flat p x D block of one class.
  std::span<const T> class_block(int y) const {
    return {w.data.data() + static_cast<std::size_t>(y) * config.p * dim(),
            static_cast<std::size_t>(config.p) * dim()};
  }
};

template <typename T>
void project_to_unit_ball(std::span<T> v) {
  T norm2 = T(0);
  for (T x : v) norm2 += x * x;
  if (norm2 > T(1)) {
    const T inv = T(1) / std::sqrt(norm2);
    for (T& x : v) x *= inv;
  }
}

template <typename T>
void project_prototypes(PrototypeBank<T>& bank) {
  for (int y = 0; y < bank.config.k; ++y)
    for (int j = 0; j < bank.config.p; ++j) project_to_unit_ball(bank.prototype(y, j));
}

/// omega(z, S) = (sum_s max(0, <z,s>)^q)^(1/q); 0 when every dot is <= 0.
/// The largest hinge is factored out so powers stay in [0,1].
template <typename T>
T omega(std::span<const T> z, std::span<const T> prototypes, int p, double q) {
  check(q >= 1.0, "omega: q must be >= 1");
  const std::size_t d = z.size();
  check(prototypes.size() == static_cast<std::size_t>(p) * d, "omega: prototype block size mismatch");
  T amax = T(0);
  std::vector<T> hinges(static_cast<std::size_t>(p));
  for (int j = 0; j < p; ++j) {
    const T* s = prototypes.data() + static_cast<std::size_t>(j) * d;
    T dot = T(0);
    for (std::size_t i = 0; i < d; ++i) dot += z[i] * s[i];
    const T a = std::max(dot, T(0));
    hinges[j] = a;
    amax = std::max(amax, a);
  }
  if (amax == T(0)) return T(0);
  T acc = T(0);
  for (int j = 0; j < p; ++j) acc += std::pow(hinges[j] / amax, static_cast<T>(q));
  return amax * std::pow(acc, T(1) / static_cast<T>(q));
}

template <typename T>
T omega(std::span<const T> z, const PrototypeBank<T>& bank, int y) {
  return omega(z, bank.class_block(y), bank.config.p, bank.config.q);
}

/// d omega / d s_j = (a_j / omega)^(q-1) * z on active hinges, and
/// symmetrically for z; zero at omega = 0 and on the hinge boundary.
template <typename T>
void omega_backward(std::span<const T> z, std::span<const T> prototypes, int p, double q, T upstream,
                    std::span<T> grad_z, std::span<T> grad_prototypes) {
  const std::size_t d = z.size();
  check(grad_z.size() == d && grad_prototypes.size() == prototypes.size(), "omega_backward: size mismatch");
  if (upstream == T(0)) return;
  std::vector<T> dots(static_cast<std::size_t>(p));
  T amax = T(0);
  for (int j = 0; j < p; ++j) {
    const T* s = prototypes.data() + static_cast<std::size_t>(j) * d;
    T dot = T(0);
    for (std::size_t i = 0; i < d; ++i) dot += z[i] * s[i];
    dots[j] = dot;
    amax = std::max(amax, std::max(dot, T(0)));
  }
  if (amax == T(0)) return;
  T acc = T(0);
  for (int j = 0; j < p; ++j)
    if (dots[j] > T(0)) acc += std::pow(dots[j] / amax, static_cast<T>(q));
  const T w = amax * std::pow(acc, T(1) / static_cast<T>(q));
  for (int j = 0; j < p; ++j) {
    if (dots[j] <= T(0)) continue;
    const T coeff = upstream * std::pow(dots[j] / w, static_cast<T>(q) - T(1));
    const T* s = prototypes.data() + static_cast<std::size_t>(j) * d;
    T* gs = grad_prototypes.data() + static_cast<std::size_t>(j) * d;
    for (std::size_t i = 0; i < d; ++i) {
      gs[i] += coeff * z[i];
      grad_z[i] += coeff * s[i];
    }
  }
}

/// Scale-normalized score: the mean of omega over one scale's descriptors.
template <typename T>
T bar_omega(const DescriptorGrid<T>& grid, const PrototypeBank<T>& bank, int y) {
  check(grid.eta() >= 1, "bar_omega: empty scale");
  T acc = T(0);
  for (int i = 0; i < grid.eta(); ++i) acc += omega<T>(grid.descriptor(i), bank, y);
  return acc / static_cast<T>(grid.eta());
}

/// h(x; W_y) = mean over scales of bar_omega.
template <typename T>
T likelihood_h(const MultiScaleDescriptors<T>& x, const PrototypeBank<T>& bank, int y) {
  check(x.num_scales() >= 1, "likelihood_h: no scales");
  T acc = T(0);
  for (const auto& g : x.scales) acc += bar_omega(g, bank, y);
  return acc / static_cast<T>(x.num_scales());
}

template <typename T>
std::vector<T> class_likelihoods(const MultiScaleDescriptors<T>& x, const PrototypeBank<T>& bank) {
  std::vector<T> h(bank.config.k);
  for (int y = 0; y < bank.config.k; ++y) h[y] = likelihood_h(x, bank, y);
  return h;
}

/// argmax_y h(x; W_y); ties go to the lowest label index.
template <typename T>
int classify_nbnl(const MultiScaleDescriptors<T>& x, const PrototypeBank<T>& bank) {
  const auto h = class_likelihoods(x, bank);
  int best = 0;
  for (int y = 1; y < bank.config.k; ++y)
    if (h[y] > h[best]) best = y;
  return best;
}

/// Log-loss composed with soft-max: -u_y + log sum_j exp(u_j).
template <typename T>
T descriptor_loss(const std::vector<T>& u, int y) {
  check(y >= 0 && y < static_cast<int>(u.size()), "descriptor_loss: label out of range");
  return -u[y] + logsumexp(u);
}

/// d loss / d u = softmax(u) - onehot(y).
template <typename T>
std::vector<T> descriptor_loss_backward(const std::vector<T>& u, int y) {
  check(y >= 0 && y < static_cast<int>(u.size()), "descriptor_loss: label out of range");
  const T lse = logsumexp(u);
  std::vector<T> g(u.size());
  for (std::size_t j = 0; j < u.size(); ++j) g[j] = std::exp(u[j] - lse);
  g[y] -= T(1);
  return g;
}

template <typename T>
struct SurrogateResult {
  T loss = T(0);
  Tensor<T> grad_prototypes;               // k x p x D
  MultiScaleDescriptors<T> grad_descriptors;  // same shape as the input
};

/// Jensen upper bound on the image-level loss: every descriptor is promoted
/// to a training sample, each scale weighted by 1/(m * eta(scale)). Exact
/// gradients w.r.t. every prototype and every descriptor.
template <typename T>
SurrogateResult<T> surrogate_loss(const MultiScaleDescriptors<T>& x, const PrototypeBank<T>& bank, int label) {
  bank.config.validate();
  check(x.num_scales() >= 1, "surrogate_loss: no scales");
  check(label >= 0 && label < bank.config.k, "surrogate_loss: label out of range");
  const int k = bank.config.k, p = bank.config.p, d = bank.dim();
  check(x.dim() == d, "surrogate_loss: descriptor dim " + std::to_string(x.dim()) + " != prototype dim " +
                          std::to_string(d));

  SurrogateResult<T> r;
  r.grad_prototypes = Tensor<T>({k, p, d});
  r.grad_descriptors.scales.reserve(x.scales.size());
  const T m = static_cast<T>(x.num_scales());

  std::vector<T> u(static_cast<std::size_t>(k));
  for (const auto& grid : x.scales) {
    check(grid.eta() >= 1, "surrogate_loss: empty scale");
    DescriptorGrid<T> grad_grid(grid.rows, grid.cols, grid.dim);
    const T weight = T(1) / (m * static_cast<T>(grid.eta()));
    for (int i = 0; i < grid.eta(); ++i) {
      const auto z = grid.descriptor(i);
      for (int y = 0; y < k; ++y) u[y] = omega<T>(z, bank, y);
      r.loss += weight * descriptor_loss(u, label);
      const auto du = descriptor_loss_backward(u, label);
      auto gz = grad_grid.descriptor(i);
      for (int y = 0; y < k; ++y) {
        std::span<T> gw{r.grad_prototypes.data.data() + (static_cast<std::size_t>(y) * p) * d,
                        static_cast<std::size_t>(p) * d};
        omega_backward<T>(z, bank.class_block(y), p, bank.config.q, weight * du[y], gz, gw);
      }
    }
    r.grad_descriptors.scales.push_back(std::move(grad_grid));
  }
  if (!std::isfinite(r.loss)) throw std::runtime_error("surrogate_loss: non-finite loss");
  return r;
}

}  // namespace fcnbnl
