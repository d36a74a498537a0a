#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "fcnbnl/descriptors.hpp"

namespace fcnbnl {

/// Per-class descriptor pools for the non-parametric classifier.
template <typename T>
struct ClassDescriptorStore {
  std::vector<std::vector<Descriptor<T>>> classes;

  int k() const { return static_cast<int>(classes.size()); }

  void validate() const {
    check(k() >= 2, "descriptor store: need at least 2 classes");
    for (int y = 0; y < k(); ++y)
      check(!classes[y].empty(), "descriptor store: class " + std::to_string(y) + " has no descriptors");
  }
};

/// Smallest Euclidean distance between z and an element of S.
template <typename T>
T nn_distance(std::span<const T> z, const std::vector<Descriptor<T>>& s) {
  check(!s.empty(), "nn_distance: empty descriptor set");
  T best = std::numeric_limits<T>::infinity();
  for (const auto& cand : s) {
    check(cand.size() == z.size(), "nn_distance: dimension mismatch");
    T acc = T(0);
    for (std::size_t i = 0; i < z.size(); ++i) {
      const T d = z[i] - cand[i];
      acc += d * d;
    }
    best = std::min(best, acc);
  }
  return std::sqrt(best);
}

template <typename T>
T nn_distance(const Descriptor<T>& z, const std::vector<Descriptor<T>>& s) {
  return nn_distance(std::span<const T>(z), s);
}

/// Image-2-Class rule: argmin over classes of the summed squared
/// nearest-neighbor distances; ties go to the lowest label index.
template <typename T>
int classify_nbnn(const std::vector<Descriptor<T>>& query, const ClassDescriptorStore<T>& store) {
  check(!query.empty(), "classify_nbnn: empty query descriptor set");
  store.validate();
  int best_label = 0;
  T best_cost = std::numeric_limits<T>::infinity();
  for (int y = 0; y < store.k(); ++y) {
    T cost = T(0);
    for (const auto& z : query) {
      const T d = nn_distance(z, store.classes[y]);
      cost += d * d;
    }
    if (cost < best_cost) {
      best_cost = cost;
      best_label = y;
    }
  }
  return best_label;
}

}  // namespace fcnbnl
