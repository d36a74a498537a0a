#pragma once

#include <span>
#include <vector>

#include "fcnbnl/tensor.hpp"

namespace fcnbnl {

/// A local descriptor is a D-dimensional real vector.
template <typename T>
using Descriptor = std::vector<T>;

/// The descriptors one extractor pass produces for one scale: an h x w grid
/// of D-dimensional vectors, stored row-major as (h*w) x D.
template <typename T>
struct DescriptorGrid {
  int rows = 0;
  int cols = 0;
  int dim = 0;
  std::vector<T> data;

  DescriptorGrid() = default;
  DescriptorGrid(int r, int c, int d) : rows(r), cols(c), dim(d) {
    check(r >= 1 && c >= 1 && d >= 1, "descriptor grid: extents must be >= 1");
    data.assign(static_cast<std::size_t>(r) * c * d, T(0));
  }

  int eta() const { return rows * cols; }

  std::span<T> descriptor(int i) {
    return {data.data() + static_cast<std::size_t>(i) * dim, static_cast<std::size_t>(dim)};
  }
  std::span<const T> descriptor(int i) const {
    return {data.data() + static_cast<std::size_t>(i) * dim, static_cast<std::size_t>(dim)};
  }
};

/// Per-scale descriptor grids for one image.
template <typename T>
struct MultiScaleDescriptors {
  std::vector<DescriptorGrid<T>> scales;

  int num_scales() const { return static_cast<int>(scales.size()); }
  int total() const {
    int n = 0;
    for (const auto& g : scales) n += g.eta();
    return n;
  }
  int dim() const { return scales.empty() ? 0 : scales.front().dim; }
};

}  // namespace fcnbnl
