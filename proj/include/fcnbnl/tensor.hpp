#pragma once

#include <cmath>
#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace fcnbnl {

[[noreturn]] inline void fail(const std::string& msg) {
  throw std::invalid_argument(msg);
}

inline void check(bool cond, const std::string& msg) {
  if (!cond) fail(msg);
}

/// Dense row-major tensor of real values; the innermost extent is width.
/// Feature maps are stored channels-major (C x H x W).
template <typename T>
struct Tensor {
  std::vector<int> dims;
  std::vector<T> data;

  Tensor() = default;

  /// Zero-initialised tensor with the given extents.
  explicit Tensor(std::vector<int> d) : dims(std::move(d)), data(numel_of(dims), T(0)) {}

  Tensor(std::vector<int> d, std::vector<T> v) : dims(std::move(d)), data(std::move(v)) {
    check(data.size() == numel_of(dims), "tensor: dims/data size mismatch");
  }

  static std::size_t numel_of(const std::vector<int>& d) {
    std::size_t n = 1;
    for (int e : d) {
      check(e >= 1, "tensor: every extent must be >= 1");
      n *= static_cast<std::size_t>(e);
    }
    return n;
  }

  std::size_t numel() const { return data.size(); }
  int rank() const { return static_cast<int>(dims.size()); }

  /// 3-d access (c, h, w).
  T& operator()(int c, int h, int w) {
    return data[(static_cast<std::size_t>(c) * dims[1] + h) * dims[2] + w];
  }
  const T& operator()(int c, int h, int w) const {
    return data[(static_cast<std::size_t>(c) * dims[1] + h) * dims[2] + w];
  }

  /// 4-d access (a, b, c, d); used for conv kernels (out, in, kh, kw).
  T& operator()(int a, int b, int c, int d) {
    return data[((static_cast<std::size_t>(a) * dims[1] + b) * dims[2] + c) * dims[3] + d];
  }
  const T& operator()(int a, int b, int c, int d) const {
    return data[((static_cast<std::size_t>(a) * dims[1] + b) * dims[2] + c) * dims[3] + d];
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "x" : "") << dims[i];
    os << ']';
    return os.str();
  }
};

/// Ops refuse to return NaN/Inf silently; call this on every op output.
template <typename T>
void ensure_finite(const Tensor<T>& t, const char* op) {
  for (T v : t.data) {
    if (!std::isfinite(v)) throw std::runtime_error(std::string(op) + ": non-finite value in output");
  }
}

template <typename T>
void ensure_all_finite(const std::vector<T>& v, const char* op) {
  for (T x : v) {
    if (!std::isfinite(x)) throw std::runtime_error(std::string(op) + ": non-finite value in output");
  }
}

}  // namespace fcnbnl
