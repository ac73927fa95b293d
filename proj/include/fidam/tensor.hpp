#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace fidam {

// Toggle for finiteness checks on op outputs. Cheap enough for tests,
// off by default in long grid runs.
inline bool& debug_checks() {
  static bool enabled = false;
  return enabled;
}

// Dense row-major tensor. Rank 1 and 2 are the only shapes the engine needs;
// values are stored contiguously and the struct has plain value semantics.
template <class S>
struct Tensor {
  std::vector<int> shape;
  std::vector<S> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> dims) : shape(std::move(dims)) {
    data.assign(numel_of(shape), S(0));
  }
  Tensor(std::vector<int> dims, std::vector<S> values) : shape(std::move(dims)), data(std::move(values)) {
    if (data.size() != numel_of(shape)) throw std::invalid_argument("tensor: values do not fill shape");
  }

  static std::size_t numel_of(const std::vector<int>& dims) {
    std::size_t n = 1;
    for (int d : dims) {
      if (d < 0) throw std::invalid_argument("tensor: negative dimension");
      n *= static_cast<std::size_t>(d);
    }
    return n;
  }

  static Tensor vec(std::vector<S> values) {
    int n = static_cast<int>(values.size());
    return Tensor({n}, std::move(values));
  }
  static Tensor scalar(S v) { return Tensor({1}, {v}); }
  static Tensor zeros(std::vector<int> dims) { return Tensor(std::move(dims)); }

  std::size_t numel() const { return data.size(); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
  int rows() const { return shape.at(0); }
  int cols() const { return shape.at(1); }

  S& at(int i) { return data[static_cast<std::size_t>(i)]; }
  const S& at(int i) const { return data[static_cast<std::size_t>(i)]; }
  S& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols() + c]; }
  const S& at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols() + c]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

// value_of lets the finiteness check and comparisons operate on the primal
// part of whatever scalar type the engine is instantiated with.
inline double value_of(double v) { return v; }

template <class S>
void check_finite(const Tensor<S>& t, const char* where) {
  if (!debug_checks()) return;
  for (const S& v : t.data) {
    if (!std::isfinite(value_of(v))) throw std::runtime_error(std::string("non-finite value in ") + where);
  }
}

}  // namespace fidam
