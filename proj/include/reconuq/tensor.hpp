#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <utility>
#include <vector>

#include "reconuq/errors.hpp"

namespace reconuq {

template <typename Scalar>
using DataArray = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

// Dense N-d array with row-major flat storage. Carries scalar fields,
// binary masks and network activations; rank 2 or 3 spatial grids, with a
// leading channel axis inside the network.
template <typename Scalar>
struct Tensor {
  std::vector<int> shape;
  DataArray<Scalar> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s)
      : shape(std::move(s)), data(DataArray<Scalar>::Zero(numel(shape))) {}
  Tensor(std::vector<int> s, Scalar fill)
      : shape(std::move(s)),
        data(DataArray<Scalar>::Constant(numel(shape), fill)) {}

  static std::int64_t numel(const std::vector<int>& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
  }

  std::int64_t size() const { return data.size(); }
  int rank() const { return static_cast<int>(shape.size()); }

  Scalar operator[](std::int64_t i) const { return data[i]; }
  Scalar& operator[](std::int64_t i) { return data[i]; }
};

using Mask = Tensor<std::uint8_t>;

// Scalar field with per-axis grid spacing (arbitrary units, defaults to 1).
struct Volume : Tensor<float> {
  std::vector<float> spacing;

  Volume() = default;
  explicit Volume(std::vector<int> s)
      : Tensor<float>(std::move(s)), spacing(shape.size(), 1.0f) {}
  Volume(std::vector<int> s, float fill)
      : Tensor<float>(std::move(s), fill), spacing(shape.size(), 1.0f) {}
};

// Row-major strides for a shape.
inline std::vector<std::int64_t> strides_of(const std::vector<int>& shape) {
  std::vector<std::int64_t> st(shape.size(), 1);
  for (int a = static_cast<int>(shape.size()) - 2; a >= 0; --a)
    st[a] = st[a + 1] * shape[a + 1];
  return st;
}

inline std::int64_t flat_index(const std::vector<int>& idx,
                               const std::vector<std::int64_t>& strides) {
  std::int64_t f = 0;
  for (std::size_t a = 0; a < idx.size(); ++a) f += idx[a] * strides[a];
  return f;
}

// Odometer-style increment over an nd box; returns false once exhausted.
inline bool advance_index(std::vector<int>& idx, const std::vector<int>& shape) {
  for (int a = static_cast<int>(shape.size()) - 1; a >= 0; --a) {
    if (++idx[a] < shape[a]) return true;
    idx[a] = 0;
  }
  return false;
}

template <typename A, typename B>
bool same_shape(const Tensor<A>& a, const Tensor<B>& b) {
  return a.shape == b.shape;
}

template <typename A, typename B>
void require_same_shape(const Tensor<A>& a, const Tensor<B>& b,
                        const char* what) {
  if (!same_shape(a, b)) throw ShapeMismatch(std::string(what) + ": shapes differ");
}

}  // namespace reconuq
