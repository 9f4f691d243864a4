#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

// Dense numerical kernels shared by the autodiff primitives, the mixers and
// the tests. Everything here is a pure function of its Eigen arguments and is
// templated on the scalar type.
namespace sstx::kernels {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

template <typename Derived>
RowMatrix<typename Derived::Scalar> softmax_rows(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  RowMatrix<Scalar> out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Scalar m = x.row(r).maxCoeff();
    out.row(r) = (x.row(r).array() - m).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

template <typename Derived>
RowMatrix<typename Derived::Scalar> log_softmax_rows(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  RowMatrix<Scalar> out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Scalar m = x.row(r).maxCoeff();
    const Scalar lse = m + std::log((x.row(r).array() - m).exp().sum());
    out.row(r) = (x.row(r).array() - lse).matrix();
  }
  return out;
}

// Index of the largest coefficient; ties resolve to the lowest index.
template <typename Derived>
Eigen::Index argmax(const Eigen::DenseBase<Derived>& v) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i)
    if (v(i) > v(best)) best = i;
  return best;
}

// Indices of the k largest coefficients, highest first; ties by lowest index.
// k is clipped to the vector length.
template <typename Derived>
std::vector<Eigen::Index> top_k_indices(const Eigen::DenseBase<Derived>& v, Eigen::Index k) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(v.size()));
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  k = std::min<Eigen::Index>(k, v.size());
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](Eigen::Index a, Eigen::Index b) {
    return v(a) > v(b) || (v(a) == v(b) && a < b);
  });
  idx.resize(static_cast<std::size_t>(k));
  return idx;
}

// Threshold tau of the Euclidean projection of z onto the probability simplex,
// together with the support size.
template <typename Derived>
std::pair<typename Derived::Scalar, Eigen::Index> sparsemax_threshold(
    const Eigen::MatrixBase<Derived>& z) {
  using Scalar = typename Derived::Scalar;
  std::vector<Scalar> sorted(static_cast<std::size_t>(z.size()));
  for (Eigen::Index i = 0; i < z.size(); ++i) sorted[static_cast<std::size_t>(i)] = z(i);
  std::sort(sorted.begin(), sorted.end(), std::greater<Scalar>());
  Scalar cumsum = 0;
  Scalar support_sum = 0;
  Eigen::Index support = 0;
  for (std::size_t j = 0; j < sorted.size(); ++j) {
    cumsum += sorted[j];
    const auto k = static_cast<Eigen::Index>(j + 1);
    if (Scalar(1) + Scalar(k) * sorted[j] > cumsum) {
      support = k;
      support_sum = cumsum;
    }
  }
  return {(support_sum - Scalar(1)) / Scalar(support), support};
}

template <typename Derived>
RowVector<typename Derived::Scalar> sparsemax(const Eigen::MatrixBase<Derived>& z) {
  using Scalar = typename Derived::Scalar;
  const RowVector<Scalar> shifted = z.array() - z.maxCoeff();
  const Scalar tau = sparsemax_threshold(shifted).first;
  RowVector<Scalar> out(z.size());
  for (Eigen::Index i = 0; i < z.size(); ++i) out(i) = std::max(shifted(i) - tau, Scalar(0));
  return out;
}

template <typename Derived>
RowMatrix<typename Derived::Scalar> sparsemax_rows(const Eigen::MatrixBase<Derived>& x) {
  RowMatrix<typename Derived::Scalar> out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) out.row(r) = sparsemax(x.row(r));
  return out;
}

// Sinusoidal position table: even columns sin, odd columns cos of
// pos / 10000^(2i / d_model).
template <typename Scalar = double>
RowMatrix<Scalar> positional_encoding(Eigen::Index max_len, Eigen::Index d_model) {
  RowMatrix<Scalar> pe(max_len, d_model);
  for (Eigen::Index pos = 0; pos < max_len; ++pos) {
    for (Eigen::Index i = 0; 2 * i < d_model; ++i) {
      const Scalar angle = Scalar(pos) / std::pow(Scalar(10000), Scalar(2 * i) / Scalar(d_model));
      pe(pos, 2 * i) = std::sin(angle);
      if (2 * i + 1 < d_model) pe(pos, 2 * i + 1) = std::cos(angle);
    }
  }
  return pe;
}

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
  return m.derived().array().isFinite().all();
}

}  // namespace sstx::kernels
