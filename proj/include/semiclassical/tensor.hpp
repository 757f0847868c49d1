#pragma once

// Dense tensors in row-major order (last index fastest) together with the
// Kronecker/mode-product machinery used by the correction equations.
//
// Index convention: all storage and all public functions are 0-based. The
// 1-based position formula
//     i = (i_1 - 1) n_2 ... n_k + ... + (i_{k-1} - 1) n_k + i_k
// becomes, after subtracting one from every index,
//     i = ((i_1 n_2 + i_2) n_3 + ... ) n_k + i_k,
// which is exactly what DenseTensor::flat_index computes.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace semiclassical {

class DenseTensor {
 public:
  DenseTensor() = default;

  explicit DenseTensor(std::vector<std::size_t> shape)
      : shape_(std::move(shape)), data_(element_count(shape_), 0.0) {}

  DenseTensor(std::vector<std::size_t> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != element_count(shape_)) {
      throw std::invalid_argument("DenseTensor: data length " + std::to_string(data_.size()) +
                                  " does not match shape volume " +
                                  std::to_string(element_count(shape_)));
    }
  }

  /// Order-k tensor with every extent equal to n.
  static DenseTensor cube(std::size_t n, std::size_t order) {
    return DenseTensor(std::vector<std::size_t>(order, n));
  }

  static std::size_t element_count(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  }

  std::size_t order() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  double* raw() { return data_.data(); }
  const double* raw() const { return data_.data(); }

  std::size_t flat_index(std::span<const std::size_t> index) const {
    if (index.size() != shape_.size()) {
      throw std::invalid_argument("DenseTensor: index rank mismatch");
    }
    std::size_t flat = 0;
    for (std::size_t a = 0; a < shape_.size(); ++a) {
      flat = flat * shape_[a] + index[a];
    }
    return flat;
  }

  template <class... I>
  double& operator()(I... i) {
    const std::size_t idx[] = {static_cast<std::size_t>(i)...};
    return data_[flat_index(idx)];
  }
  template <class... I>
  double operator()(I... i) const {
    const std::size_t idx[] = {static_cast<std::size_t>(i)...};
    return data_[flat_index(idx)];
  }

  double& at(std::span<const std::size_t> index) { return data_[flat_index(index)]; }
  double at(std::span<const std::size_t> index) const { return data_[flat_index(index)]; }

  /// Inverse of flat_index.
  std::vector<std::size_t> multi_index(std::size_t flat) const {
    std::vector<std::size_t> index(shape_.size());
    for (std::size_t a = shape_.size(); a-- > 0;) {
      index[a] = flat % shape_[a];
      flat /= shape_[a];
    }
    return index;
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  DenseTensor& operator+=(const DenseTensor& o) {
    check_same_shape(o);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  DenseTensor& operator*=(double s) {
    for (double& x : data_) x *= s;
    return *this;
  }

  double max_abs_difference(const DenseTensor& o) const {
    check_same_shape(o);
    double m = 0.0;
    for (std::size_t i = 0; i < data_.size(); ++i) m = std::max(m, std::abs(data_[i] - o.data_[i]));
    return m;
  }

 private:
  void check_same_shape(const DenseTensor& o) const {
    if (o.shape_ != shape_) throw std::invalid_argument("DenseTensor: shape mismatch");
  }

  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

inline Eigen::VectorXd vec(const DenseTensor& t) {
  return Eigen::Map<const Eigen::VectorXd>(t.raw(), static_cast<Eigen::Index>(t.size()));
}

inline DenseTensor unvec(std::vector<std::size_t> shape, const Eigen::VectorXd& v) {
  return DenseTensor(std::move(shape), std::vector<double>(v.data(), v.data() + v.size()));
}

/// Kronecker product of square matrices, (A (x) B)[i1*n + i2, j1*n + j2] = A[i1, j1] B[i2, j2].
inline Eigen::MatrixXd kron(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.rows() != a.cols() || b.rows() != b.cols()) {
    throw std::invalid_argument("kron: square matrices required");
  }
  const Eigen::Index m = a.rows();
  const Eigen::Index n = b.rows();
  Eigen::MatrixXd out(m * n, m * n);
  for (Eigen::Index i = 0; i < m; ++i) {
    for (Eigen::Index j = 0; j < m; ++j) {
      out.block(i * n, j * n, n, n) = a(i, j) * b;
    }
  }
  return out;
}

/// Id (x) ... (x) A (x) ... (x) Id with A in slot `mode` of `order` factors.
inline Eigen::MatrixXd kron_mode_matrix(const Eigen::MatrixXd& a, std::size_t order, std::size_t mode) {
  if (mode >= order) throw std::invalid_argument("kron_mode_matrix: mode out of range");
  const Eigen::MatrixXd id = Eigen::MatrixXd::Identity(a.rows(), a.cols());
  Eigen::MatrixXd out = (mode == 0) ? a : id;
  for (std::size_t s = 1; s < order; ++s) out = kron(out, s == mode ? a : id);
  return out;
}

namespace detail {

// out[.., i, ..] (+)= alpha * sum_l a[i, l] * x[.., l, ..] on a cube tensor of extent n.
inline void mode_product(const double* a, std::size_t n, std::size_t order, std::size_t mode,
                         const double* x, double alpha, double* out, bool accumulate) {
  std::size_t outer = 1;
  for (std::size_t s = 0; s < mode; ++s) outer *= n;
  std::size_t inner = 1;
  for (std::size_t s = mode + 1; s < order; ++s) inner *= n;
  if (!accumulate) std::fill(out, out + outer * n * inner, 0.0);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < n; ++i) {
      double* dst = out + (o * n + i) * inner;
      for (std::size_t l = 0; l < n; ++l) {
        const double c = alpha * a[i * n + l];
        if (c == 0.0) continue;
        const double* src = x + (o * n + l) * inner;
        for (std::size_t r = 0; r < inner; ++r) dst[r] += c * src[r];
      }
    }
  }
}

}  // namespace detail

/// C[i_1..i_n] = A[i_k, l] B[i_1..l..i_n] for the 0-based mode k.
inline DenseTensor mode_multiply(const Eigen::MatrixXd& a, const DenseTensor& b, std::size_t mode) {
  if (mode >= b.order()) throw std::invalid_argument("mode_multiply: mode out of range");
  const std::size_t m = static_cast<std::size_t>(a.rows());
  if (a.rows() != a.cols()) throw std::invalid_argument("mode_multiply: square matrix required");
  for (std::size_t e : b.shape()) {
    if (e != m) throw std::invalid_argument("mode_multiply: tensor extents must equal matrix size");
  }
  // Eigen is column-major; copy into a row-major buffer for the raw kernel.
  std::vector<double> rm(m * m);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) rm[i * m + j] = a(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  DenseTensor out(b.shape());
  detail::mode_product(rm.data(), m, b.order(), mode, b.raw(), 1.0, out.raw(), false);
  return out;
}

/// The same product through the explicit Kronecker matrix. Only sensible for small tensors.
inline DenseTensor mode_multiply_kron(const Eigen::MatrixXd& a, const DenseTensor& b, std::size_t mode) {
  for (std::size_t e : b.shape()) {
    if (static_cast<Eigen::Index>(e) != a.rows()) {
      throw std::invalid_argument("mode_multiply_kron: tensor extents must equal matrix size");
    }
  }
  const Eigen::VectorXd v = kron_mode_matrix(a, b.order(), mode) * vec(b);
  return unvec(b.shape(), v);
}

/// J = [[0, Id], [-Id, 0]] of size 2d.
inline Eigen::MatrixXd symplectic_j(std::size_t d) {
  const auto n = static_cast<Eigen::Index>(d);
  Eigen::MatrixXd j = Eigen::MatrixXd::Zero(2 * n, 2 * n);
  j.topRightCorner(n, n).setIdentity();
  j.bottomLeftCorner(n, n) = -Eigen::MatrixXd::Identity(n, n);
  return j;
}

/// Largest |T[i..] - T[sigma(i..)]| over all index permutations sigma.
inline double symmetry_defect(const DenseTensor& t) {
  const std::size_t k = t.order();
  if (k < 2) return 0.0;
  double worst = 0.0;
  std::vector<std::size_t> perm(k);
  for (std::size_t flat = 0; flat < t.size(); ++flat) {
    const auto idx = t.multi_index(flat);
    perm = idx;
    std::sort(perm.begin(), perm.end());
    do {
      worst = std::max(worst, std::abs(t.at(idx) - t.at(perm)));
    } while (std::next_permutation(perm.begin(), perm.end()));
  }
  return worst;
}

inline bool is_symmetric(const DenseTensor& t, double tol = 1e-12) { return symmetry_defect(t) <= tol; }

/// Contracts J on every index: (J T)[i_1..i_k] = J[i_1 l_1] ... J[i_k l_k] T[l_1..l_k].
/// Uses the block form of J: each contraction swaps the position/momentum half of that
/// index and flips the sign when the output index is a momentum index.
inline DenseTensor apply_j_all(const DenseTensor& t) {
  const std::size_t k = t.order();
  if (k == 0) return t;
  const std::size_t n = t.extent(0);
  if (n % 2 != 0) throw std::invalid_argument("apply_j_all: extents must be even (2d)");
  for (std::size_t e : t.shape()) {
    if (e != n) throw std::invalid_argument("apply_j_all: cube tensor required");
  }
  const std::size_t d = n / 2;
  DenseTensor out(t.shape());
  std::vector<std::size_t> src(k);
  for (std::size_t flat = 0; flat < out.size(); ++flat) {
    const auto idx = out.multi_index(flat);
    double sign = 1.0;
    for (std::size_t a = 0; a < k; ++a) {
      if (idx[a] < d) {
        src[a] = idx[a] + d;
      } else {
        src[a] = idx[a] - d;
        sign = -sign;
      }
    }
    out.raw()[flat] = sign * t.at(src);
  }
  return out;
}

/// (J T)_{ijk} for a 3-tensor on phase space.
inline DenseTensor apply_j_triple(const DenseTensor& t) {
  if (t.order() != 3) throw std::invalid_argument("apply_j_triple: 3-tensor required");
  return apply_j_all(t);
}

/// (J . T)[i, ...] = J[i, s] T[s, ...]: J on the first index only.
inline DenseTensor apply_j_first(const DenseTensor& t) {
  const std::size_t n = t.extent(0);
  const std::size_t d = n / 2;
  const std::size_t inner = t.size() / n;
  DenseTensor out(t.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t s = i < d ? i + d : i - d;
    const double sign = i < d ? 1.0 : -1.0;
    for (std::size_t r = 0; r < inner; ++r) out.raw()[i * inner + r] = sign * t.raw()[s * inner + r];
  }
  return out;
}

/// Symmetrized third derivative of h(q, p) = |p|^2/2 + V(q) on the 2d index space.
///
/// Every entry of D^3 V is weighted by 1/6 and placed on the position block, so that
/// contracting over all ordered index triples reproduces the multi-index sum
///     sum_{|beta| = 3} (1/beta!) d_q^beta V d_p^beta b
/// of the third generalized Poisson bracket. For position-diagonal D^3 V (separable
/// potentials) this coincides with the per-pattern weights 1/6, 1/2, 1.
inline DenseTensor tilde_d3h(const DenseTensor& d3v, double symmetry_tol = 1e-10) {
  if (d3v.order() != 3) throw std::invalid_argument("tilde_d3h: D^3 V must be a 3-tensor");
  if (symmetry_defect(d3v) > symmetry_tol) {
    throw std::invalid_argument("tilde_d3h: D^3 V is not symmetric");
  }
  const std::size_t d = d3v.extent(0);
  DenseTensor out = DenseTensor::cube(2 * d, 3);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j)
      for (std::size_t k = 0; k < d; ++k) out(i, j, k) = d3v(i, j, k) / 6.0;
  return out;
}

}  // namespace semiclassical
