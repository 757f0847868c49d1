#pragma once

// Second-order correction of the Egorov approximation for h = |p|^2/2 + V(q).
//
// The trajectory carries (Phi, Lambda, Gamma, Xi), Lambda a 3-tensor, Gamma a 2-tensor and Xi a
// vector over the 2d phase-space indices. For this Hamiltonian the system splits into
//     Psi1' = p,   Psi2' = A2(Psi1) Psi3 + b2(Psi1),   Psi3' = A3(Psi1) Psi2,
// where each block of Lambda/Gamma/Xi is labelled by which of its indices are position (q) or
// momentum (p) indices:
//     Psi1 = q
//     Psi2 = (p, Lambda_pqq, Lambda_qpq, Lambda_qqp, Lambda_ppp, Gamma_qp, Gamma_pq, Xi_p)
//     Psi3 = (Lambda_qqq, Lambda_qpp, Lambda_pqp, Lambda_ppq, Gamma_qq, Gamma_pp, Xi_q)
// Each block is a d x ... x d tensor stored row-major. Every sub-flow freezes the blocks its
// right-hand side depends on, so it is solved exactly by one explicit update.
//
// a2(t) = -1/4 (D^3a_{ijk} Lambda_{kji} + 3 D^2a_{ij} Gamma_{ji} + Da_i Xi_i), derivatives of a
// taken at the propagated point.

#include "semiclassical/classical_flow.hpp"
#include "semiclassical/observables.hpp"
#include "semiclassical/ode.hpp"
#include "semiclassical/phase_space.hpp"
#include "semiclassical/potentials.hpp"
#include "semiclassical/tensor.hpp"

#include <Eigen/Dense>

#include <array>
#include <cstddef>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace semiclassical {

/// Offsets of the named blocks inside the flat (Psi1, Psi2, Psi3) vector.
struct BlockLayout {
  std::size_t d = 0;
  std::size_t d2 = 0;
  std::size_t d3 = 0;

  // Psi1
  std::size_t q = 0;
  // Psi2
  std::size_t p = 0, l_pqq = 0, l_qpq = 0, l_qqp = 0, l_ppp = 0, g_qp = 0, g_pq = 0, x_p = 0;
  // Psi3
  std::size_t l_qqq = 0, l_qpp = 0, l_pqp = 0, l_ppq = 0, g_qq = 0, g_pp = 0, x_q = 0;

  std::size_t psi1_begin = 0, psi2_begin = 0, psi3_begin = 0, total = 0;

  explicit BlockLayout(std::size_t dim = 1) : d(dim), d2(dim * dim), d3(dim * dim * dim) {
    if (dim == 0) throw std::invalid_argument("BlockLayout: dimension must be positive");
    std::size_t o = 0;
    psi1_begin = o;
    q = o, o += d;
    psi2_begin = o;
    p = o, o += d;
    l_pqq = o, o += d3;
    l_qpq = o, o += d3;
    l_qqp = o, o += d3;
    l_ppp = o, o += d3;
    g_qp = o, o += d2;
    g_pq = o, o += d2;
    x_p = o, o += d;
    psi3_begin = o;
    l_qqq = o, o += d3;
    l_qpp = o, o += d3;
    l_pqp = o, o += d3;
    l_ppq = o, o += d3;
    g_qq = o, o += d2;
    g_pp = o, o += d2;
    x_q = o, o += d;
    total = o;
  }

  std::size_t psi1_size() const { return psi2_begin - psi1_begin; }
  std::size_t psi2_size() const { return psi3_begin - psi2_begin; }
  std::size_t psi3_size() const { return total - psi3_begin; }

  /// Offset of the Lambda block for the pattern (a, b, c), each 0 for q and 1 for p.
  std::size_t lambda_block(int a, int b, int c) const {
    const std::size_t table[8] = {l_qqq, l_qqp, l_qpq, l_qpp, l_pqq, l_pqp, l_ppq, l_ppp};
    return table[(a << 2) | (b << 1) | c];
  }
  std::size_t gamma_block(int a, int b) const {
    const std::size_t table[4] = {g_qq, g_qp, g_pq, g_pp};
    return table[(a << 1) | b];
  }
  std::size_t xi_block(int a) const { return a == 0 ? x_q : x_p; }
};

/// Flow point plus correction tensors in the reordered block layout.
struct CorrectionState {
  BlockLayout layout;
  std::vector<double> y;
  double time = 0.0;

  CorrectionState() = default;
  explicit CorrectionState(std::size_t d) : layout(d), y(layout.total, 0.0) {}

  /// Zero correction tensors at the phase-space point z.
  static CorrectionState initial(const PhasePoint& z) {
    CorrectionState s(z.dimension());
    for (std::size_t i = 0; i < s.layout.d; ++i) {
      s.y[s.layout.q + i] = z.q(static_cast<Eigen::Index>(i));
      s.y[s.layout.p + i] = z.p(static_cast<Eigen::Index>(i));
    }
    return s;
  }

  std::size_t dimension() const { return layout.d; }

  PhasePoint point() const {
    const auto d = static_cast<Eigen::Index>(layout.d);
    return {Eigen::Map<const Eigen::VectorXd>(y.data() + layout.q, d),
            Eigen::Map<const Eigen::VectorXd>(y.data() + layout.p, d)};
  }

  std::span<double> psi1() { return {y.data() + layout.psi1_begin, layout.psi1_size()}; }
  std::span<double> psi2() { return {y.data() + layout.psi2_begin, layout.psi2_size()}; }
  std::span<double> psi3() { return {y.data() + layout.psi3_begin, layout.psi3_size()}; }
  std::span<const double> psi1() const { return {y.data() + layout.psi1_begin, layout.psi1_size()}; }
  std::span<const double> psi2() const { return {y.data() + layout.psi2_begin, layout.psi2_size()}; }
  std::span<const double> psi3() const { return {y.data() + layout.psi3_begin, layout.psi3_size()}; }
};

/// Phi, Lambda, Gamma, Xi over the full 2d index space.
struct GeneralCorrectionState {
  PhasePoint z;
  DenseTensor lambda;
  DenseTensor gamma;
  Eigen::VectorXd xi;

  GeneralCorrectionState() = default;
  explicit GeneralCorrectionState(const PhasePoint& point)
      : z(point),
        lambda(DenseTensor::cube(2 * point.dimension(), 3)),
        gamma(DenseTensor::cube(2 * point.dimension(), 2)),
        xi(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(2 * point.dimension()))) {}

  std::size_t dimension() const { return z.dimension(); }

  /// (q, p, vec Lambda, vec Gamma, Xi).
  Eigen::VectorXd pack() const {
    const auto n = static_cast<Eigen::Index>(2 * dimension());
    Eigen::VectorXd v(n + static_cast<Eigen::Index>(lambda.size() + gamma.size()) + n);
    v << z.stacked(), vec(lambda), vec(gamma), xi;
    return v;
  }

  static GeneralCorrectionState unpack(std::size_t d, const Eigen::VectorXd& v) {
    const auto n = static_cast<Eigen::Index>(2 * d);
    GeneralCorrectionState s(PhasePoint::from_stacked(v.head(n)));
    const Eigen::Index nl = n * n * n, ng = n * n;
    s.lambda = unvec(s.lambda.shape(), v.segment(n, nl));
    s.gamma = unvec(s.gamma.shape(), v.segment(n + nl, ng));
    s.xi = v.segment(n + nl + ng, n);
    return s;
  }
};

/// Block layout -> full 2d index tensors.
inline GeneralCorrectionState to_general(const CorrectionState& s) {
  const BlockLayout& L = s.layout;
  const std::size_t d = L.d;
  GeneralCorrectionState g(s.point());
  for (std::size_t i = 0; i < 2 * d; ++i) {
    const int a = i < d ? 0 : 1;
    const std::size_t ii = i % d;
    g.xi(static_cast<Eigen::Index>(i)) = s.y[L.xi_block(a) + ii];
    for (std::size_t j = 0; j < 2 * d; ++j) {
      const int b = j < d ? 0 : 1;
      const std::size_t jj = j % d;
      g.gamma(i, j) = s.y[L.gamma_block(a, b) + ii * d + jj];
      for (std::size_t k = 0; k < 2 * d; ++k) {
        const int c = k < d ? 0 : 1;
        const std::size_t kk = k % d;
        g.lambda(i, j, k) = s.y[L.lambda_block(a, b, c) + (ii * d + jj) * d + kk];
      }
    }
  }
  return g;
}

/// Full 2d index tensors -> block layout.
inline CorrectionState from_general(const GeneralCorrectionState& g) {
  CorrectionState s = CorrectionState::initial(g.z);
  const BlockLayout& L = s.layout;
  const std::size_t d = L.d;
  for (std::size_t i = 0; i < 2 * d; ++i) {
    const int a = i < d ? 0 : 1;
    const std::size_t ii = i % d;
    s.y[L.xi_block(a) + ii] = g.xi(static_cast<Eigen::Index>(i));
    for (std::size_t j = 0; j < 2 * d; ++j) {
      const int b = j < d ? 0 : 1;
      const std::size_t jj = j % d;
      s.y[L.gamma_block(a, b) + ii * d + jj] = g.gamma(i, j);
      for (std::size_t k = 0; k < 2 * d; ++k) {
        const int c = k < d ? 0 : 1;
        const std::size_t kk = k % d;
        s.y[L.lambda_block(a, b, c) + (ii * d + jj) * d + kk] = g.lambda(i, j, k);
      }
    }
  }
  return s;
}

/// DV, D^2V, D^3V, D^4V at one point. Separable potentials above three dimensions keep only the
/// diagonals (length d each); everything else is dense row-major.
struct PotentialJet {
  std::size_t d = 0;
  bool diagonal = false;
  std::vector<double> dv, h, d3, d4;

  PotentialJet() = default;
  PotentialJet(std::size_t dim, bool diag) : d(dim), diagonal(diag), dv(dim) {
    const std::size_t n2 = diag ? dim : dim * dim;
    const std::size_t n3 = diag ? dim : dim * dim * dim;
    const std::size_t n4 = diag ? dim : dim * dim * dim * dim;
    h.resize(n2);
    d3.resize(n3);
    d4.resize(n4);
  }

  template <PotentialField P>
  void evaluate(const P& v, std::span<const double> q, bool with_gradient = true, bool with_fourth = true) {
    if (diagonal) {
      if constexpr (SeparablePotential<P>) {
        if (with_gradient) v.gradient(q, dv);
        v.diagonal(2, q, h);
        v.diagonal(3, q, d3);
        if (with_fourth) v.diagonal(4, q, d4);
        return;
      } else {
        throw std::logic_error("PotentialJet: diagonal storage needs a separable potential");
      }
    }
    if (with_gradient) v.gradient(q, dv);
    v.hessian(q, h);
    v.third(q, d3);
    if (with_fourth) v.fourth(q, d4);
  }
};

/// Whether the block operators use diagonal derivative storage for this potential.
template <PotentialField P>
bool use_diagonal_path(const P& v) {
  if constexpr (SeparablePotential<P>) {
    return v.dimension() > 3;
  } else {
    return false;
  }
}

namespace detail {

// out += alpha * (H applied on `mode` of the cube tensor x), H symmetric d x d.
inline void h_mode(const PotentialJet& jet, std::size_t order, std::size_t mode, const double* x, double alpha,
                   double* out) {
  const std::size_t d = jet.d;
  if (!jet.diagonal) {
    mode_product(jet.h.data(), d, order, mode, x, alpha, out, true);
    return;
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t s = 0; s < mode; ++s) outer *= d;
  for (std::size_t s = mode + 1; s < order; ++s) inner *= d;
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < d; ++i) {
      const double c = alpha * jet.h[i];
      const std::size_t base = (o * d + i) * inner;
      for (std::size_t r = 0; r < inner; ++r) out[base + r] += c * x[base + r];
    }
}

// out[i, j] += alpha * sum_{a,b} D3V[i, a, b] x[a, b, j]
inline void d3_times_lambda(const PotentialJet& jet, const double* x, double alpha, double* out) {
  const std::size_t d = jet.d, d2 = d * d;
  if (jet.diagonal) {
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) out[i * d + j] += alpha * jet.d3[i] * x[(i * d + i) * d + j];
    return;
  }
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t r = 0; r < d2; ++r) {
      const double c = alpha * jet.d3[i * d2 + r];
      if (c == 0.0) continue;
      for (std::size_t j = 0; j < d; ++j) out[i * d + j] += c * x[r * d + j];
    }
}

// out[i] += alpha * sum_r D4V[i, r] x[r] over r in d^3, and the analogous D3V contraction with a
// d^2 vector.
inline void d4_times_vec(const PotentialJet& jet, const double* x, double alpha, double* out) {
  const std::size_t d = jet.d, d3 = d * d * d;
  if (jet.diagonal) {
    for (std::size_t i = 0; i < d; ++i) out[i] += alpha * jet.d4[i] * x[(i * d + i) * d + i];
    return;
  }
  for (std::size_t i = 0; i < d; ++i) {
    double s = 0.0;
    for (std::size_t r = 0; r < d3; ++r) s += jet.d4[i * d3 + r] * x[r];
    out[i] += alpha * s;
  }
}

inline void d3_times_vec(const PotentialJet& jet, const double* x, double alpha, double* out) {
  const std::size_t d = jet.d, d2 = d * d;
  if (jet.diagonal) {
    for (std::size_t i = 0; i < d; ++i) out[i] += alpha * jet.d3[i] * x[i * d + i];
    return;
  }
  for (std::size_t i = 0; i < d; ++i) {
    double s = 0.0;
    for (std::size_t r = 0; r < d2; ++r) s += jet.d3[i * d2 + r] * x[r];
    out[i] += alpha * s;
  }
}

}  // namespace detail

/// y[Psi2] += t (A2 Psi3 + b2), everything evaluated from the jet at Psi1.
inline void apply_a2(const BlockLayout& L, const PotentialJet& jet, double t, std::span<double> y) {
  double* s = y.data();
  const std::size_t d = L.d, d2 = L.d2, d3 = L.d3;
  using detail::h_mode;

  for (std::size_t i = 0; i < d; ++i) s[L.p + i] -= t * jet.dv[i];

  // Lambda_pqq, Lambda_qpq, Lambda_qqp
  h_mode(jet, 3, 0, s + L.l_qqq, -t, s + L.l_pqq);
  h_mode(jet, 3, 1, s + L.l_qqq, -t, s + L.l_qpq);
  h_mode(jet, 3, 2, s + L.l_qqq, -t, s + L.l_qqp);
  for (std::size_t r = 0; r < d3; ++r) {
    const double a = s[L.l_qpp + r], b = s[L.l_pqp + r], c = s[L.l_ppq + r];
    s[L.l_pqq + r] += t * (b + c);
    s[L.l_qpq + r] += t * (a + c);
    s[L.l_qqp + r] += t * (a + b);
  }

  // Lambda_ppp, including the source -D^3V / 6
  h_mode(jet, 3, 0, s + L.l_qpp, -t, s + L.l_ppp);
  h_mode(jet, 3, 1, s + L.l_pqp, -t, s + L.l_ppp);
  h_mode(jet, 3, 2, s + L.l_ppq, -t, s + L.l_ppp);
  if (jet.diagonal) {
    for (std::size_t i = 0; i < d; ++i) s[L.l_ppp + (i * d + i) * d + i] -= t * jet.d3[i] / 6.0;
  } else {
    for (std::size_t r = 0; r < d3; ++r) s[L.l_ppp + r] -= t * jet.d3[r] / 6.0;
  }

  // Gamma_qp, Gamma_pq
  h_mode(jet, 2, 1, s + L.g_qq, -t, s + L.g_qp);
  h_mode(jet, 2, 0, s + L.g_qq, -t, s + L.g_pq);
  detail::d3_times_lambda(jet, s + L.l_qqq, -t, s + L.g_pq);
  for (std::size_t r = 0; r < d2; ++r) {
    s[L.g_qp + r] += t * s[L.g_pp + r];
    s[L.g_pq + r] += t * s[L.g_pp + r];
  }

  // Xi_p
  detail::d4_times_vec(jet, s + L.l_qqq, -t, s + L.x_p);
  detail::d3_times_vec(jet, s + L.g_qq, -3.0 * t, s + L.x_p);
  h_mode(jet, 1, 0, s + L.x_q, -t, s + L.x_p);
}

/// y[Psi3] += t A3 Psi2, evaluated from the jet at Psi1.
inline void apply_a3(const BlockLayout& L, const PotentialJet& jet, double t, std::span<double> y) {
  double* s = y.data();
  const std::size_t d2 = L.d2, d3 = L.d3, d = L.d;
  using detail::h_mode;

  for (std::size_t r = 0; r < d3; ++r) {
    const double a = s[L.l_pqq + r], b = s[L.l_qpq + r], c = s[L.l_qqp + r], e = s[L.l_ppp + r];
    s[L.l_qqq + r] += t * (a + b + c);
    s[L.l_qpp + r] += t * e;
    s[L.l_pqp + r] += t * e;
    s[L.l_ppq + r] += t * e;
  }
  h_mode(jet, 3, 2, s + L.l_qpq, -t, s + L.l_qpp);
  h_mode(jet, 3, 1, s + L.l_qqp, -t, s + L.l_qpp);
  h_mode(jet, 3, 2, s + L.l_pqq, -t, s + L.l_pqp);
  h_mode(jet, 3, 0, s + L.l_qqp, -t, s + L.l_pqp);
  h_mode(jet, 3, 1, s + L.l_pqq, -t, s + L.l_ppq);
  h_mode(jet, 3, 0, s + L.l_qpq, -t, s + L.l_ppq);

  for (std::size_t r = 0; r < d2; ++r) s[L.g_qq + r] += t * (s[L.g_qp + r] + s[L.g_pq + r]);
  detail::d3_times_lambda(jet, s + L.l_qqp, -t, s + L.g_pp);
  h_mode(jet, 2, 0, s + L.g_qp, -t, s + L.g_pp);
  h_mode(jet, 2, 1, s + L.g_pq, -t, s + L.g_pp);

  for (std::size_t i = 0; i < d; ++i) s[L.x_q + i] += t * s[L.x_p + i];
}

/// Explicit block matrices A2, A3 and vector b2 at one position, built literally from
/// K1 ... K15 through Kronecker products.
struct BlockMatrices {
  Eigen::MatrixXd a2;
  Eigen::MatrixXd a3;
  Eigen::VectorXd b2;
  /// The named K blocks (index 1..15; entry 0 unused).
  std::array<Eigen::MatrixXd, 16> k;
};

namespace detail {

inline Eigen::MatrixXd kron_rect(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  Eigen::MatrixXd out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j) out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

inline Eigen::MatrixXd stack_rows(std::initializer_list<Eigen::MatrixXd> blocks) {
  Eigen::Index rows = 0, cols = -1;
  for (const auto& b : blocks) {
    rows += b.rows();
    if (cols < 0) cols = b.cols();
    if (b.cols() != cols) throw std::logic_error("stack_rows: column mismatch");
  }
  Eigen::MatrixXd out(rows, cols);
  Eigen::Index r = 0;
  for (const auto& b : blocks) {
    out.middleRows(r, b.rows()) = b;
    r += b.rows();
  }
  return out;
}

inline Eigen::MatrixXd stack_cols(std::initializer_list<Eigen::MatrixXd> blocks) {
  Eigen::Index cols = 0, rows = -1;
  for (const auto& b : blocks) {
    cols += b.cols();
    if (rows < 0) rows = b.rows();
    if (b.rows() != rows) throw std::logic_error("stack_cols: row mismatch");
  }
  Eigen::MatrixXd out(rows, cols);
  Eigen::Index c = 0;
  for (const auto& b : blocks) {
    out.middleCols(c, b.cols()) = b;
    c += b.cols();
  }
  return out;
}

}  // namespace detail

/// Assembles A2(q), A3(q), b2(q). K14 acts on Xi_q and is -D^2V (the only block that fits the
/// Xi_p equation); Gamma blocks in Psi2 are ordered (Gamma_qp, Gamma_pq).
template <PotentialField P>
BlockMatrices assemble_blocks(const P& v, const Eigen::VectorXd& q) {
  const std::size_t d = v.dimension();
  const auto n = static_cast<Eigen::Index>(d);
  const Eigen::Index n2 = n * n, n3 = n2 * n;
  const BlockLayout L(d);

  const DenseTensor dv = derivative_tensor(v, q, 1);
  const DenseTensor hv = derivative_tensor(v, q, 2);
  const DenseTensor d3v = derivative_tensor(v, q, 3);
  const DenseTensor d4v = derivative_tensor(v, q, 4);

  Eigen::MatrixXd h(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) h(i, j) = hv(i, j);
  // Matricizations: row i, columns running over the remaining indices in vec order.
  Eigen::MatrixXd d3m(n, n2), d4m(n, n3);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index r = 0; r < n2; ++r) d3m(i, r) = d3v.raw()[i * n2 + r];
    for (Eigen::Index r = 0; r < n3; ++r) d4m(i, r) = d4v.raw()[i * n3 + r];
  }

  const Eigen::MatrixXd id1 = Eigen::MatrixXd::Identity(n, n);
  const Eigen::MatrixXd id2 = Eigen::MatrixXd::Identity(n2, n2);
  const Eigen::MatrixXd id3 = Eigen::MatrixXd::Identity(n3, n3);
  const Eigen::MatrixXd z3 = Eigen::MatrixXd::Zero(n3, n3);
  const Eigen::MatrixXd z23 = Eigen::MatrixXd::Zero(n2, n3);
  const Eigen::MatrixXd mh = -h;
  const Eigen::MatrixXd h_1 = kron(kron(mh, id1), id1);  // -H on the first index
  const Eigen::MatrixXd h_2 = kron(kron(id1, mh), id1);
  const Eigen::MatrixXd h_3 = kron(kron(id1, id1), mh);
  const Eigen::MatrixXd d3_x_id = detail::kron_rect(-d3m, id1);

  BlockMatrices m;
  auto& k = m.k;
  k[1] = detail::stack_cols({id3, id3, id3});
  k[2] = detail::stack_rows({h_1, h_2, h_3});
  k[3] = detail::stack_rows({detail::stack_cols({z3, id3, id3}), detail::stack_cols({id3, z3, id3}),
                             detail::stack_cols({id3, id3, z3})});
  k[4] = detail::stack_rows({detail::stack_cols({z3, h_3, h_2}), detail::stack_cols({h_3, z3, h_1}),
                             detail::stack_cols({h_2, h_1, z3})});
  k[5] = detail::stack_rows({id3, id3, id3});
  k[6] = detail::stack_cols({h_1, h_2, h_3});
  k[7] = detail::stack_cols({id2, id2});
  k[8] = detail::stack_rows({z23, d3_x_id});
  k[9] = detail::stack_rows({kron(id1, mh), kron(mh, id1)});
  k[10] = detail::stack_cols({z23, z23, d3_x_id});
  k[11] = detail::stack_cols({kron(mh, id1), kron(id1, mh)});
  k[12] = -d4m;
  k[13] = -3.0 * d3m;
  k[14] = -h;
  k[15] = detail::stack_rows({id2, id2});

  // Row and column offsets relative to the start of Psi2 / Psi3.
  const auto r2 = [&](std::size_t off) { return static_cast<Eigen::Index>(off - L.psi2_begin); };
  const auto r3 = [&](std::size_t off) { return static_cast<Eigen::Index>(off - L.psi3_begin); };
  const auto n2s = static_cast<Eigen::Index>(L.psi2_size());
  const auto n3s = static_cast<Eigen::Index>(L.psi3_size());

  m.a2 = Eigen::MatrixXd::Zero(n2s, n3s);
  m.a2.block(r2(L.l_pqq), r3(L.l_qqq), 3 * n3, n3) = k[2];
  m.a2.block(r2(L.l_pqq), r3(L.l_qpp), 3 * n3, 3 * n3) = k[3];
  m.a2.block(r2(L.l_ppp), r3(L.l_qpp), n3, 3 * n3) = k[6];
  m.a2.block(r2(L.g_qp), r3(L.l_qqq), 2 * n2, n3) = k[8];
  m.a2.block(r2(L.g_qp), r3(L.g_qq), 2 * n2, n2) = k[9];
  m.a2.block(r2(L.g_qp), r3(L.g_pp), 2 * n2, n2) = k[15];
  m.a2.block(r2(L.x_p), r3(L.l_qqq), n, n3) = k[12];
  m.a2.block(r2(L.x_p), r3(L.g_qq), n, n2) = k[13];
  m.a2.block(r2(L.x_p), r3(L.x_q), n, n) = k[14];

  m.a3 = Eigen::MatrixXd::Zero(n3s, n2s);
  m.a3.block(r3(L.l_qqq), r2(L.l_pqq), n3, 3 * n3) = k[1];
  m.a3.block(r3(L.l_qpp), r2(L.l_pqq), 3 * n3, 3 * n3) = k[4];
  m.a3.block(r3(L.l_qpp), r2(L.l_ppp), 3 * n3, n3) = k[5];
  m.a3.block(r3(L.g_qq), r2(L.g_qp), n2, 2 * n2) = k[7];
  m.a3.block(r3(L.g_pp), r2(L.l_pqq), n2, 3 * n3) = k[10];
  m.a3.block(r3(L.g_pp), r2(L.g_qp), n2, 2 * n2) = k[11];
  m.a3.block(r3(L.x_q), r2(L.x_p), n, n) = id1;

  m.b2 = Eigen::VectorXd::Zero(n2s);
  for (Eigen::Index i = 0; i < n; ++i) m.b2(r2(L.p) + i) = -dv(static_cast<std::size_t>(i));
  for (Eigen::Index r = 0; r < n3; ++r) m.b2(r2(L.l_ppp) + r) = -d3v.raw()[r] / 6.0;
  return m;
}

/// Matrix-free block operators for the production path. Holds its own jet buffer, so use one
/// instance per worker thread.
template <PotentialField P>
class MatrixFreeBlocks {
 public:
  explicit MatrixFreeBlocks(const P& v) : MatrixFreeBlocks(v, use_diagonal_path(v)) {}
  MatrixFreeBlocks(const P& v, bool diagonal) : v_(&v), jet_(v.dimension(), diagonal) {}

  void psi2(const BlockLayout& L, double t, std::span<double> y) {
    jet_.evaluate(*v_, std::span<const double>(y.data() + L.q, L.d), true, true);
    apply_a2(L, jet_, t, y);
  }
  void psi3(const BlockLayout& L, double t, std::span<double> y) {
    jet_.evaluate(*v_, std::span<const double>(y.data() + L.q, L.d), false, false);
    apply_a3(L, jet_, t, y);
  }

 private:
  const P* v_;
  PotentialJet jet_;
};

/// Block operators through the assembled matrices. Slow; used for cross-checks and for fault
/// injection (the hook may modify the matrices before they are applied).
template <PotentialField P>
class DenseBlocks {
 public:
  using Hook = std::function<void(BlockMatrices&)>;
  explicit DenseBlocks(const P& v, Hook hook = {}) : v_(&v), hook_(std::move(hook)) {}

  void psi2(const BlockLayout& L, double t, std::span<double> y) {
    const BlockMatrices m = matrices(L, y);
    Eigen::Map<Eigen::VectorXd> psi2(y.data() + L.psi2_begin, static_cast<Eigen::Index>(L.psi2_size()));
    Eigen::Map<const Eigen::VectorXd> psi3(y.data() + L.psi3_begin, static_cast<Eigen::Index>(L.psi3_size()));
    psi2 += t * (m.a2 * psi3 + m.b2);
  }
  void psi3(const BlockLayout& L, double t, std::span<double> y) {
    const BlockMatrices m = matrices(L, y);
    Eigen::Map<const Eigen::VectorXd> psi2(y.data() + L.psi2_begin, static_cast<Eigen::Index>(L.psi2_size()));
    Eigen::Map<Eigen::VectorXd> psi3(y.data() + L.psi3_begin, static_cast<Eigen::Index>(L.psi3_size()));
    psi3 += t * (m.a3 * psi2);
  }

 private:
  BlockMatrices matrices(const BlockLayout& L, std::span<const double> y) const {
    const Eigen::VectorXd q = Eigen::Map<const Eigen::VectorXd>(y.data() + L.q, static_cast<Eigen::Index>(L.d));
    BlockMatrices m = assemble_blocks(*v_, q);
    if (hook_) hook_(m);
    return m;
  }

  const P* v_;
  Hook hook_;
};

/// psi1^t: q += t p.
inline void sub_flow_psi1(double t, CorrectionState& s) {
  const BlockLayout& L = s.layout;
  for (std::size_t i = 0; i < L.d; ++i) s.y[L.q + i] += t * s.y[L.p + i];
}

/// psi2^t: Psi2 += t (A2(Psi1) Psi3 + b2(Psi1)).
template <class Ops>
void sub_flow_psi2(double t, CorrectionState& s, Ops& ops) {
  ops.psi2(s.layout, t, s.y);
}

/// psi3^t: Psi3 += t A3(Psi1) Psi2.
template <class Ops>
void sub_flow_psi3(double t, CorrectionState& s, Ops& ops) {
  ops.psi3(s.layout, t, s.y);
}

/// Composition of F2 = psi2^{tau/2} psi1^{tau/2} psi3^{tau} psi1^{tau/2} psi2^{tau/2} steps with
/// the given weights, flattened with adjacent sub-flows of the same kind merged.
class CorrectionStepper {
 public:
  explicit CorrectionStepper(const SplittingScheme& scheme) : order_(scheme.order()) {
    std::vector<std::pair<int, double>> ops;
    for (double w : scheme.weights()) {
      ops.push_back({2, 0.5 * w});
      ops.push_back({1, 0.5 * w});
      ops.push_back({3, w});
      ops.push_back({1, 0.5 * w});
      ops.push_back({2, 0.5 * w});
    }
    for (const auto& op : ops) {
      if (!ops_.empty() && ops_.back().first == op.first) {
        ops_.back().second += op.second;
      } else {
        ops_.push_back(op);
      }
    }
  }

  /// Order 2 (F2) or 4 (triple jump of F2).
  static CorrectionStepper order(int k) { return CorrectionStepper(SplittingScheme(k)); }

  int scheme_order() const { return order_; }

  template <class Ops>
  void step(double tau, CorrectionState& s, Ops& ops) const {
    for (const auto& [type, w] : ops_) {
      const double c = w * tau;
      switch (type) {
        case 1: sub_flow_psi1(c, s); break;
        case 2: sub_flow_psi2(c, s, ops); break;
        default: sub_flow_psi3(c, s, ops); break;
      }
    }
    s.time += tau;
  }

 private:
  int order_;
  std::vector<std::pair<int, double>> ops_;
};

template <class Ops>
CorrectionState f2_step(double tau, CorrectionState s, Ops& ops) {
  CorrectionStepper(SplittingScheme(2)).step(tau, s, ops);
  return s;
}

template <class Ops>
CorrectionState f4_step(double tau, CorrectionState s, Ops& ops) {
  CorrectionStepper(SplittingScheme(4)).step(tau, s, ops);
  return s;
}

/// Fourth-order splitting from zero correction tensors at z0 up to time t.
template <PotentialField P>
CorrectionState evolve_correction(const PhasePoint& z0, double t, double tau, const P& v) {
  const StepCount c = commensurate_steps(t, tau);
  const CorrectionStepper stepper = CorrectionStepper::order(4);
  MatrixFreeBlocks<P> ops(v);
  CorrectionState s = CorrectionState::initial(z0);
  for (std::size_t n = 0; n < c.steps; ++n) stepper.step(c.tau, s, ops);
  s.time = t;
  return s;
}

/// -1/4 (D^3a_{ijk} Lambda_{kji} + 3 D^2a_{ij} Gamma_{ji} + Da_i Xi_i) from a jet at the flow point.
inline double a2_contract(const ObservableJet& jet, const GeneralCorrectionState& g) {
  const std::size_t n = 2 * g.dimension();
  double s3 = 0.0, s2 = 0.0, s1 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    s1 += jet.grad(static_cast<Eigen::Index>(i)) * g.xi(static_cast<Eigen::Index>(i));
    for (std::size_t j = 0; j < n; ++j) {
      s2 += jet.hess(i, j) * g.gamma(j, i);
      for (std::size_t k = 0; k < n; ++k) s3 += jet.third(i, j, k) * g.lambda(k, j, i);
    }
  }
  return -0.25 * (s3 + 3.0 * s2 + s1);
}

inline double a2_eval(const Observable& a, const CorrectionState& s) {
  const GeneralCorrectionState g = to_general(s);
  return a2_contract(a.jet(g.z), g);
}

/// Right-hand side of the full-index system:
///     Lambda' = M.1 Lambda + M.2 Lambda + M.3 Lambda + C1
///     Gamma'_ij = (C2_i)_kl Lambda_lkj + M.1 Gamma + M.2 Gamma
///     Xi'_i = (C3_i)_jkl Lambda_lkj + 3 (C2_i)_jk Gamma_kj + M Xi
/// with M = J D^2h, C1 = J D~^3h J J, C2 = J . D^3h, C3 = J . D^4h at the flow point, plus the
/// Hamiltonian vector field J Dh for the point itself.
template <PotentialField P>
GeneralCorrectionState general_rhs(const GeneralCorrectionState& s, const Hamiltonian<P>& h) {
  const std::size_t d = s.dimension();
  const std::size_t n = 2 * d;
  const Eigen::MatrixXd j = symplectic_j(d);
  const Eigen::MatrixXd m = j * h.hessian_matrix(s.z);
  const DenseTensor c1 = apply_j_triple(tilde_d3h(derivative_tensor(h.potential(), s.z.q, 3)));
  const DenseTensor c2 = apply_j_first(h.derivative(s.z, 3));
  const DenseTensor c3 = apply_j_first(h.derivative(s.z, 4));

  GeneralCorrectionState out(PhasePoint::from_stacked(j * h.gradient(s.z)));
  out.lambda = c1;
  for (std::size_t mode = 0; mode < 3; ++mode) out.lambda += mode_multiply(m, s.lambda, mode);

  out.gamma = mode_multiply(m, s.gamma, 0);
  out.gamma += mode_multiply(m, s.gamma, 1);
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < n; ++b) {
      double acc = 0.0;
      for (std::size_t k = 0; k < n; ++k)
        for (std::size_t l = 0; l < n; ++l) acc += c2(a, k, l) * s.lambda(l, k, b);
      out.gamma(a, b) += acc;
    }

  out.xi = m * s.xi;
  for (std::size_t a = 0; a < n; ++a) {
    double acc = 0.0;
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t k = 0; k < n; ++k) {
        acc += 3.0 * c2(a, b, k) * s.gamma(k, b);
        for (std::size_t l = 0; l < n; ++l) acc += c3(a, b, k, l) * s.lambda(l, k, b);
      }
    out.xi(static_cast<Eigen::Index>(a)) += acc;
  }
  return out;
}

/// Integrates the full-index system with classical RK4 from zero tensors at z0.
template <PotentialField P>
GeneralCorrectionState evolve_general(const PhasePoint& z0, double t, double tau, const P& v) {
  const StepCount c = commensurate_steps(t, tau);
  const Hamiltonian<P> h(v);
  const std::size_t d = z0.dimension();
  const OdeRhs f = [&](const Eigen::VectorXd& y) {
    return general_rhs(GeneralCorrectionState::unpack(d, y), h).pack();
  };
  return GeneralCorrectionState::unpack(d, rk4_integrate(f, GeneralCorrectionState(z0).pack(), c.tau, c.steps));
}

}  // namespace semiclassical
