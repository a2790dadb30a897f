#pragma once

// Small fixed-size complex algebra and the structured Jones factors
// G_p H_{i,p} Z_{i,p} F_i used by every solver in the library.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

namespace robcal {

using cplx = std::complex<double>;
using Mat2 = Eigen::Matrix2cd;
using Mat4 = Eigen::Matrix4cd;
using Vec2 = Eigen::Vector2cd;
using Vec4 = Eigen::Vector4cd;
using Real3 = Eigen::Vector3d;

inline constexpr cplx kJ{0.0, 1.0};
inline constexpr double kPi = std::numbers::pi;

/// Raised when a factorization or closed-form solve hits a degenerate input.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when container sizes of the inputs disagree.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Antenna position in wavelength units at one frequency.
struct AntennaPosition {
  double u = 0.0;
  double v = 0.0;
};

/// Apparent source position shift alpha = (eta, zeta).
struct IonoShift {
  double eta = 0.0;
  double zeta = 0.0;
};

/// Dense (source, antenna) table, row-major over sources.
template <typename T>
class SourceAntennaGrid {
 public:
  SourceAntennaGrid() = default;
  SourceAntennaGrid(std::size_t sources, std::size_t antennas, const T& fill = T{})
      : sources_(sources), antennas_(antennas), data_(sources * antennas, fill) {}

  std::size_t sources() const { return sources_; }
  std::size_t antennas() const { return antennas_; }

  T& operator()(std::size_t i, std::size_t p) { return data_[i * antennas_ + p]; }
  const T& operator()(std::size_t i, std::size_t p) const { return data_[i * antennas_ + p]; }

  std::vector<T>& data() { return data_; }
  const std::vector<T>& data() const { return data_; }

 private:
  std::size_t sources_ = 0;
  std::size_t antennas_ = 0;
  std::vector<T> data_;
};

/// One Jones matrix per (source, antenna); also used for the known H factors.
using JonesGrid = SourceAntennaGrid<Mat2>;

inline JonesGrid identity_grid(std::size_t sources, std::size_t antennas) {
  return JonesGrid(sources, antennas, Mat2::Identity());
}

// ---------------------------------------------------------------------------
// Structured factors

inline Mat2 faraday_matrix(double angle) {
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  Mat2 f;
  f << c, -s, s, c;
  return f;
}

inline Mat2 faraday_derivative(double angle) {
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  Mat2 d;
  d << -s, -c, c, -s;
  return d;
}

inline double ionospheric_phase(const IonoShift& alpha, const AntennaPosition& r) {
  return alpha.eta * r.u + alpha.zeta * r.v;
}

inline Mat2 ionospheric_matrix(const IonoShift& alpha, const AntennaPosition& r) {
  return std::polar(1.0, ionospheric_phase(alpha, r)) * Mat2::Identity();
}

inline Mat2 phase_matrix(double phase) { return std::polar(1.0, phase) * Mat2::Identity(); }

inline Mat2 gain_matrix(const Vec2& g) { return g.asDiagonal(); }

/// J = diag(g) H Z(alpha) F(angle), factor order fixed.
inline Mat2 compose_jones(const Vec2& gain, const Mat2& direction, const IonoShift& alpha,
                          double faraday, const AntennaPosition& r) {
  return gain_matrix(gain) * direction * ionospheric_matrix(alpha, r) * faraday_matrix(faraday);
}

// ---------------------------------------------------------------------------
// vec / Kronecker helpers (column-major vec)

inline Vec4 vec(const Mat2& m) { return Eigen::Map<const Vec4>(m.data()); }

inline Mat2 unvec(const Vec4& v) { return Eigen::Map<const Mat2>(v.data()); }

inline Mat4 kron(const Mat2& a, const Mat2& b) {
  Mat4 k;
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 2; ++c) k.block<2, 2>(2 * r, 2 * c) = a(r, c) * b;
  return k;
}

/// (conj(J_q) kron J_p) c, i.e. vec(J_p C J_q^H) for c = vec(C).
inline Vec4 kron_conj_vec(const Mat2& jq, const Mat2& jp, const Vec4& c) {
  return kron(jq.conjugate(), jp) * c;
}

/// Permutation with vec(X^T) = P vec(X).
inline Mat4 vec_transpose_permutation() {
  Mat4 p = Mat4::Zero();
  p(0, 0) = 1.0;
  p(1, 2) = 1.0;
  p(2, 1) = 1.0;
  p(3, 3) = 1.0;
  return p;
}

template <typename A, typename B>
double max_abs_diff(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
  return (a - b).cwiseAbs().maxCoeff();
}

template <typename A, typename B>
bool approx_equal(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b, double tol) {
  return max_abs_diff(a, b) <= tol;
}

// ---------------------------------------------------------------------------
// Hermitian positive definite helpers

inline constexpr double kCholeskyPivotFloor = 1e-14;

/// Lower Cholesky factor of a 4x4 HPD matrix. Throws NumericalError when a
/// pivot drops to kCholeskyPivotFloor or below.
inline Mat4 cholesky_hpd(const Mat4& a) {
  Mat4 l = Mat4::Zero();
  for (int j = 0; j < 4; ++j) {
    double d = a(j, j).real();
    for (int k = 0; k < j; ++k) d -= std::norm(l(j, k));
    if (!(d > kCholeskyPivotFloor)) {
      throw NumericalError("cholesky: non-positive pivot " + std::to_string(d) + " at index " +
                           std::to_string(j));
    }
    const double ljj = std::sqrt(d);
    l(j, j) = ljj;
    for (int i = j + 1; i < 4; ++i) {
      cplx s = a(i, j);
      for (int k = 0; k < j; ++k) s -= l(i, k) * std::conj(l(j, k));
      l(i, j) = s / ljj;
    }
  }
  return l;
}

inline Mat4 inverse_hpd(const Mat4& a) {
  const Mat4 l = cholesky_hpd(a);
  const Mat4 linv = l.triangularView<Eigen::Lower>().solve(Mat4::Identity());
  Mat4 inv = linv.adjoint() * linv;
  return 0.5 * (inv + inv.adjoint());
}

inline bool is_hermitian(const Mat4& a, double tol) { return max_abs_diff(a, Mat4(a.adjoint())) <= tol; }

/// Real part of a^H W a.
inline double quadratic_form(const Vec4& a, const Mat4& w) { return (a.adjoint() * w * a)(0, 0).real(); }

/// Principal square root of a 2x2 Hermitian PSD matrix.
inline Mat2 hermitian_sqrt(const Mat2& c) {
  const double det = std::max(0.0, (c(0, 0) * c(1, 1) - c(0, 1) * c(1, 0)).real());
  const double s = std::sqrt(det);
  const double t = std::sqrt(std::max(0.0, c.trace().real() + 2.0 * s));
  if (t == 0.0) return Mat2::Zero();
  return (c + s * Mat2::Identity()) / t;
}

// ---------------------------------------------------------------------------
// Angle canonicalization

/// Wraps to (-pi, pi].
inline double wrap_phase(double x) {
  double w = std::remainder(x, 2.0 * kPi);
  if (w <= -kPi) w += 2.0 * kPi;
  return w;
}

/// Wraps a Faraday angle to (-pi/2, pi/2]; F(x + pi) = -F(x).
inline double canonical_faraday(double x) {
  double w = std::remainder(x, kPi);
  if (w <= -kPi / 2) w += kPi;
  return w;
}

}  // namespace robcal
