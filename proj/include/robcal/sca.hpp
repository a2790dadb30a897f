#pragma once

// Mono-frequency structured calibration by alternating least squares over the
// factors of J_{i,p} = G_p H_{i,p} Z_{i,p} F_i:
//   1. Faraday angle per source        (closed form, exact 1-D minimizer)
//   2. complex gains per antenna        (closed form, per diagonal entry)
//   3. free ionospheric phase per (i,p) (closed form)
//   4. shift alpha_i from the phases    (2-unknown least squares)
//
// Unstructured Jones estimates are only defined up to a right unitary mixing
// of the stacked [J_1p C_1^1/2, ..., J_Dp C_D^1/2]. Each cycle first fits that
// mixing jointly with a per-source Faraday correction against the current
// structured model.
//
// At a single frequency a shift common to all sources is indistinguishable
// from a phase ramp on the gains, so (eta, zeta) are only determined up to a
// common offset.

#include <robcal/jones.hpp>
#include <robcal/simulator.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

namespace robcal {

// ---------------------------------------------------------------------------
// Closed-form sub-problems

/// argmin_angle sum_p ||Jhat_p - K_p F(angle)||_F^2 with K_p = G_p H_{i,p} Z_{i,p}.
/// ||K F||_F does not depend on the angle, so the cost is
/// const - 2 (a cos + b sin) and the minimizer is atan2(b, a).
inline double estimate_faraday(std::span<const Mat2> jhat, std::span<const Mat2> fixed) {
  if (jhat.size() != fixed.size()) throw DimensionError("estimate_faraday: size mismatch");
  Mat2 n = Mat2::Zero();
  for (std::size_t p = 0; p < jhat.size(); ++p) n.noalias() += fixed[p].adjoint() * jhat[p];
  const double a = (n(0, 0) + n(1, 1)).real();
  const double b = (n(1, 0) - n(0, 1)).real();
  if (a == 0.0 && b == 0.0) throw NumericalError("estimate_faraday: degenerate cost, angle unidentifiable");
  return std::atan2(b, a);
}

/// Per-entry accumulation of [g]_k = (sum [W*]_kk)^-1 sum [X*]_kk with
/// X = R Jhat^H and W = R R^H, summed over sources (and frequencies).
class GainAccumulator {
 public:
  void add(const Mat2& jhat, const Mat2& r) {
    const Mat2 x = r * jhat.adjoint();
    const Mat2 w = r * r.adjoint();
    for (int k = 0; k < 2; ++k) {
      num_(k) += std::conj(x(k, k));
      den_(k) += w(k, k).real();
    }
  }

  Vec2 solve() const {
    Vec2 g;
    for (int k = 0; k < 2; ++k) {
      if (!(den_(k) > 0.0))
        throw NumericalError("gain estimate: zero denominator for gain component " + std::to_string(k + 1));
      g(k) = num_(k) / den_(k);
    }
    return g;
  }

 private:
  Vec2 num_ = Vec2::Zero();
  Eigen::Vector2d den_ = Eigen::Vector2d::Zero();
};

/// argmin_g sum_i ||Jhat_i - diag(g) R_i||_F^2, R_i = H_{i,p} Z_{i,p} F_i.
inline Vec2 estimate_gain_mono(std::span<const Mat2> jhat, std::span<const Mat2> r) {
  if (jhat.size() != r.size()) throw DimensionError("estimate_gain_mono: size mismatch");
  GainAccumulator acc;
  for (std::size_t i = 0; i < jhat.size(); ++i) acc.add(jhat[i], r[i]);
  return acc.solve();
}

/// argmin_phase ||Jhat - e^{j phase} G H F||_F^2 = arg tr(Jhat F^T H^H G^H).
inline double estimate_phase(const Mat2& jhat, const Vec2& gain, const Mat2& direction, double faraday) {
  const Mat2 k = gain_matrix(gain) * direction * faraday_matrix(faraday);
  const cplx t = (jhat * k.adjoint()).trace();
  if (!(std::abs(t) > 1e-14 * jhat.norm() * k.norm())) throw NumericalError("estimate_phase: phase unidentifiable");
  return wrap_phase(std::arg(t));
}

/// Least-squares alpha from phi_p ~ eta u_p + zeta v_p.
inline IonoShift estimate_alpha(std::span<const double> phases, std::span<const AntennaPosition> positions) {
  if (phases.size() != positions.size()) throw DimensionError("estimate_alpha: size mismatch");
  double suu = 0.0, svv = 0.0, suv = 0.0, su_phi = 0.0, sv_phi = 0.0;
  for (std::size_t p = 0; p < phases.size(); ++p) {
    const auto& r = positions[p];
    suu += r.u * r.u;
    svv += r.v * r.v;
    suv += r.u * r.v;
    su_phi += phases[p] * r.u;
    sv_phi += phases[p] * r.v;
  }
  const double det = suu * svv - suv * suv;
  if (!(det > 1e-12 * suu * svv)) throw NumericalError("estimate_alpha: collinear array geometry");
  return {(su_phi * svv - sv_phi * suv) / det, (sv_phi * suu - su_phi * suv) / det};
}

// ---------------------------------------------------------------------------
// Gauge alignment

namespace detail {

inline Eigen::MatrixXcd polar_unitary(const Eigen::MatrixXcd& a) {
  Eigen::JacobiSVD<Eigen::MatrixXcd> svd(a, Eigen::ComputeFullU | Eigen::ComputeFullV);
  return svd.matrixU() * svd.matrixV().adjoint();
}

}  // namespace detail

struct GaugeFit {
  JonesGrid aligned;
  std::vector<double> rotation;  // per-source extra Faraday angle, zero unless profiled
  double cost = 0.0;
};

/// Rotates the unstructured estimate within its invariance class,
/// [J_1p C_1^1/2, ..., J_Dp C_D^1/2] -> [...] Q with Q unitary (2D x 2D),
/// minimizing sum_{i,p} ||J_ip - T_ip F(delta_i)||_F^2 against `target`.
/// delta is held at zero unless `profile_rotation` is set; the Faraday rotation
/// is nearly a gauge direction, so fitting the two separately stalls.
/// Visibilities are unchanged. The better of Q = I and the C^1/2-weighted
/// Procrustes solution seeds a Gauss-Newton refinement on the unitary group.
inline GaugeFit fit_gauge(const JonesGrid& jhat, const JonesGrid& target, std::span<const Mat2> coherencies,
                          bool profile_rotation, int max_refine = 50) {
  const std::size_t d = jhat.sources();
  const std::size_t m = jhat.antennas();
  if (target.sources() != d || target.antennas() != m || coherencies.size() != d)
    throw DimensionError("align_gauge: shape mismatch");
  const auto n = static_cast<Eigen::Index>(2 * d);
  const auto rows = static_cast<Eigen::Index>(2 * m);
  Eigen::MatrixXcd sq = Eigen::MatrixXcd::Zero(n, n);
  Eigen::MatrixXcd isq = Eigen::MatrixXcd::Zero(n, n);
  for (std::size_t i = 0; i < d; ++i) {
    const Mat2 s = hermitian_sqrt(coherencies[i]);
    Eigen::FullPivLU<Mat2> lu(s);
    if (!lu.isInvertible())
      throw NumericalError("align_gauge: coherency of source " + std::to_string(i + 1) + " is singular");
    const auto o = static_cast<Eigen::Index>(2 * i);
    sq.block(o, o, 2, 2) = s;
    isq.block(o, o, 2, 2) = lu.inverse();
  }
  // Rows: antennas (2 each); columns: sources (2 each).
  Eigen::MatrixXcd x(rows, n), t(rows, n);
  for (std::size_t p = 0; p < m; ++p)
    for (std::size_t i = 0; i < d; ++i) {
      x.block(static_cast<Eigen::Index>(2 * p), static_cast<Eigen::Index>(2 * i), 2, 2) = jhat(i, p);
      t.block(static_cast<Eigen::Index>(2 * p), static_cast<Eigen::Index>(2 * i), 2, 2) = target(i, p);
    }
  const Eigen::MatrixXcd k = x * sq;
  auto rotated = [&](const Eigen::VectorXd& delta) {
    Eigen::MatrixXcd r = t;
    for (std::size_t i = 0; i < d; ++i) {
      const auto o = static_cast<Eigen::Index>(2 * i);
      r.middleCols(o, 2) = t.middleCols(o, 2) * faraday_matrix(delta(static_cast<Eigen::Index>(i)));
    }
    return r;
  };
  auto cost = [&](const Eigen::MatrixXcd& q, const Eigen::VectorXd& delta) {
    return (k * q * isq - rotated(delta)).squaredNorm();
  };

  Eigen::VectorXd delta = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d));
  Eigen::MatrixXcd q = Eigen::MatrixXcd::Identity(n, n);
  double c = cost(q, delta);
  {
    const Eigen::MatrixXcd qp = detail::polar_unitary(k.adjoint() * t * sq);
    const double cp = cost(qp, delta);
    if (cp < c) {
      q = qp;
      c = cp;
    }
  }

  // Skew-Hermitian basis, n^2 real directions.
  std::vector<Eigen::MatrixXcd> basis;
  for (Eigen::Index a = 0; a < n; ++a)
    for (Eigen::Index b = a; b < n; ++b) {
      Eigen::MatrixXcd e = Eigen::MatrixXcd::Zero(n, n);
      if (a == b) {
        e(a, a) = kJ;
        basis.push_back(e);
      } else {
        e(a, b) = 1.0;
        e(b, a) = -1.0;
        basis.push_back(e);
        e(a, b) = kJ;
        e(b, a) = kJ;
        basis.push_back(e);
      }
    }
  const auto nb = static_cast<Eigen::Index>(basis.size());
  const auto nd = profile_rotation ? static_cast<Eigen::Index>(d) : Eigen::Index{0};
  const Eigen::Index nr = 2 * rows * n;
  auto flatten = [&](const Eigen::MatrixXcd& r) {
    Eigen::VectorXd v(nr);
    for (Eigen::Index e = 0; e < r.size(); ++e) {
      v(2 * e) = r(e).real();
      v(2 * e + 1) = r(e).imag();
    }
    return v;
  };
  const Mat2 e_rot = faraday_derivative(0.0);
  for (int it = 0; it < max_refine && c > 0.0; ++it) {
    const Eigen::MatrixXcd kq = k * q;
    const Eigen::MatrixXcd tr = rotated(delta);
    Eigen::MatrixXd jac(nr, nb + nd);
    for (Eigen::Index b = 0; b < nb; ++b) jac.col(b) = flatten(kq * basis[static_cast<std::size_t>(b)] * isq);
    for (Eigen::Index i = 0; i < nd; ++i) {
      Eigen::MatrixXcd dt = Eigen::MatrixXcd::Zero(rows, n);
      dt.middleCols(2 * i, 2) = -tr.middleCols(2 * i, 2) * e_rot;
      jac.col(nb + i) = flatten(dt);
    }
    const Eigen::VectorXd r0 = flatten(kq * isq - tr);
    const Eigen::VectorXd step = jac.colPivHouseholderQr().solve(-r0);
    Eigen::MatrixXcd gen = Eigen::MatrixXcd::Zero(n, n);
    for (Eigen::Index b = 0; b < nb; ++b) gen += step(b) * basis[static_cast<std::size_t>(b)];
    double h = 1.0;
    bool accepted = false;
    for (int ls = 0; ls < 30; ++ls, h *= 0.5) {
      const Eigen::MatrixXcd qc = detail::polar_unitary(q * (Eigen::MatrixXcd::Identity(n, n) + h * gen));
      Eigen::VectorXd dc = delta;
      if (nd > 0) dc += h * step.tail(nd);
      const double cc = cost(qc, dc);
      if (cc < c) {
        accepted = (c - cc) > 1e-15 * c;
        q = qc;
        delta = dc;
        c = cc;
        break;
      }
    }
    if (!accepted) break;
  }

  GaugeFit out{JonesGrid(d, m), std::vector<double>(delta.data(), delta.data() + delta.size()), c};
  const Eigen::MatrixXcd aligned = k * q * isq;
  for (std::size_t p = 0; p < m; ++p)
    for (std::size_t i = 0; i < d; ++i)
      out.aligned(i, p) = aligned.block(static_cast<Eigen::Index>(2 * p), static_cast<Eigen::Index>(2 * i), 2, 2);
  return out;
}

/// Gauge rotation of `jhat` closest to `target` in the unweighted Frobenius metric.
inline JonesGrid align_gauge(const JonesGrid& jhat, const JonesGrid& target, std::span<const Mat2> coherencies) {
  return fit_gauge(jhat, target, coherencies, false).aligned;
}

// ---------------------------------------------------------------------------
// Costs

/// l_i = sum_p ||Jhat_{i,p} - G_p H_{i,p} Z_{i,p} F_i||_F^2 summed over sources.
inline double structured_cost(const JonesGrid& jhat, const StructuredJonesParams& params, const Channel& channel) {
  const JonesGrid model = structured_jones(params, channel);
  double c = 0.0;
  for (std::size_t k = 0; k < model.data().size(); ++k) c += (jhat.data()[k] - model.data()[k]).squaredNorm();
  return c;
}

/// Same cost with a free phase per (source, antenna) in place of Z(alpha).
inline double free_phase_cost(const JonesGrid& jhat, const StructuredJonesParams& params, const Channel& channel,
                              const SourceAntennaGrid<double>& phases) {
  double c = 0.0;
  for (std::size_t i = 0; i < jhat.sources(); ++i)
    for (std::size_t p = 0; p < jhat.antennas(); ++p) {
      const Mat2 model = gain_matrix(params.gains[p]) * channel.direction(i, p) * phase_matrix(phases(i, p)) *
                         faraday_matrix(params.faraday[i]);
      c += (jhat(i, p) - model).squaredNorm();
    }
  return c;
}

// ---------------------------------------------------------------------------
// Driver

struct ScaOptions {
  int max_iter = 500;
  double rel_tol = 1e-8;
  bool align_gauge = true;
  bool fix_gains = false;  // skip step 2, keep init.gains
};

/// Cost after gauge alignment and after each of the four steps. Step 3 is
/// measured with free phases; steps 0-2 and 4 with the structured model.
struct ScaCycle {
  double aligned = 0.0;
  double after_faraday = 0.0;
  double after_gain = 0.0;
  double after_phase = 0.0;
  double after_alpha = 0.0;
};

struct ScaDiagnostics {
  std::vector<ScaCycle> cycles;
  int iterations = 0;
  bool converged = false;
  int alpha_backtracks = 0;
};

struct ScaResult {
  StructuredJonesParams params;
  JonesGrid aligned;
  ScaDiagnostics diagnostics;
};

namespace detail {

inline void sca_faraday_step(const JonesGrid& j, StructuredJonesParams& par, const Channel& ch) {
  const std::size_t m = j.antennas();
  std::vector<Mat2> jh(m), fixed(m);
  for (std::size_t i = 0; i < j.sources(); ++i) {
    for (std::size_t p = 0; p < m; ++p) {
      jh[p] = j(i, p);
      fixed[p] = gain_matrix(par.gains[p]) * ch.direction(i, p) * ionospheric_matrix(par.shift[i], ch.positions[p]);
    }
    par.faraday[i] = estimate_faraday(jh, fixed);
  }
}

inline void sca_gain_step(const JonesGrid& j, StructuredJonesParams& par, const Channel& ch) {
  const std::size_t d = j.sources();
  std::vector<Mat2> jh(d), r(d);
  for (std::size_t p = 0; p < j.antennas(); ++p) {
    for (std::size_t i = 0; i < d; ++i) {
      jh[i] = j(i, p);
      r[i] = ch.direction(i, p) * ionospheric_matrix(par.shift[i], ch.positions[p]) * faraday_matrix(par.faraday[i]);
    }
    par.gains[p] = estimate_gain_mono(jh, r);
  }
}

}  // namespace detail

/// Alternates steps 1-4 until the relative cost change drops below rel_tol.
/// Step 4 replaces the free phases by Lambda^T alpha; if that raises the
/// structured cost above its step-2 value, alpha is backtracked toward the
/// previous estimate (kept unchanged if no improvement is found).
inline ScaResult run_sca(const JonesGrid& jhat, std::span<const Mat2> coherencies, const Channel& channel,
                         const StructuredJonesParams& init, const ScaOptions& opts = {}) {
  if (init.sources() != jhat.sources() || init.antennas() != jhat.antennas())
    throw DimensionError("run_sca: init parameters do not match Jones set");
  ScaResult res{init, jhat, {}};
  auto& par = res.params;
  double scale = 0.0;
  for (const auto& x : jhat.data()) scale += x.squaredNorm();
  const double floor = 1e-22 * std::max(scale, 1e-300);
  double prev = std::numeric_limits<double>::infinity();
  for (int it = 0; it < opts.max_iter; ++it) {
    if (opts.align_gauge) {
      GaugeFit g = fit_gauge(res.aligned, structured_jones(par, channel), coherencies, true);
      res.aligned = std::move(g.aligned);
      for (std::size_t i = 0; i < par.sources(); ++i) par.faraday[i] = wrap_phase(par.faraday[i] + g.rotation[i]);
    }
    const JonesGrid& j = res.aligned;
    ScaCycle cyc;
    cyc.aligned = structured_cost(j, par, channel);

    detail::sca_faraday_step(j, par, channel);
    cyc.after_faraday = structured_cost(j, par, channel);

    if (!opts.fix_gains) detail::sca_gain_step(j, par, channel);
    cyc.after_gain = structured_cost(j, par, channel);

    SourceAntennaGrid<double> phases(j.sources(), j.antennas());
    for (std::size_t i = 0; i < j.sources(); ++i)
      for (std::size_t p = 0; p < j.antennas(); ++p)
        phases(i, p) = estimate_phase(j(i, p), par.gains[p], channel.direction(i, p), par.faraday[i]);
    cyc.after_phase = free_phase_cost(j, par, channel, phases);

    const std::vector<IonoShift> old_shift = par.shift;
    std::vector<IonoShift> fitted(j.sources());
    for (std::size_t i = 0; i < j.sources(); ++i) {
      std::vector<double> phi(j.antennas());
      for (std::size_t p = 0; p < j.antennas(); ++p) phi[p] = phases(i, p);
      fitted[i] = estimate_alpha(phi, channel.positions);
    }
    par.shift = fitted;
    double c4 = structured_cost(j, par, channel);
    double t = 1.0;
    while (c4 > cyc.after_gain && t > 1e-6) {
      t *= 0.5;
      ++res.diagnostics.alpha_backtracks;
      for (std::size_t i = 0; i < j.sources(); ++i) {
        par.shift[i].eta = old_shift[i].eta + t * (fitted[i].eta - old_shift[i].eta);
        par.shift[i].zeta = old_shift[i].zeta + t * (fitted[i].zeta - old_shift[i].zeta);
      }
      c4 = structured_cost(j, par, channel);
    }
    if (c4 > cyc.after_gain) {
      par.shift = old_shift;
      c4 = cyc.after_gain;
    }
    cyc.after_alpha = c4;
    res.diagnostics.cycles.push_back(cyc);
    res.diagnostics.iterations = it + 1;
    if (c4 <= floor || (it > 0 && std::abs(prev - c4) <= opts.rel_tol * std::max(c4, prev))) {
      res.diagnostics.converged = true;
      break;
    }
    prev = c4;
  }
  return res;
}

}  // namespace robcal
