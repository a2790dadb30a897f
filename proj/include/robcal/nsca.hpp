#pragma once

// Relaxed maximum-likelihood calibration of unstructured Jones matrices under
// compound-Gaussian noise. Each outer iteration:
//   1. theta:  minimize sum_pq (1/tau_pq) a_pq^H Omega^-1 a_pq  (antenna BCD)
//   2. Omega:  (4/B) sum_pq a a^H / (a^H Omega_prev^-1 a), then trace-normalize
//   3. tau:    tau_pq = a^H Omega^-1 a / 4
// The gaussian mode freezes Omega = I/4, tau = 1 and runs step 1 only.

#include <robcal/jones.hpp>
#include <robcal/simulator.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

namespace robcal {

enum class NoiseMode { robust, gaussian };

struct NoiseEstimate {
  Mat4 omega = Mat4::Identity() / 4.0;
  std::vector<double> tau;

  static NoiseEstimate initial(std::size_t baselines) { return {Mat4::Identity() / 4.0, std::vector<double>(baselines, 1.0)}; }
};

inline constexpr double kDefaultTauFloor = 1e-10;

/// a_pq = v_pq - v~_pq(J).
inline std::vector<Vec4> compute_residuals(const VisibilitySet& vis, const JonesGrid& jones,
                                           std::span<const Mat2> coherencies) {
  if (jones.antennas() != vis.antennas) throw DimensionError("compute_residuals: antenna count mismatch");
  const VisibilitySet model = synthesize(coherencies, jones);
  std::vector<Vec4> a(vis.size());
  for (std::size_t b = 0; b < vis.size(); ++b) a[b] = vis.v[b] - model.v[b];
  return a;
}

inline double residual_norm_ratio(const VisibilitySet& vis, std::span<const Vec4> residuals) {
  double r = 0.0;
  for (const auto& a : residuals) r += a.squaredNorm();
  return std::sqrt(r / vis.squared_norm());
}

/// sum_pq (1/tau_pq) a^H Omega^-1 a.
inline double weighted_cost(std::span<const Vec4> residuals, const NoiseEstimate& noise) {
  const Mat4 w = inverse_hpd(noise.omega);
  double c = 0.0;
  for (std::size_t b = 0; b < residuals.size(); ++b) c += quadratic_form(residuals[b], w) / noise.tau[b];
  return c;
}

inline double log_det_hpd(const Mat4& a) {
  const Mat4 l = cholesky_hpd(a);
  double s = 0.0;
  for (int k = 0; k < 4; ++k) s += 2.0 * std::log(l(k, k).real());
  return s;
}

/// Relaxed negative log-likelihood (constants dropped):
/// sum_pq [4 log tau_pq + log det Omega + a^H Omega^-1 a / tau_pq].
inline double relaxed_nll(std::span<const Vec4> residuals, const NoiseEstimate& noise) {
  const double ld = log_det_hpd(noise.omega);
  double c = weighted_cost(residuals, noise);
  for (double t : noise.tau) c += 4.0 * std::log(t) + ld;
  return c;
}

// ---------------------------------------------------------------------------
// Step 1

struct ThetaUpdate {
  JonesGrid jones;
  bool well_posed = true;  // false if any antenna normal matrix was singular
};

namespace detail {

/// Minimizes the weighted cost over {J_{i,p}}_i for one antenna with all other
/// antennas fixed. The model is linear in vec(J_{i,p}): for baseline (p, q),
/// vec(J_p C J_q^H) = ((C J_q^H)^T kron I) vec(J_p); baselines (q, p) are used
/// through vec(V_qp^H) = P conj(v_qp) with metric P conj(W) P^T.
inline bool solve_antenna(const VisibilitySet& vis, std::span<const Mat2> coh, const Mat4& w, const Mat4& w_swap,
                          std::span<const double> tau, JonesGrid& jones, std::size_t p) {
  const std::size_t d = coh.size();
  const std::size_t m = vis.antennas;
  const auto n = static_cast<Eigen::Index>(4 * d);
  static const Mat4 perm = vec_transpose_permutation();
  Eigen::MatrixXcd normal = Eigen::MatrixXcd::Zero(n, n);
  Eigen::VectorXcd rhs = Eigen::VectorXcd::Zero(n);
  Eigen::MatrixXcd design(4, n);
  for (std::size_t q = 0; q < m; ++q) {
    if (q == p) continue;
    const bool forward = p < q;
    const std::size_t b = forward ? baseline_index(p, q, m) : baseline_index(q, p, m);
    for (std::size_t i = 0; i < d; ++i) {
      const Mat2 x = coh[i] * jones(i, q).adjoint();
      design.block(0, static_cast<Eigen::Index>(4 * i), 4, 4) = kron(x.transpose(), Mat2::Identity());
    }
    const Vec4 y = forward ? vis.v[b] : Vec4(perm * vis.v[b].conjugate());
    const Mat4& metric = forward ? w : w_swap;
    const Eigen::MatrixXcd mw = design.adjoint() * metric / tau[b];
    normal.noalias() += mw * design;
    rhs.noalias() += mw * y;
  }
  // Weighted cost of the baselines at p, evaluated exactly as in synthesize().
  auto local_cost = [&] {
    double c = 0.0;
    for (std::size_t q = 0; q < m; ++q) {
      if (q == p) continue;
      const std::size_t lo = std::min(p, q), hi = std::max(p, q);
      Mat2 acc = Mat2::Zero();
      for (std::size_t i = 0; i < d; ++i) acc.noalias() += jones(i, lo) * coh[i] * jones(i, hi).adjoint();
      const std::size_t b = baseline_index(lo, hi, m);
      c += quadratic_form(Vec4(vis.v[b] - vec(acc)), w) / tau[b];
    }
    return c;
  };
  normal = 0.5 * (normal + Eigen::MatrixXcd(normal.adjoint()));
  Eigen::LDLT<Eigen::MatrixXcd> ldlt(normal);
  Eigen::VectorXcd x;
  bool ok = ldlt.info() == Eigen::Success && ldlt.isPositive();
  if (ok) {
    x = ldlt.solve(rhs);
    ok = x.allFinite() && (normal * x - rhs).norm() <= 1e-8 * (rhs.norm() + normal.norm() * x.norm());
  }
  if (!ok) {
    x = normal.completeOrthogonalDecomposition().solve(rhs);
    if (!x.allFinite()) return false;
  }
  // With textures spread over many decades the normal equations lose
  // accuracy; never accept a block that raises the cost.
  const double before = local_cost();
  std::vector<Mat2> prev(d);
  for (std::size_t i = 0; i < d; ++i) {
    prev[i] = jones(i, p);
    jones(i, p) = unvec(Vec4(x.segment<4>(static_cast<Eigen::Index>(4 * i))));
  }
  if (!(local_cost() <= before))
    for (std::size_t i = 0; i < d; ++i) jones(i, p) = prev[i];
  return ok;
}

}  // namespace detail

/// Block coordinate descent over antennas; each block is an exact weighted
/// linear least-squares solve, so the weighted cost never increases.
inline ThetaUpdate update_theta(const VisibilitySet& vis, std::span<const Mat2> coherencies,
                                const NoiseEstimate& noise, const JonesGrid& jones_init, int sweeps = 3) {
  if (jones_init.antennas() != vis.antennas || jones_init.sources() != coherencies.size())
    throw DimensionError("update_theta: Jones set does not match data");
  if (noise.tau.size() != vis.size()) throw DimensionError("update_theta: tau count != baselines");
  const Mat4 w = inverse_hpd(noise.omega);
  const Mat4 perm = vec_transpose_permutation();
  const Mat4 w_swap = perm * w.conjugate() * perm.transpose();
  ThetaUpdate out{jones_init, true};
  for (int s = 0; s < sweeps; ++s)
    for (std::size_t p = 0; p < vis.antennas; ++p)
      out.well_posed &= detail::solve_antenna(vis, coherencies, w, w_swap, noise.tau, out.jones, p);
  return out;
}

// ---------------------------------------------------------------------------
// Steps 2 and 3

struct OmegaUpdate {
  Mat4 omega;
  /// max(a^H Omega_prev^-1 a / 4, floor) rescaled by the normalization
  /// constant and floored again; the texture set implied by this update.
  std::vector<double> implied_tau;
  bool regularized = false;
  bool degenerate = false;  // all residuals zero, previous Omega kept
};

inline OmegaUpdate update_omega(std::span<const Vec4> residuals, const Mat4& omega_prev,
                                double tau_floor = kDefaultTauFloor) {
  const Mat4 w = inverse_hpd(omega_prev);
  const std::size_t nb = residuals.size();
  OmegaUpdate out;
  out.implied_tau.resize(nb);
  Mat4 s = Mat4::Zero();
  for (std::size_t b = 0; b < nb; ++b) {
    const double t = std::max(quadratic_form(residuals[b], w) / 4.0, tau_floor);
    out.implied_tau[b] = t;
    s.noalias() += residuals[b] * residuals[b].adjoint() / t;
  }
  s /= static_cast<double>(nb);
  s = 0.5 * (s + Mat4(s.adjoint()));
  double tr = s.trace().real();
  if (!(tr > 0.0)) {
    out.omega = omega_prev;
    out.degenerate = true;
    return out;
  }
  try {
    cholesky_hpd(s / tr);
  } catch (const NumericalError&) {
    s += 1e-8 * tr * Mat4::Identity();
    out.regularized = true;
    tr = s.trace().real();
  }
  out.omega = s / tr;
  for (double& t : out.implied_tau) t = std::max(t * tr, tau_floor);
  return out;
}

inline std::vector<double> update_tau(std::span<const Vec4> residuals, const Mat4& omega,
                                      double tau_floor = kDefaultTauFloor) {
  const Mat4 w = inverse_hpd(omega);
  std::vector<double> tau(residuals.size());
  for (std::size_t b = 0; b < residuals.size(); ++b)
    tau[b] = std::max(quadratic_form(residuals[b], w) / 4.0, tau_floor);
  return tau;
}

// ---------------------------------------------------------------------------
// Driver

struct NscaOptions {
  int max_outer = 50;
  int sweeps = 3;
  double rel_tol = 1e-6;
  double tau_floor = kDefaultTauFloor;
  // Robust mode first iterates the gaussian variant (Omega = I/4, tau = 1)
  // to convergence and starts the robust updates from its Jones estimate.
  bool gaussian_warmup = true;
  // Stop once ||a|| / ||v|| falls to this level; the noise statistics of an
  // exact fit are round-off and the robust updates would chase them.
  double exact_fit = 1e-12;
  // Textures are kept at or above this fraction of their median.
  double tau_median_floor = 0.0;
  bool estimate_omega = true;
  // Outer iterations of the robust stage after the warm-up (0 = max_outer).
  int robust_max_outer = 0;
};

/// Objective values after each sub-step of one outer iteration. Robust mode
/// tracks the relaxed NLL; gaussian mode tracks the unweighted cost.
struct NscaIterate {
  double after_theta = 0.0;
  double after_omega = 0.0;
  double after_tau = 0.0;
};

struct NscaDiagnostics {
  std::vector<NscaIterate> iterates;
  int iterations = 0;
  bool converged = false;
  int warmup_iterations = 0;
  bool exact_fit = false;
  bool ill_posed_block = false;
  bool omega_regularized = false;
  int omega_backtracks = 0;
  std::size_t floored_tau = 0;
};

struct NscaResult {
  JonesGrid jones;
  NoiseEstimate noise;
  NscaDiagnostics diagnostics;
};

/// Start point: the known direction factors with all unknown factors set to
/// identity, scaled by the least-squares global amplitude.
inline JonesGrid initial_jones(const VisibilitySet& vis, std::span<const Mat2> coherencies, const JonesGrid& direction) {
  JonesGrid j = direction;
  const VisibilitySet model = synthesize(coherencies, j);
  const double m2 = model.squared_norm();
  if (!(m2 > 0.0)) return j;
  cplx inner = 0.0;
  for (std::size_t b = 0; b < vis.size(); ++b) inner += model.v[b].dot(vis.v[b]);
  const double scale = std::sqrt(std::abs(inner) / m2);
  if (scale > 0.0)
    for (auto& x : j.data()) x *= scale;
  return j;
}

inline NscaResult run_nsca(const VisibilitySet& vis, std::span<const Mat2> coherencies, const JonesGrid& jones_init,
                           NoiseMode mode, const NscaOptions& opts = {}) {
  const bool robust = mode == NoiseMode::robust;
  if (robust && opts.gaussian_warmup) {
    NscaOptions g = opts;
    g.gaussian_warmup = false;
    NscaResult w = run_nsca(vis, coherencies, jones_init, NoiseMode::gaussian, g);
    NscaOptions rest = opts;
    rest.gaussian_warmup = false;
    if (opts.robust_max_outer > 0) rest.max_outer = opts.robust_max_outer;
    NscaResult r = run_nsca(vis, coherencies, w.jones, NoiseMode::robust, rest);
    r.diagnostics.warmup_iterations = w.diagnostics.iterations;
    r.diagnostics.ill_posed_block |= w.diagnostics.ill_posed_block;
    return r;
  }
  NscaResult r{jones_init, NoiseEstimate::initial(vis.size()), {}};
  double prev = std::numeric_limits<double>::infinity();
  for (int it = 0; it < opts.max_outer; ++it) {
    ThetaUpdate th = update_theta(vis, coherencies, r.noise, r.jones, opts.sweeps);
    r.jones = std::move(th.jones);
    r.diagnostics.ill_posed_block |= !th.well_posed;
    const auto a = compute_residuals(vis, r.jones, coherencies);
    if (residual_norm_ratio(vis, a) <= opts.exact_fit) {
      r.diagnostics.iterations = it + 1;
      r.diagnostics.converged = true;
      r.diagnostics.exact_fit = true;
      break;
    }
    NscaIterate rec;
    double metric = 0.0;
    if (robust) {
      rec.after_theta = relaxed_nll(a, r.noise);
      if (opts.estimate_omega) {
        OmegaUpdate om = update_omega(a, r.noise.omega, opts.tau_floor);
        r.diagnostics.omega_regularized |= om.regularized;
        rec.after_omega = relaxed_nll(a, NoiseEstimate{om.omega, om.implied_tau});
        if (rec.after_omega <= rec.after_theta) {
          r.noise.omega = om.omega;
        } else {
          // Only reachable when the tau floor binds: the rescaled textures
          // then sit above their unconstrained values. Fall back to a partial
          // step, or to the previous Omega with optimal textures.
          ++r.diagnostics.omega_backtracks;
          const Mat4 prev = r.noise.omega;
          rec.after_omega = relaxed_nll(a, NoiseEstimate{prev, update_tau(a, prev, opts.tau_floor)});
          for (double lam = 0.5; lam > 1e-3; lam *= 0.5) {
            const Mat4 cand = (1.0 - lam) * prev + lam * om.omega;
            const double c = relaxed_nll(a, NoiseEstimate{cand, update_tau(a, cand, opts.tau_floor)});
            if (c <= rec.after_omega) {
              r.noise.omega = cand;
              rec.after_omega = c;
              break;
            }
          }
        }
      } else {
        rec.after_omega = relaxed_nll(a, NoiseEstimate{r.noise.omega, update_tau(a, r.noise.omega, opts.tau_floor)});
      }
      r.noise.tau = update_tau(a, r.noise.omega, opts.tau_floor);
      if (opts.tau_median_floor > 0.0) {
        std::vector<double> sorted = r.noise.tau;
        const auto mid = sorted.begin() + static_cast<std::ptrdiff_t>(sorted.size() / 2);
        std::nth_element(sorted.begin(), mid, sorted.end());
        const double lo = opts.tau_median_floor * *mid;
        for (double& t : r.noise.tau) t = std::max(t, lo);
      }
      rec.after_tau = relaxed_nll(a, r.noise);
      metric = rec.after_tau;
    } else {
      rec.after_theta = rec.after_omega = rec.after_tau = weighted_cost(a, r.noise);
      metric = rec.after_tau;
    }
    r.diagnostics.iterates.push_back(rec);
    r.diagnostics.iterations = it + 1;
    if (metric == 0.0 || (it > 0 && std::abs(prev - metric) <= opts.rel_tol * std::max(std::abs(metric), std::abs(prev)))) {
      r.diagnostics.converged = true;
      break;
    }
    prev = metric;
  }
  r.diagnostics.floored_tau = static_cast<std::size_t>(
      std::count_if(r.noise.tau.begin(), r.noise.tau.end(), [&](double t) { return t <= opts.tau_floor; }));
  return r;
}

}  // namespace robcal
