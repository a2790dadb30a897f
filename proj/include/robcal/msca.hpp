#pragma once

// Multi-frequency structured calibration as consensus ADMM. Each frequency is
// an agent holding eps_i^[f] = (faraday, eta, zeta) per source; the fusion
// step ties them to z_i through eps_i^[f] = f^-2 z_i. Gains are shared by all
// frequencies and refreshed between consensus runs.
//
// Frequencies are used as given in B = f^-2 I; pass them normalized to a
// reference frequency so z is the parameter value at that reference.

#include <robcal/jones.hpp>
#include <robcal/sca.hpp>
#include <robcal/simulator.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

namespace robcal {

/// Data seen by one agent for one source: Jhat_{i,p}, H_{i,p}, g_p and r_p for all p.
struct LocalData {
  std::span<const Mat2> jhat;
  std::span<const Mat2> direction;
  std::span<const Vec2> gains;
  std::span<const AntennaPosition> positions;
};

inline LocalData local_view(const JonesGrid& jhat, const Channel& channel, std::span<const Vec2> gains,
                            std::size_t source) {
  const std::size_t m = jhat.antennas();
  if (channel.direction.antennas() != m || gains.size() != m || channel.positions.size() != m)
    throw DimensionError("local_view: antenna count mismatch");
  return {std::span<const Mat2>(jhat.data().data() + source * m, m),
          std::span<const Mat2>(channel.direction.data().data() + source * m, m), gains,
          std::span<const AntennaPosition>(channel.positions)};
}

inline IonoShift shift_of(const Real3& eps) { return {eps(1), eps(2)}; }

inline double frequency_model(double f) {
  if (!(f > 0.0)) throw DimensionError("frequency must be positive");
  return 1.0 / (f * f);
}

// ---------------------------------------------------------------------------
// Local objective

/// l_i^[f] = sum_p ||Jhat_{i,p} - G_p H_{i,p} Z_{i,p} F_i||_F^2.
inline double local_cost(const Real3& eps, const LocalData& d) {
  const Mat2 f = faraday_matrix(eps(0));
  const IonoShift a = shift_of(eps);
  double c = 0.0;
  for (std::size_t p = 0; p < d.jhat.size(); ++p) {
    const Mat2 k = gain_matrix(d.gains[p]) * d.direction[p] * ionospheric_matrix(a, d.positions[p]) * f;
    c += (d.jhat[p] - k).squaredNorm();
  }
  return c;
}

// The penalty may differ per component (faraday, eta, zeta); scalar
// overloads use one value for all three.

/// h = y^T (eps - B z) + 1/2 (eps - B z)^T diag(rho) (eps - B z).
inline double augmented_terms(const Real3& eps, const Real3& z, const Real3& y, const Real3& rho, double f) {
  const Real3 r = eps - frequency_model(f) * z;
  return y.dot(r) + 0.5 * rho.dot(r.cwiseProduct(r));
}

inline double augmented_terms(const Real3& eps, const Real3& z, const Real3& y, double rho, double f) {
  return augmented_terms(eps, z, y, Real3::Constant(rho), f);
}

/// Gradient of l + h with respect to (faraday, eta, zeta).
inline Real3 grad_local(const Real3& eps, const Real3& z, const Real3& y, const Real3& rho, double f,
                        const LocalData& d) {
  Real3 g = y + rho.cwiseProduct(eps - frequency_model(f) * z);
  const Mat2 fr = faraday_matrix(eps(0));
  const Mat2 dfr = faraday_derivative(eps(0));
  const IonoShift a = shift_of(eps);
  for (std::size_t p = 0; p < d.jhat.size(); ++p) {
    const Mat2 gh = gain_matrix(d.gains[p]) * d.direction[p];
    const cplx zp = std::polar(1.0, ionospheric_phase(a, d.positions[p]));
    const Mat2 s = -(gh * zp * dfr * d.jhat[p].adjoint());
    const Mat2 mm = d.jhat[p] * fr.transpose() * gh.adjoint();
    const cplx t = std::conj(zp) * mm.trace();
    g(0) += 2.0 * s.trace().real();
    g(1) += 2.0 * (kJ * d.positions[p].u * t).real();
    g(2) += 2.0 * (kJ * d.positions[p].v * t).real();
  }
  return g;
}

inline Real3 grad_local(const Real3& eps, const Real3& z, const Real3& y, double rho, double f, const LocalData& d) {
  return grad_local(eps, z, y, Real3::Constant(rho), f, d);
}

/// Hessian of l + h. With `gauss_newton` the residual curvature is dropped,
/// which keeps the matrix positive definite.
inline Eigen::Matrix3d local_hessian(const Real3& eps, const Real3& rho, const LocalData& d,
                                     bool gauss_newton = false) {
  Eigen::Matrix3d h = rho.asDiagonal();
  const Mat2 fr = faraday_matrix(eps(0));
  const Mat2 dfr = faraday_derivative(eps(0));
  const IonoShift a = shift_of(eps);
  for (std::size_t p = 0; p < d.jhat.size(); ++p) {
    const double u = d.positions[p].u;
    const double v = d.positions[p].v;
    const Mat2 ghz = gain_matrix(d.gains[p]) * d.direction[p] * ionospheric_matrix(a, d.positions[p]);
    const Mat2 k = ghz * fr;
    const Mat2 kd = ghz * dfr;
    const Mat2 dk[3] = {kd, kJ * u * k, kJ * v * k};
    const Mat2 res = d.jhat[p] - k;
    // Second derivatives of K, row-major upper triangle.
    const Mat2 d2[3][3] = {{-k, kJ * u * kd, kJ * v * kd}, {Mat2(), -u * u * k, -u * v * k}, {Mat2(), Mat2(), -v * v * k}};
    for (int r = 0; r < 3; ++r)
      for (int c = r; c < 3; ++c) {
        double val = 2.0 * (dk[r].adjoint() * dk[c]).trace().real();
        if (!gauss_newton) val -= 2.0 * (res.adjoint() * d2[r][c]).trace().real();
        h(r, c) += val;
        if (c != r) h(c, r) += val;
      }
  }
  return h;
}

inline Eigen::Matrix3d local_hessian(const Real3& eps, double rho, const LocalData& d, bool gauss_newton = false) {
  return local_hessian(eps, Real3::Constant(rho), d, gauss_newton);
}

struct InnerOptions {
  int max_steps = 200;
  double grad_tol = 1e-8;
  double step_tol = 1e-10;  // relative size of the search direction
  double armijo = 1e-4;
  double shrink = 0.5;
};

struct LocalUpdate {
  Real3 eps;
  int steps = 0;
  bool converged = false;
  bool line_search_failed = false;
};

/// Minimizes l + h over eps by descent with Armijo backtracking. The gradient
/// is scaled by the inverse Hessian, or by the Gauss-Newton matrix where the
/// Hessian is not positive definite.
inline LocalUpdate local_epsilon_update(const Real3& eps0, const Real3& z, const Real3& y, const Real3& rho,
                                        double f, const LocalData& d, const InnerOptions& opts = {}) {
  LocalUpdate out{eps0};
  auto objective = [&](const Real3& e) { return local_cost(e, d) + augmented_terms(e, z, y, rho, f); };
  double val = objective(out.eps);
  for (; out.steps < opts.max_steps; ++out.steps) {
    const Real3 g = grad_local(out.eps, z, y, rho, f, d);
    if (g.norm() < opts.grad_tol) {
      out.converged = true;
      return out;
    }
    Eigen::LLT<Eigen::Matrix3d> llt(local_hessian(out.eps, rho, d));
    if (llt.info() != Eigen::Success) llt.compute(local_hessian(out.eps, rho, d, true));
    Real3 dir = llt.info() == Eigen::Success ? Real3(-llt.solve(g)) : Real3(-g);
    if (dir.norm() <= opts.step_tol * (1.0 + out.eps.norm())) {
      out.converged = true;
      return out;
    }
    double slope = g.dot(dir);
    if (!(slope < 0.0)) {
      dir = -g;
      slope = -g.squaredNorm();
    }
    double t = 1.0;
    bool accepted = false;
    for (int k = 0; k < 60; ++k, t *= opts.shrink) {
      const Real3 cand = out.eps + t * dir;
      const double cv = objective(cand);
      if (cv <= val + opts.armijo * t * slope) {
        out.eps = cand;
        val = cv;
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      out.line_search_failed = true;
      return out;
    }
  }
  out.converged = grad_local(out.eps, z, y, rho, f, d).norm() < opts.grad_tol;
  return out;
}

inline LocalUpdate local_epsilon_update(const Real3& eps0, const Real3& z, const Real3& y, double rho, double f,
                                        const LocalData& d, const InnerOptions& opts = {}) {
  return local_epsilon_update(eps0, z, y, Real3::Constant(rho), f, d, opts);
}

// ---------------------------------------------------------------------------
// Fusion and duals

/// What an agent sends to the fusion centre: B^T (y_i + rho eps_i) per source
/// and the scalar B^T B of its (diagonal) frequency model.
struct AgentMessage {
  std::vector<Real3> weighted;
  double weight = 0.0;
};

inline AgentMessage make_message(std::span<const Real3> eps, std::span<const Real3> y, const Real3& rho, double f) {
  if (eps.size() != y.size()) throw DimensionError("make_message: eps/y size mismatch");
  const double b = frequency_model(f);
  AgentMessage m{std::vector<Real3>(eps.size()), b * b};
  for (std::size_t i = 0; i < eps.size(); ++i) m.weighted[i] = b * (y[i] + rho.cwiseProduct(eps[i]));
  return m;
}

inline AgentMessage make_message(std::span<const Real3> eps, std::span<const Real3> y, double rho, double f) {
  return make_message(eps, y, Real3::Constant(rho), f);
}

/// z_i = (sum_f rho B^T B)^-1 sum_f B^T (y_i + rho eps_i), reduced in message order.
inline std::vector<Real3> global_z_update(std::span<const AgentMessage> messages, const Real3& rho) {
  if (messages.empty()) throw DimensionError("global_z_update: no agents");
  if (!(rho.minCoeff() > 0.0)) throw DimensionError("global_z_update: rho must be positive");
  const std::size_t d = messages.front().weighted.size();
  std::vector<Real3> z(d, Real3::Zero());
  double w = 0.0;
  for (const auto& m : messages) {
    if (m.weighted.size() != d) throw DimensionError("global_z_update: inconsistent source count");
    for (std::size_t i = 0; i < d; ++i) z[i] += m.weighted[i];
    w += m.weight;
  }
  for (auto& zi : z) zi = zi.cwiseQuotient(rho * w);
  return z;
}

inline std::vector<Real3> global_z_update(std::span<const AgentMessage> messages, double rho) {
  return global_z_update(messages, Real3::Constant(rho));
}

inline Real3 dual_update(const Real3& y, const Real3& eps, const Real3& z, const Real3& rho, double f) {
  return y + rho.cwiseProduct(eps - frequency_model(f) * z);
}

inline Real3 dual_update(const Real3& y, const Real3& eps, const Real3& z, double rho, double f) {
  return dual_update(y, eps, z, Real3::Constant(rho), f);
}

// ---------------------------------------------------------------------------
// Gains

/// Closed-form g_p minimizing sum_f sum_i ||Jhat - G_p H Z F||_F^2.
inline std::vector<Vec2> gain_update(std::span<const JonesGrid> jhat, std::span<const Channel> channels,
                                     std::span<const std::vector<Real3>> eps) {
  if (jhat.empty() || jhat.size() != channels.size() || jhat.size() != eps.size())
    throw DimensionError("gain_update: per-frequency inputs disagree");
  const std::size_t d = jhat.front().sources();
  const std::size_t m = jhat.front().antennas();
  std::vector<Vec2> g(m);
  for (std::size_t p = 0; p < m; ++p) {
    GainAccumulator acc;
    for (std::size_t f = 0; f < jhat.size(); ++f) {
      if (jhat[f].sources() != d || jhat[f].antennas() != m || eps[f].size() != d)
        throw DimensionError("gain_update: shape mismatch at frequency " + std::to_string(f));
      for (std::size_t i = 0; i < d; ++i) {
        const Mat2 r = channels[f].direction(i, p) * ionospheric_matrix(shift_of(eps[f][i]), channels[f].positions[p]) *
                       faraday_matrix(eps[f][i](0));
        acc.add(jhat[f](i, p), r);
      }
    }
    g[p] = acc.solve();
  }
  return g;
}

// ---------------------------------------------------------------------------
// Driver

struct MscaChannel {
  double frequency = 1.0;
  Channel channel;
  JonesGrid jhat;
  std::vector<Mat2> coherencies;
};

struct MscaOptions {
  double rho = 1.0;
  // Residual balancing, done separately for faraday, eta and zeta.
  bool rho_adapt = false;
  // Multiply rho per component by the mean local curvature at the start, so
  // that the penalty is commensurate with each parameter's units.
  bool rho_scaling = true;
  int max_middle = 500;
  double primal_tol = 1e-6;
  double dual_tol = 1e-6;
  int max_outer = 20;
  double gain_tol = 1e-8;
  bool align_gauge = true;
  // Anderson mixing depth for the outer gain iteration (0 = plain
  // alternation). Gains and shifts trade off along a shallow valley that plain
  // alternation walks very slowly.
  int acceleration_memory = 5;
  InnerOptions inner;
};

struct MscaTraceRow {
  int iter = 0;
  double primal = 0.0;
  double dual = 0.0;
  double total_cost = 0.0;
  Real3 rho = Real3::Zero();
};

struct MscaDiagnostics {
  std::vector<MscaTraceRow> trace;
  int outer_cycles = 0;
  int middle_iterations = 0;
  bool consensus_reached = false;
  bool converged = false;
  int line_search_failures = 0;
  int accelerated_cycles = 0;
  long inner_steps = 0;
  int primal_increases = 0;  // after iteration 5 of a middle loop
  double primal = std::numeric_limits<double>::infinity();
  double dual = std::numeric_limits<double>::infinity();
};

struct MscaResult {
  std::vector<std::vector<Real3>> eps;  // [frequency][source]
  std::vector<Real3> z;
  std::vector<std::vector<Real3>> y;
  std::vector<Vec2> gains;
  std::vector<JonesGrid> aligned;
  MscaDiagnostics diagnostics;

  StructuredJonesParams params(std::size_t f) const {
    StructuredJonesParams p;
    for (const auto& e : eps[f]) {
      p.faraday.push_back(e(0));
      p.shift.push_back(shift_of(e));
    }
    p.gains = gains;
    return p;
  }
};

inline std::vector<Real3> epsilon_of(const StructuredJonesParams& p) {
  std::vector<Real3> e(p.sources());
  for (std::size_t i = 0; i < p.sources(); ++i) e[i] = Real3(p.faraday[i], p.shift[i].eta, p.shift[i].zeta);
  return e;
}

/// eps_init per frequency (typically per-frequency SCA) and shared initial gains.
struct MscaInit {
  std::vector<std::vector<Real3>> eps;
  std::vector<Vec2> gains;
};

namespace detail {

inline Eigen::VectorXd flatten_gains(std::span<const Vec2> g) {
  Eigen::VectorXd x(4 * static_cast<Eigen::Index>(g.size()));
  for (std::size_t p = 0; p < g.size(); ++p)
    for (int k = 0; k < 2; ++k) {
      x(static_cast<Eigen::Index>(4 * p + 2 * k)) = g[p](k).real();
      x(static_cast<Eigen::Index>(4 * p + 2 * k + 1)) = g[p](k).imag();
    }
  return x;
}

inline std::vector<Vec2> unflatten_gains(const Eigen::VectorXd& x) {
  std::vector<Vec2> g(static_cast<std::size_t>(x.size() / 4));
  for (std::size_t p = 0; p < g.size(); ++p)
    for (int k = 0; k < 2; ++k)
      g[p](k) = cplx(x(static_cast<Eigen::Index>(4 * p + 2 * k)), x(static_cast<Eigen::Index>(4 * p + 2 * k + 1)));
  return g;
}

/// Type-II Anderson mixing for x <- T(x), restarted when the residual grows.
class AndersonMixer {
 public:
  explicit AndersonMixer(int memory) : memory_(memory) {}

  /// Given x and T(x), returns the next iterate and whether mixing was used.
  std::pair<Eigen::VectorXd, bool> next(const Eigen::VectorXd& x, const Eigen::VectorXd& tx) {
    const Eigen::VectorXd r = tx - x;
    if (memory_ <= 0) return {tx, false};
    if (!xs_.empty() && r.norm() > rs_.back().norm()) {
      xs_.clear();
      rs_.clear();
    }
    xs_.push_back(x);
    rs_.push_back(r);
    if (static_cast<int>(xs_.size()) > memory_ + 1) {
      xs_.erase(xs_.begin());
      rs_.erase(rs_.begin());
    }
    const auto k = static_cast<Eigen::Index>(xs_.size()) - 1;
    if (k == 0) return {tx, false};
    Eigen::MatrixXd dx(x.size(), k), dr(x.size(), k);
    for (Eigen::Index j = 0; j < k; ++j) {
      dx.col(j) = xs_[static_cast<std::size_t>(j + 1)] - xs_[static_cast<std::size_t>(j)];
      dr.col(j) = rs_[static_cast<std::size_t>(j + 1)] - rs_[static_cast<std::size_t>(j)];
    }
    const Eigen::VectorXd gamma = dr.colPivHouseholderQr().solve(r);
    const Eigen::VectorXd out = tx - (dx + dr) * gamma;
    if (!out.allFinite()) return {tx, false};
    return {out, true};
  }

 private:
  int memory_;
  std::vector<Eigen::VectorXd> xs_, rs_;
};

}  // namespace detail

/// sum_f sum_i l_i^[f](B^[f] z_i): the objective restricted to consensus.
inline double consensus_cost(std::span<const JonesGrid> jhat, std::span<const Channel> channels,
                             std::span<const double> frequencies, std::span<const Real3> z, std::span<const Vec2> gains) {
  double c = 0.0;
  for (std::size_t f = 0; f < jhat.size(); ++f) {
    const double b = frequency_model(frequencies[f]);
    for (std::size_t i = 0; i < z.size(); ++i) c += local_cost(b * z[i], local_view(jhat[f], channels[f], gains, i));
  }
  return c;
}

/// Builds a consistent starting point from per-frequency structured fits that
/// share the gains of the first frequency. With shared gains, a common shift
/// error w of the first fit shows up as alpha^[f] = z/f^2 + w/f at every
/// frequency; (z, w) are fitted by least squares per coordinate, w is moved
/// back into the gains and eps starts on the consensus set. Faraday angles are
/// unwrapped by multiples of pi towards the first frequency.
inline MscaInit consensus_init(std::span<const StructuredJonesParams> fits, std::span<const double> frequencies,
                               std::span<const Channel> channels) {
  const std::size_t nf = fits.size();
  if (nf == 0 || frequencies.size() != nf || channels.size() != nf)
    throw DimensionError("consensus_init: per-frequency inputs disagree");
  const std::size_t d = fits.front().sources();
  const std::size_t m = fits.front().antennas();
  MscaInit init;
  init.gains = fits.front().gains;
  if (nf == 1) {
    init.eps.push_back(epsilon_of(fits.front()));
    return init;
  }
  const double f0 = frequencies.front();
  std::vector<double> b(nf);
  for (std::size_t f = 0; f < nf; ++f) b[f] = frequency_model(frequencies[f]);

  std::vector<Real3> z(d);
  for (std::size_t i = 0; i < d; ++i) {
    const double ref = fits.front().faraday[i];
    double num = 0.0, den = 0.0;
    for (std::size_t f = 0; f < nf; ++f) {
      const double expect = ref * b[f] / b[0];
      double a = fits[f].faraday[i];
      a += kPi * std::round((expect - a) / kPi);
      num += b[f] * a;
      den += b[f] * b[f];
    }
    z[i](0) = num / den;
  }
  const auto rows = static_cast<Eigen::Index>(nf * d);
  const auto cols = static_cast<Eigen::Index>(d + 1);
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(rows, cols);
  Eigen::MatrixXd rhs(rows, 2);
  for (std::size_t f = 0; f < nf; ++f)
    for (std::size_t i = 0; i < d; ++i) {
      const auto r = static_cast<Eigen::Index>(f * d + i);
      a(r, static_cast<Eigen::Index>(i)) = b[f];
      a(r, cols - 1) = f0 / frequencies[f];
      rhs(r, 0) = fits[f].shift[i].eta;
      rhs(r, 1) = fits[f].shift[i].zeta;
    }
  const Eigen::MatrixXd sol = a.colPivHouseholderQr().solve(rhs);
  for (std::size_t i = 0; i < d; ++i) {
    z[i](1) = sol(static_cast<Eigen::Index>(i), 0);
    z[i](2) = sol(static_cast<Eigen::Index>(i), 1);
  }
  const IonoShift w{sol(cols - 1, 0), sol(cols - 1, 1)};
  for (std::size_t p = 0; p < m; ++p) init.gains[p] *= std::polar(1.0, ionospheric_phase(w, channels.front().positions[p]));
  for (std::size_t f = 0; f < nf; ++f) {
    std::vector<Real3> e(d);
    for (std::size_t i = 0; i < d; ++i) e[i] = b[f] * z[i];
    init.eps.push_back(std::move(e));
  }
  return init;
}

inline MscaResult run_msca(std::span<const MscaChannel> agents, const MscaInit& init, const MscaOptions& opts = {}) {
  const std::size_t nf = agents.size();
  if (nf == 0) throw DimensionError("run_msca: no frequencies");
  if (init.eps.size() != nf) throw DimensionError("run_msca: eps_init frequency count");
  if (!(opts.rho > 0.0)) throw DimensionError("run_msca: rho must be positive");
  const std::size_t d = agents.front().jhat.sources();
  const std::size_t m = agents.front().jhat.antennas();
  for (std::size_t f = 0; f < nf; ++f) {
    if (agents[f].jhat.sources() != d || agents[f].jhat.antennas() != m || init.eps[f].size() != d)
      throw DimensionError("run_msca: shape mismatch at frequency " + std::to_string(f));
    frequency_model(agents[f].frequency);
  }
  if (init.gains.size() != m) throw DimensionError("run_msca: gain count");

  MscaResult res;
  res.eps = init.eps;
  res.gains = init.gains;
  res.y.assign(nf, std::vector<Real3>(d, Real3::Zero()));
  res.z.assign(d, Real3::Zero());
  for (std::size_t f = 0; f < nf; ++f) {
    const double s = agents[f].frequency * agents[f].frequency;
    for (std::size_t i = 0; i < d; ++i) res.z[i] += s * res.eps[f][i] / static_cast<double>(nf);
  }
  for (const auto& a : agents) res.aligned.push_back(a.jhat);
  std::vector<Channel> channels;
  std::vector<double> freqs;
  for (const auto& a : agents) {
    channels.push_back(a.channel);
    freqs.push_back(a.frequency);
  }

  auto& diag = res.diagnostics;
  Real3 rho = Real3::Constant(opts.rho);
  if (opts.rho_scaling) {
    Real3 curv = Real3::Zero();
    for (std::size_t f = 0; f < nf; ++f)
      for (std::size_t i = 0; i < d; ++i) {
        const LocalData ld = local_view(agents[f].jhat, channels[f], res.gains, i);
        curv += local_hessian(res.eps[f][i], 0.0, ld, true).diagonal();
      }
    curv /= static_cast<double>(nf * d);
    for (int k = 0; k < 3; ++k)
      if (curv(k) > 0.0 && std::isfinite(curv(k))) rho(k) *= curv(k);
  }
  int iter = 0;
  detail::AndersonMixer mixer(opts.acceleration_memory);
  for (int outer = 0; outer < opts.max_outer; ++outer) {
    if (opts.align_gauge) {
      for (std::size_t f = 0; f < nf; ++f) {
        const JonesGrid model = structured_jones(res.params(f), channels[f]);
        GaugeFit g = fit_gauge(res.aligned[f], model, agents[f].coherencies, true);
        res.aligned[f] = std::move(g.aligned);
        for (std::size_t i = 0; i < d; ++i) res.eps[f][i](0) += g.rotation[i];
      }
    }

    double prev_primal = std::numeric_limits<double>::infinity();
    diag.consensus_reached = false;
    for (int t = 0; t < opts.max_middle; ++t) {
      // Local updates; agents are independent between the two barriers.
      std::vector<AgentMessage> inbox(nf);
      for (std::size_t f = 0; f < nf; ++f) {
        for (std::size_t i = 0; i < d; ++i) {
          const LocalData ld = local_view(res.aligned[f], channels[f], res.gains, i);
          LocalUpdate u =
              local_epsilon_update(res.eps[f][i], res.z[i], res.y[f][i], rho, agents[f].frequency, ld, opts.inner);
          diag.line_search_failures += u.line_search_failed ? 1 : 0;
          diag.inner_steps += u.steps;
          res.eps[f][i] = u.eps;
        }
        inbox[f] = make_message(res.eps[f], res.y[f], rho, agents[f].frequency);
      }
      const std::vector<Real3> z_old = res.z;
      res.z = global_z_update(inbox, rho);

      double primal = 0.0, dual = 0.0, total = 0.0;
      Real3 primal_k = Real3::Zero(), dual_k = Real3::Zero();
      for (std::size_t f = 0; f < nf; ++f) {
        const double b = frequency_model(agents[f].frequency);
        for (std::size_t i = 0; i < d; ++i) {
          res.y[f][i] = dual_update(res.y[f][i], res.eps[f][i], res.z[i], rho, agents[f].frequency);
          const Real3 r = res.eps[f][i] - b * res.z[i];
          const Real3 s = b * rho.cwiseProduct(res.z[i] - z_old[i]);
          primal = std::max(primal, r.norm());
          dual = std::max(dual, s.norm());
          primal_k = primal_k.cwiseMax(r.cwiseAbs());
          dual_k = dual_k.cwiseMax(s.cwiseAbs());
          const LocalData ld = local_view(res.aligned[f], channels[f], res.gains, i);
          total += local_cost(res.eps[f][i], ld) +
                   augmented_terms(res.eps[f][i], res.z[i], res.y[f][i], rho, agents[f].frequency);
        }
      }
      diag.trace.push_back({++iter, primal, dual, total, rho});
      ++diag.middle_iterations;
      if (t >= 5 && primal > prev_primal) ++diag.primal_increases;
      prev_primal = primal;
      diag.primal = primal;
      diag.dual = dual;
      if (primal < opts.primal_tol && dual < opts.dual_tol) {
        diag.consensus_reached = true;
        break;
      }
      if (opts.rho_adapt) {
        for (int k = 0; k < 3; ++k) {
          if (primal_k(k) > 10.0 * dual_k(k)) rho(k) *= 2.0;
          else if (dual_k(k) > 10.0 * primal_k(k)) rho(k) /= 2.0;
        }
      }
    }

    const std::vector<Vec2> old = res.gains;
    res.gains = gain_update(res.aligned, channels, res.eps);
    ++diag.outer_cycles;
    double change = 0.0, scale = 0.0;
    for (std::size_t p = 0; p < m; ++p) {
      change = std::max(change, (res.gains[p] - old[p]).cwiseAbs().maxCoeff());
      scale = std::max(scale, old[p].cwiseAbs().maxCoeff());
    }
    if (change <= opts.gain_tol * std::max(scale, 1.0)) {
      diag.converged = diag.consensus_reached;
      break;
    }
    // The returned gains always come from a plain update so that they match eps.
    if (outer + 1 < opts.max_outer) {
      auto [next, mixed] = mixer.next(detail::flatten_gains(old), detail::flatten_gains(res.gains));
      if (mixed) {
        ++diag.accelerated_cycles;
        res.gains = detail::unflatten_gains(next);
      }
    }
  }
  return res;
}

}  // namespace robcal
