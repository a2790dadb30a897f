#include "test_util.hpp"

#include <robcal/sca.hpp>

#include <cmath>

using namespace robcal;
using namespace robcal::testing;

namespace {

double faraday_cost(std::span<const Mat2> jhat, std::span<const Mat2> fixed, double t) {
  double c = 0.0;
  for (std::size_t p = 0; p < jhat.size(); ++p) c += (jhat[p] - fixed[p] * faraday_matrix(t)).squaredNorm();
  return c;
}

std::vector<AntennaPosition> random_positions(Rng& rng, std::size_t m) {
  std::vector<AntennaPosition> r;
  for (std::size_t k = 0; k < m; ++k) r.push_back({uniform(rng, -8, 8), uniform(rng, -8, 8)});
  return r;
}

/// Dense least squares for one gain component: rows of R_i against rows of Jhat_i.
cplx gain_component_oracle(std::span<const Mat2> jhat, std::span<const Mat2> r, int k) {
  const auto n = static_cast<Eigen::Index>(2 * jhat.size());
  Eigen::VectorXcd a(n), b(n);
  for (std::size_t i = 0; i < jhat.size(); ++i)
    for (int c = 0; c < 2; ++c) {
      a(static_cast<Eigen::Index>(2 * i + c)) = r[i](k, c);
      b(static_cast<Eigen::Index>(2 * i + c)) = jhat[i](k, c);
    }
  return (a.householderQr().solve(b))(0);
}

}  // namespace

TEST(EstimateFaraday, PureRotation) {
  const std::vector<Mat2> j{faraday_matrix(0.4)}, k{Mat2::Identity()};
  EXPECT_NEAR(estimate_faraday(j, k), 0.4, 1e-15);
}

TEST(EstimateFaraday, NoiselessFixedPoint) {
  Rng rng(1);
  for (int t = 0; t < 50; ++t) {
    const double angle = uniform(rng, -kPi / 2, kPi / 2);
    std::vector<Mat2> j, k;
    for (int p = 0; p < 6; ++p) {
      k.push_back(random_mat2(rng));
      j.push_back(k.back() * faraday_matrix(angle));
    }
    EXPECT_NEAR(canonical_faraday(estimate_faraday(j, k) - angle), 0.0, 1e-8);
  }
}

TEST(EstimateFaraday, BeatsDenseGrid) {
  Rng rng(2);
  for (int t = 0; t < 20; ++t) {
    std::vector<Mat2> j, k;
    for (int p = 0; p < 6; ++p) {
      k.push_back(random_mat2(rng));
      j.push_back(k.back() * faraday_matrix(0.3) + random_mat2(rng, 0.5));
    }
    const double c = faraday_cost(j, k, estimate_faraday(j, k));
    double best = std::numeric_limits<double>::infinity();
    for (int g = 0; g < 10000; ++g) best = std::min(best, faraday_cost(j, k, -kPi + 2 * kPi * g / 10000.0));
    EXPECT_LE(c, best + 1e-9);
  }
}

TEST(EstimateFaraday, DegenerateThrows) {
  const std::vector<Mat2> j{Mat2::Identity()}, k{Mat2::Zero()};
  EXPECT_THROW(estimate_faraday(j, k), NumericalError);
}

TEST(EstimateGain, DiagonalExample) {
  Rng rng(3);
  std::vector<Mat2> j, r;
  for (int i = 0; i < 3; ++i) {
    r.push_back(random_mat2(rng));
    j.push_back(gain_matrix(Vec2(2.0, cplx(0, 3))) * r.back());
  }
  EXPECT_LE(max_diff(estimate_gain_mono(j, r), Vec2(2.0, cplx(0, 3))), 1e-14);
  EXPECT_LE(max_diff(estimate_gain_mono(r, r), Vec2(1.0, 1.0)), 1e-15);
}

TEST(EstimateGain, MatchesDenseLeastSquares) {
  Rng rng(4);
  for (int t = 0; t < 100; ++t) {
    std::vector<Mat2> j, r;
    for (int i = 0; i < 2; ++i) {
      r.push_back(random_mat2(rng));
      j.push_back(random_mat2(rng));
    }
    const Vec2 g = estimate_gain_mono(j, r);
    for (int k = 0; k < 2; ++k) {
      const cplx o = gain_component_oracle(j, r, k);
      EXPECT_LE(std::abs(g(k) - o), 1e-12 * std::abs(o));
    }
  }
}

TEST(EstimateGain, ZeroDenominatorNamesComponent) {
  Mat2 r = Mat2::Identity();
  r(1, 1) = 0.0;
  const std::vector<Mat2> j{Mat2::Identity()}, rs{r};
  try {
    estimate_gain_mono(j, rs);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("component 2"), std::string::npos);
  }
}

TEST(EstimatePhase, Examples) {
  Rng rng(5);
  const Vec2 g = random_vec2(rng);
  const Mat2 h = phase_matrix(0.2);
  const Mat2 k = gain_matrix(g) * h * faraday_matrix(0.3);
  EXPECT_NEAR(estimate_phase(std::polar(1.0, 0.7) * k, g, h, 0.3), 0.7, 1e-14);
  EXPECT_NEAR(estimate_phase(k, g, h, 0.3), 0.0, 1e-15);
}

TEST(EstimatePhase, RoundTripThroughIonosphere) {
  Rng rng(6);
  for (int t = 0; t < 100; ++t) {
    const double phi = uniform(rng, -10, 10);
    const Mat2 z = phase_matrix(phi);
    EXPECT_NEAR(wrap_phase(estimate_phase(z, Vec2(1, 1), Mat2::Identity(), 0.0) - phi), 0.0, 1e-12);
  }
}

TEST(EstimatePhase, BeatsDenseGrid) {
  Rng rng(7);
  for (int t = 0; t < 10; ++t) {
    const Vec2 g = random_vec2(rng);
    const Mat2 h = random_mat2(rng);
    const Mat2 j = random_mat2(rng);
    const double th = uniform(rng, -1, 1);
    const Mat2 k = gain_matrix(g) * h * faraday_matrix(th);
    auto cost = [&](double phi) { return (j - std::polar(1.0, phi) * k).squaredNorm(); };
    const double c = cost(estimate_phase(j, g, h, th));
    for (int n = 0; n < 100000; ++n) ASSERT_LE(c, cost(-kPi + 2 * kPi * n / 100000.0) + 1e-12);
  }
}

TEST(EstimatePhase, UnidentifiableThrows) {
  EXPECT_THROW(estimate_phase(Mat2::Zero(), Vec2(1, 1), Mat2::Identity(), 0.0), NumericalError);
}

TEST(EstimateAlpha, IdentityGeometry) {
  const std::vector<AntennaPosition> r{{1, 0}, {0, 1}};
  const std::vector<double> phi{0.3, -0.2};
  const IonoShift a = estimate_alpha(phi, r);
  EXPECT_NEAR(a.eta, 0.3, 1e-15);
  EXPECT_NEAR(a.zeta, -0.2, 1e-15);
}

TEST(EstimateAlpha, ConsistentSystem) {
  Rng rng(8);
  for (int t = 0; t < 100; ++t) {
    const auto r = random_positions(rng, 8);
    const IonoShift a0{uniform(rng, -0.1, 0.1), uniform(rng, -0.1, 0.1)};
    std::vector<double> phi;
    for (const auto& x : r) phi.push_back(ionospheric_phase(a0, x));
    const IonoShift a = estimate_alpha(phi, r);
    EXPECT_NEAR(a.eta, a0.eta, 1e-12);
    EXPECT_NEAR(a.zeta, a0.zeta, 1e-12);
  }
}

TEST(EstimateAlpha, MatchesQrLeastSquares) {
  Rng rng(9);
  for (int t = 0; t < 100; ++t) {
    const auto r = random_positions(rng, 8);
    Eigen::MatrixXd lam(8, 2);
    Eigen::VectorXd phi(8);
    std::vector<double> phis;
    for (int p = 0; p < 8; ++p) {
      lam(p, 0) = r[static_cast<std::size_t>(p)].u;
      lam(p, 1) = r[static_cast<std::size_t>(p)].v;
      phi(p) = uniform(rng, -1, 1);
      phis.push_back(phi(p));
    }
    const Eigen::Vector2d o = lam.colPivHouseholderQr().solve(phi);
    const IonoShift a = estimate_alpha(phis, r);
    EXPECT_LE(std::abs(a.eta - o(0)), 1e-12 * o.norm());
    EXPECT_LE(std::abs(a.zeta - o(1)), 1e-12 * o.norm());
  }
}

TEST(EstimateAlpha, ScaleEquivariant) {
  Rng rng(10);
  auto r = random_positions(rng, 6);
  std::vector<double> phi;
  for (int p = 0; p < 6; ++p) phi.push_back(uniform(rng, -1, 1));
  const IonoShift a = estimate_alpha(phi, r);
  for (auto& x : r) x = {3.0 * x.u, 3.0 * x.v};
  const IonoShift b = estimate_alpha(phi, r);
  EXPECT_NEAR(b.eta, a.eta / 3, 1e-13);
  EXPECT_NEAR(b.zeta, a.zeta / 3, 1e-13);
}

TEST(EstimateAlpha, CollinearThrows) {
  const std::vector<AntennaPosition> r{{1, 2}, {2, 4}, {-3, -6}};
  const std::vector<double> phi{0.1, 0.2, 0.3};
  EXPECT_THROW(estimate_alpha(phi, r), NumericalError);
}

TEST(RunSca, TruthIsFixedPoint) {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const Instance in = make_instance(seed, kNoiseless);
    const JonesGrid j = structured_jones(in.truth, in.channel);
    ScaOptions o;
    o.max_iter = 1;
    const ScaResult r = run_sca(j, in.coh, in.channel, in.truth, o);
    for (std::size_t i = 0; i < 2; ++i) {
      EXPECT_LE(std::abs(r.params.faraday[i] - in.truth.faraday[i]), 1e-10);
      EXPECT_LE(std::abs(r.params.shift[i].eta - in.truth.shift[i].eta), 1e-10);
      EXPECT_LE(std::abs(r.params.shift[i].zeta - in.truth.shift[i].zeta), 1e-10);
    }
    for (std::size_t p = 0; p < 8; ++p) EXPECT_LE(max_diff(r.params.gains[p], in.truth.gains[p]), 1e-10);
  }
}

TEST(RunSca, NoiselessRecoveryUpToAmbiguity) {
  // A shift common to all sources is a gain phase ramp at one frequency; the
  // composed Jones matrices and the shift differences are identifiable.
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const Instance in = make_instance(seed, kNoiseless);
    const JonesGrid j = structured_jones(in.truth, in.channel);
    StructuredJonesParams init = in.truth;
    for (auto& a : init.faraday) a += 0.05;
    for (auto& s : init.shift) s = {};
    for (auto& g : init.gains) g *= cplx(1.05, 0.05);
    const ScaResult r = run_sca(j, in.coh, in.channel, init);
    const JonesGrid fit = structured_jones(r.params, in.channel);
    EXPECT_LT(residual_norm_ratio(in.vis, compute_residuals(in.vis, fit, in.coh)), 1e-6);
    EXPECT_NEAR(r.params.shift[0].eta - r.params.shift[1].eta, in.truth.shift[0].eta - in.truth.shift[1].eta, 1e-6);
    EXPECT_NEAR(r.params.shift[0].zeta - r.params.shift[1].zeta, in.truth.shift[0].zeta - in.truth.shift[1].zeta,
                1e-6);
    for (std::size_t i = 0; i < 2; ++i)
      EXPECT_NEAR(canonical_faraday(r.params.faraday[i] - in.truth.faraday[i]), 0.0, 1e-6);
  }
}

TEST(RunSca, CostMonotonePerSubstep) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const Instance in = make_instance(200 + seed, 5.0, true);
    const NscaResult nr = run_nsca(in.vis, in.coh, initial_jones(in.vis, in.coh, in.channel.direction),
                                   NoiseMode::gaussian);
    StructuredJonesParams init = in.truth;
    for (auto& s : init.shift) s = {};
    ScaOptions o;
    o.max_iter = 100;
    o.rel_tol = 0.0;
    const ScaResult r = run_sca(nr.jones, in.coh, in.channel, init, o);
    double prev = std::numeric_limits<double>::infinity();
    for (const auto& c : r.diagnostics.cycles) {
      const double slack = 1e-10 * c.aligned;
      EXPECT_LE(c.aligned, prev + slack);
      EXPECT_LE(c.after_faraday, c.aligned + slack);
      EXPECT_LE(c.after_gain, c.after_faraday + slack);
      EXPECT_LE(c.after_phase, c.after_gain + slack);
      EXPECT_LE(c.after_alpha, c.after_gain + slack);
      prev = c.after_alpha;
    }
  }
}

TEST(RunSca, FixGainsKeepsInitGains) {
  const Instance in = make_instance(7, 10.0);
  const NscaResult nr = run_nsca(in.vis, in.coh, initial_jones(in.vis, in.coh, in.channel.direction),
                                 NoiseMode::gaussian);
  ScaOptions o;
  o.fix_gains = true;
  const ScaResult r = run_sca(nr.jones, in.coh, in.channel, in.truth, o);
  EXPECT_EQ(r.params.gains, in.truth.gains);
}

TEST(Gauge, AlignmentPreservesVisibilities) {
  const Instance in = make_instance(8, 5.0, true);
  const NscaResult nr = run_nsca(in.vis, in.coh, initial_jones(in.vis, in.coh, in.channel.direction),
                                 NoiseMode::gaussian);
  const JonesGrid target = structured_jones(in.truth, in.channel);
  const JonesGrid a = align_gauge(nr.jones, target, in.coh);
  const auto v0 = synthesize(in.coh, nr.jones), v1 = synthesize(in.coh, a);
  for (std::size_t b = 0; b < v0.size(); ++b) EXPECT_LE(max_diff(v0.v[b], v1.v[b]), 1e-10);
  double before = 0.0, after = 0.0;
  for (std::size_t k = 0; k < target.data().size(); ++k) {
    before += (nr.jones.data()[k] - target.data()[k]).squaredNorm();
    after += (a.data()[k] - target.data()[k]).squaredNorm();
  }
  EXPECT_LE(after, before);
}
