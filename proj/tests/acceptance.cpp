// Acceptance checks. Prints one PASS/FAIL line per criterion.
//
//   acceptance [--only N[,N...]] [--expect-fail N[,N...]]
//
// Exit status is the number of failed criteria not listed in --expect-fail.

#include <robcal/robcal.hpp>

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

using namespace robcal;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... a) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, a...);
  return buf;
}

double uni(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

Mat2 rand_mat2(Rng& rng, double s) {
  std::normal_distribution<double> n(0.0, s);
  Mat2 m;
  for (int k = 0; k < 4; ++k) m(k % 2, k / 2) = cplx(n(rng), n(rng));
  return m;
}

Real3 rand_real3(Rng& rng, double s) { return Real3(uni(rng, -s, s), uni(rng, -s, s), uni(rng, -s, s)); }

ExperimentConfig base_config(std::uint64_t seed) {
  ExperimentConfig c;
  c.seed = seed;
  c.outliers = 0;
  c.trials = 1;
  return c;
}

// ---------------------------------------------------------------------------

Outcome oracles() {
  Rng rng(101);
  double worst = 0.0;
  auto rel = [&](double err, double scale) { worst = std::max(worst, err / std::max(scale, 1e-300)); };
  for (int t = 0; t < 100; ++t) {
    // Consensus variable against the stacked least-squares solution.
    {
      const double fs[3] = {1.0, uni(rng, 1.1, 2), uni(rng, 2, 4)};
      const Real3 rho(uni(rng, 0.1, 10), uni(rng, 0.1, 10), uni(rng, 0.1, 10));
      std::vector<AgentMessage> m;
      Eigen::MatrixXd a = Eigen::MatrixXd::Zero(9, 3);
      Eigen::VectorXd b(9);
      for (int f = 0; f < 3; ++f) {
        const std::vector<Real3> e{rand_real3(rng, 1)}, y{rand_real3(rng, 1)};
        m.push_back(make_message(e, y, rho, fs[f]));
        const double bf = frequency_model(fs[f]);
        for (int k = 0; k < 3; ++k) {
          a(3 * f + k, k) = std::sqrt(rho(k)) * bf;
          b(3 * f + k) = std::sqrt(rho(k)) * (e[0](k) + y[0](k) / rho(k));
        }
      }
      const Eigen::Vector3d o = a.colPivHouseholderQr().solve(b);
      rel((global_z_update(m, rho)[0] - o).norm(), o.norm());
    }
    // Plane fit of antenna phases.
    {
      std::vector<AntennaPosition> r;
      Eigen::MatrixXd lam(8, 2);
      Eigen::VectorXd phi(8);
      std::vector<double> phis;
      for (int p = 0; p < 8; ++p) {
        r.push_back({uni(rng, -8, 8), uni(rng, -8, 8)});
        lam(p, 0) = r.back().u;
        lam(p, 1) = r.back().v;
        phi(p) = uni(rng, -1, 1);
        phis.push_back(phi(p));
      }
      const Eigen::Vector2d o = lam.colPivHouseholderQr().solve(phi);
      const IonoShift s = estimate_alpha(phis, r);
      rel((Eigen::Vector2d(s.eta, s.zeta) - o).norm(), o.norm());
    }
    // Single-frequency gain.
    {
      std::vector<Mat2> j, r;
      for (int i = 0; i < 2; ++i) {
        r.push_back(rand_mat2(rng, 1));
        j.push_back(rand_mat2(rng, 1));
      }
      const Vec2 g = estimate_gain_mono(j, r);
      for (int k = 0; k < 2; ++k) {
        Eigen::VectorXcd a(4), b(4);
        for (int i = 0; i < 2; ++i)
          for (int c = 0; c < 2; ++c) {
            a(2 * i + c) = r[static_cast<std::size_t>(i)](k, c);
            b(2 * i + c) = j[static_cast<std::size_t>(i)](k, c);
          }
        const cplx o = a.householderQr().solve(b)(0);
        rel(std::abs(g(k) - o), std::abs(o));
      }
    }
    // Multi-frequency gain.
    {
      const Scenario scen = make_scenario(base_config(static_cast<std::uint64_t>(t % 5 + 1)));
      std::vector<JonesGrid> j;
      std::vector<Channel> ch;
      std::vector<std::vector<Real3>> eps;
      for (std::size_t f = 0; f < 3; ++f) {
        ch.push_back(scen.channel(f));
        const StructuredJonesParams tr = scen.truth_at(f);
        JonesGrid noisy = structured_jones(tr, ch.back());
        for (auto& x : noisy.data()) x += rand_mat2(rng, 0.2);
        j.push_back(noisy);
        eps.push_back(epsilon_of(tr));
      }
      const auto g = gain_update(j, ch, eps);
      const std::size_t p = static_cast<std::size_t>(t % 8);
      for (int k = 0; k < 2; ++k) {
        Eigen::VectorXcd a(12), b(12);
        Eigen::Index row = 0;
        for (std::size_t f = 0; f < 3; ++f)
          for (std::size_t i = 0; i < 2; ++i) {
            const Mat2 r = compose_jones(Vec2(1, 1), ch[f].direction(i, p), shift_of(eps[f][i]), eps[f][i](0),
                                         ch[f].positions[p]);
            for (int c = 0; c < 2; ++c, ++row) {
              a(row) = r(k, c);
              b(row) = j[f](i, p)(k, c);
            }
          }
        const cplx o = a.householderQr().solve(b)(0);
        rel(std::abs(g[p](k) - o), std::abs(o));
      }
    }
  }
  return {worst <= 1e-12, fmt("max relative error %.2e over 4 x 100 instances", worst)};
}

Outcome gradient() {
  Rng rng(202);
  const Scenario scen = make_scenario(base_config(4));
  const double h = 1e-6;
  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t f = static_cast<std::size_t>(t % 2), i = static_cast<std::size_t>(t / 2 % 2);
    const Channel ch = scen.channel(f);
    const StructuredJonesParams tr = scen.truth_at(f);
    JonesGrid noisy = structured_jones(tr, ch);
    for (auto& x : noisy.data()) x += rand_mat2(rng, 0.1);
    const LocalData ld = local_view(noisy, ch, tr.gains, i);
    const Real3 e = epsilon_of(tr)[i] + rand_real3(rng, 0.1);
    const Real3 z = rand_real3(rng, 1.0), y = rand_real3(rng, 1.0);
    const Real3 rho(uni(rng, 0.1, 10), uni(rng, 0.1, 10), uni(rng, 0.1, 10));
    auto obj = [&](const Real3& x) { return local_cost(x, ld) + augmented_terms(x, z, y, rho, ch.frequency); };
    const Real3 g = grad_local(e, z, y, rho, ch.frequency, ld);
    for (int k = 0; k < 3; ++k) {
      Real3 ep = e, em = e;
      ep(k) += h;
      em(k) -= h;
      const double fd = (obj(ep) - obj(em)) / (2 * h);
      worst = std::max(worst, std::abs(g(k) - fd) / std::max(std::abs(fd), 1.0));
    }
  }
  return {worst < 1e-6, fmt("max componentwise relative error %.2e at 100 points", worst)};
}

Outcome noiseless_recovery() {
  double worst_param = 0.0, worst_gain = 0.0, worst_primal = 0.0;
  int worst_middle = 0;
  bool consensus = true;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const ExperimentConfig cfg = base_config(seed);
    const Scenario scen = make_scenario(cfg);
    FrequencyFits ff;
    fit_frequencies(cfg, scen, kInf, NoiseMode::robust, 0, 4, ff);
    const MscaResult mr = fit_multi(cfg, scen, ff, 4);
    consensus = consensus && mr.diagnostics.consensus_reached;
    worst_primal = std::max(worst_primal, mr.diagnostics.primal);
    worst_middle = std::max(worst_middle, mr.diagnostics.middle_iterations);
    for (std::size_t f = 0; f < 4; ++f) {
      const auto est = mr.params(f);
      const auto& tr = ff.truths[f];
      for (std::size_t i = 0; i < tr.sources(); ++i) {
        worst_param = std::max({worst_param, std::abs(canonical_faraday(est.faraday[i] - tr.faraday[i])),
                                std::abs(est.shift[i].eta - tr.shift[i].eta),
                                std::abs(est.shift[i].zeta - tr.shift[i].zeta)});
      }
    }
    const auto ge = normalize_gain_phase(mr.gains), gt = normalize_gain_phase(ff.truths.front().gains);
    for (std::size_t p = 0; p < gt.size(); ++p) worst_gain = std::max(worst_gain, (ge[p] - gt[p]).cwiseAbs().maxCoeff());
  }
  const bool pass = consensus && worst_param <= 1e-5 && worst_gain <= 1e-5 && worst_primal < 1e-6 && worst_middle <= 500;
  return {pass, fmt("5 scenarios, F=4: max |param err| %.2e, max |gain err| %.2e, primal %.2e, <= %d ADMM iterations",
                    worst_param, worst_gain, worst_primal, worst_middle)};
}

Outcome fixed_points() {
  double nsca = 0.0, sca = 0.0, msca = 0.0;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const ExperimentConfig cfg = base_config(seed);
    const Scenario scen = make_scenario(cfg);
    const auto coh = scen.coherencies();
    const Channel ch = scen.channel(0);
    const StructuredJonesParams tr = scen.truth_at(0);
    const VisibilitySet vis = simulate_observation(cfg, scen, kInf, 0, 0);
    const JonesGrid truth = structured_jones(tr, ch);

    for (NoiseMode m : {NoiseMode::gaussian, NoiseMode::robust}) {
      NscaOptions o;
      o.max_outer = 1;
      o.gaussian_warmup = false;
      o.exact_fit = 0.0;
      const NscaResult r = run_nsca(vis, coh, truth, m, o);
      for (std::size_t k = 0; k < truth.data().size(); ++k)
        nsca = std::max(nsca, (r.jones.data()[k] - truth.data()[k]).cwiseAbs().maxCoeff());
    }

    ScaOptions so;
    so.max_iter = 1;
    const ScaResult sr = run_sca(truth, coh, ch, tr, so);
    for (std::size_t i = 0; i < tr.sources(); ++i)
      sca = std::max({sca, std::abs(sr.params.faraday[i] - tr.faraday[i]),
                      std::abs(sr.params.shift[i].eta - tr.shift[i].eta),
                      std::abs(sr.params.shift[i].zeta - tr.shift[i].zeta)});
    for (std::size_t p = 0; p < tr.gains.size(); ++p)
      sca = std::max(sca, (sr.params.gains[p] - tr.gains[p]).cwiseAbs().maxCoeff());

    std::vector<MscaChannel> agents;
    MscaInit init;
    std::vector<std::vector<Real3>> eps;
    for (std::size_t f = 0; f < 4; ++f) {
      const Channel cf = scen.channel(f);
      const StructuredJonesParams tf = scen.truth_at(f);
      agents.push_back({cf.frequency, cf, structured_jones(tf, cf), coh});
      eps.push_back(epsilon_of(tf));
    }
    init.eps = eps;
    init.gains = tr.gains;
    MscaOptions mo;
    mo.max_outer = 1;
    const MscaResult mr = run_msca(agents, init, mo);
    for (std::size_t f = 0; f < 4; ++f)
      for (std::size_t i = 0; i < eps[f].size(); ++i) msca = std::max(msca, (mr.eps[f][i] - eps[f][i]).cwiseAbs().maxCoeff());
    for (std::size_t p = 0; p < tr.gains.size(); ++p)
      msca = std::max(msca, (mr.gains[p] - tr.gains[p]).cwiseAbs().maxCoeff());
  }
  return {nsca <= 1e-8 && sca <= 1e-8 && msca <= 1e-8,
          fmt("max movement NSCA %.2e, SCA %.2e, MSCA %.2e", nsca, sca, msca)};
}

Outcome robustness() {
  ExperimentConfig cfg;
  cfg.snr_db = {15.0};
  cfg.f_counts = {2};
  cfg.trials = 200;
  const ExperimentResult r = run_experiment(cfg, 1);
  const CellResult* a = find_cell(r, 15.0, NoiseMode::robust, Structure::multi, 2);
  const CellResult* b = find_cell(r, 15.0, NoiseMode::gaussian, Structure::multi, 2);
  const ComparisonRow row = compare_paired(*a, *b, "eta1_f1");
  return {row.ratio_high < 1.0,
          fmt("eta1_f1 MSE robust %.3e, gaussian %.3e, ratio %.3f, 95%% CI [%.3f, %.3f]", row.mse_a, row.mse_b,
              row.ratio, row.ratio_low, row.ratio_high)};
}

Outcome multi_frequency() {
  ExperimentConfig cfg;
  cfg.snr_db = {10.0};
  cfg.f_counts = {1, 2, 4};
  cfg.modes = {NoiseMode::robust};
  cfg.trials = 200;
  const ExperimentResult r = run_experiment(cfg, 1);
  std::vector<MseRecord> recs;
  for (std::size_t f : cfg.f_counts)
    for (const auto& x : r.records)
      if (x.parameter == "eta1_f1" && x.f_count == f) recs.push_back(x);
  bool pass = recs.size() == 3;
  std::string d = "eta1_f1 MSE";
  for (const auto& x : recs) d += fmt(" F=%zu %.3e+-%.1e", x.f_count, x.mse, x.ci_half_width);
  for (std::size_t k = 0; k + 1 < recs.size(); ++k) {
    const bool sep = recs[k].mse - recs[k].ci_half_width > recs[k + 1].mse + recs[k + 1].ci_half_width;
    d += fmt("; F=%zu>F=%zu %s", recs[k].f_count, recs[k + 1].f_count, sep ? "separated" : "overlapping");
    pass = pass && sep;
  }
  return {pass, d};
}

Outcome omega_consistency() {
  double worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const Mat4 omega0 = 3.0 * random_hpd(seed);
    NoiseConfig nc;
    nc.sigma2 = 1.0;
    nc.omega = omega0;
    nc.texture = {TextureFamily::constant, 0.0};
    const auto draw = sample_noise(nc, 10000, 1000 + seed);
    Mat4 omega = Mat4::Identity() / 4.0;
    for (int it = 0; it < 200; ++it) omega = update_omega(draw.noise, omega).omega;
    const Mat4 target = omega0 / omega0.trace().real();
    worst = std::max(worst, (omega - target).norm() / target.norm());
  }
  return {worst <= 0.05, fmt("max relative Frobenius error %.4f over 3 covariances", worst)};
}

Outcome monotonicity() {
  int nsca_bad = 0, sca_bad = 0;
  std::size_t nsca_steps = 0, sca_steps = 0;
  for (std::uint64_t seed = 1; seed <= 50; ++seed) {
    ExperimentConfig cfg = base_config(500 + seed);
    cfg.outliers = 4;
    const Scenario scen = make_scenario(cfg);
    const auto coh = scen.coherencies();
    const Channel ch = scen.channel(0);
    const VisibilitySet vis = simulate_observation(cfg, scen, 5.0, 0, 0);
    NscaOptions o;
    o.gaussian_warmup = false;
    const NscaResult nr = run_nsca(vis, coh, initial_jones(vis, coh, ch.direction), NoiseMode::robust, o);
    double prev = kInf;
    for (const auto& it : nr.diagnostics.iterates) {
      const double s = 1e-10 * std::abs(it.after_theta);
      nsca_bad += it.after_theta > prev + s;
      nsca_bad += it.after_omega > it.after_theta + s;
      nsca_bad += it.after_tau > it.after_omega + s;
      prev = it.after_tau;
      nsca_steps += 3;
    }
    StructuredJonesParams init = scen.truth_at(0);
    for (auto& s : init.shift) s = {};
    ScaOptions so;
    so.max_iter = 100;
    so.rel_tol = 0.0;
    const ScaResult sr = run_sca(nr.jones, coh, ch, init, so);
    prev = kInf;
    for (const auto& c : sr.diagnostics.cycles) {
      const double s = 1e-10 * std::abs(c.aligned);
      sca_bad += c.aligned > prev + s;
      sca_bad += c.after_faraday > c.aligned + s;
      sca_bad += c.after_gain > c.after_faraday + s;
      sca_bad += c.after_phase > c.after_gain + s;
      sca_bad += c.after_alpha > c.after_gain + s;
      prev = c.after_alpha;
      sca_steps += 5;
    }
  }
  return {nsca_bad == 0 && sca_bad == 0 && nsca_steps > 0 && sca_steps > 0,
          fmt("increases: NSCA %d of %zu sub-steps, SCA %d of %zu", nsca_bad, nsca_steps, sca_bad, sca_steps)};
}

Outcome determinism() {
  ExperimentConfig cfg;
  cfg.snr_db = {5.0, 15.0};
  cfg.f_counts = {1, 2};
  cfg.structures = {Structure::mono, Structure::multi};
  cfg.trials = 6;
  auto csv = [&](unsigned threads) {
    std::ostringstream os;
    write_mse_csv(os, run_experiment(cfg, threads).records);
    return os.str();
  };
  const std::string a = csv(1), b = csv(1), c = csv(8);
  return {a == b && a == c && !a.empty(), fmt("%zu bytes of mse.csv, threads 1, 1, 8: %s", a.size(),
                                               a == b && a == c ? "identical" : "differ")};
}

std::set<int> parse_set(const std::string& s) {
  std::set<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.insert(std::stoi(item));
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string only, expect_fail;
  app.add_option("--only", only, "comma separated criteria to run");
  app.add_option("--expect-fail", expect_fail, "criteria whose failure does not affect the exit status");
  CLI11_PARSE(app, argc, argv);
  const std::set<int> run = parse_set(only), known = parse_set(expect_fail);

  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"closed-form updates match least-squares oracles", oracles},
      {"local gradient matches central differences", gradient},
      {"noiseless multi-frequency recovery", noiseless_recovery},
      {"ground truth is a fixed point", fixed_points},
      {"robust beats gaussian under heavy-tailed noise", robustness},
      {"more frequencies lower the MSE", multi_frequency},
      {"noise shape estimate is consistent", omega_consistency},
      {"per-sub-step cost monotonicity", monotonicity},
      {"runs are deterministic across thread counts", determinism},
  };
  int unexpected = 0;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    const int id = static_cast<int>(k + 1);
    if (!run.empty() && !run.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[k].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool tolerated = !o.pass && known.count(id);
    std::printf("%s %d %s: %s (%.1f s)%s\n", o.pass ? "PASS" : "FAIL", id, criteria[k].first, o.detail.c_str(), secs,
                tolerated ? " [known failure]" : "");
    std::fflush(stdout);
    if (!o.pass && !tolerated) ++unexpected;
  }
  return unexpected;
}
