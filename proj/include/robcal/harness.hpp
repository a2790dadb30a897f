#pragma once

// Monte-Carlo driver: fixed ground truth per experiment, independent noise and
// outliers per trial, NSCA per frequency followed by SCA (mono) or MSCA
// (multi). Every random stream is derived from (seed, purpose, trial,
// frequency), so a cell's output does not depend on which other cells run or
// on the thread count.

#include <robcal/config.hpp>
#include <robcal/dataset_io.hpp>
#include <robcal/msca.hpp>
#include <robcal/nsca.hpp>
#include <robcal/random.hpp>
#include <robcal/sca.hpp>
#include <robcal/simulator.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

namespace robcal {

// ---------------------------------------------------------------------------
// Scenario

enum : std::uint64_t {
  kStreamScenario = 1,
  kStreamOutliers = 2,
  kStreamNoise = 3,
  kStreamInit = 4,
};

/// Everything held fixed across trials. Positions and truth refer to the first
/// frequency; `relative` holds f / f_1.
struct Scenario {
  std::vector<AntennaPosition> positions;
  std::vector<Source> calibrators;
  StructuredJonesParams truth;
  std::vector<double> relative;
  Mat4 omega = Mat4::Identity() / 4.0;

  std::vector<Mat2> coherencies() const {
    std::vector<Mat2> c;
    for (const auto& s : calibrators) c.push_back(s.coherency);
    return c;
  }
  Channel channel(std::size_t f) const { return make_channel(calibrators, positions, 1.0, relative[f]); }
  StructuredJonesParams truth_at(std::size_t f) const { return scale_truth_to_frequency(truth, 1.0, relative[f]); }
};

inline Scenario make_scenario(const ExperimentConfig& cfg) {
  cfg.validate();
  Rng rng(derive_seed(cfg.seed, {kStreamScenario}));
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::uniform_real_distribution<double> angle(-kPi, kPi);
  std::normal_distribution<double> normal(0.0, 1.0);
  Scenario s;
  for (std::size_t p = 0; p < cfg.antennas; ++p) {
    // Uniform in a disk.
    const double r = cfg.array_radius * std::sqrt(0.5 * (unit(rng) + 1.0));
    const double a = angle(rng);
    s.positions.push_back({r * std::cos(a), r * std::sin(a)});
  }
  for (std::size_t i = 0; i < cfg.sources; ++i) {
    const double flux = i == 0 ? 1.0 : 0.5 + 0.25 * (unit(rng) + 1.0);
    const double chi = angle(rng);
    const double pol = cfg.calibrator_polarization * flux;
    Source src;
    src.coherency = coherency_from_stokes(flux, pol * std::cos(chi), pol * std::sin(chi), 0.0);
    src.l = cfg.calibrator_extent * unit(rng);
    src.m = cfg.calibrator_extent * unit(rng);
    s.calibrators.push_back(src);
    s.truth.faraday.push_back(cfg.faraday_max * unit(rng));
    s.truth.shift.push_back({cfg.shift_max * unit(rng), cfg.shift_max * unit(rng)});
  }
  for (std::size_t p = 0; p < cfg.antennas; ++p) {
    Vec2 g;
    for (int k = 0; k < 2; ++k) g(k) = std::polar(1.0 + 0.1 * normal(rng), 0.5 * normal(rng));
    s.truth.gains.push_back(g);
  }
  for (double f : cfg.frequencies) s.relative.push_back(f / cfg.frequencies.front());
  if (cfg.random_omega) s.omega = random_hpd(derive_seed(cfg.seed, {kStreamScenario, 1}));
  return s;
}

/// Outlier sources of one trial (shared by every SNR, mode and frequency).
inline std::vector<Source> trial_outliers(const ExperimentConfig& cfg, std::size_t trial) {
  Rng rng(derive_seed(cfg.seed, {kStreamOutliers, trial}));
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::vector<Source> out;
  for (std::size_t k = 0; k < cfg.outliers; ++k) {
    Source s;
    s.coherency = cfg.outlier_flux * Mat2::Identity();
    s.l = cfg.outlier_extent * unit(rng);
    s.m = cfg.outlier_extent * unit(rng);
    out.push_back(s);
  }
  return out;
}

/// Observed visibilities of one trial at frequency index f. The noise draw is
/// shared across SNR values (only its scale changes).
inline VisibilitySet simulate_observation(const ExperimentConfig& cfg, const Scenario& scen, double snr_db,
                                          std::size_t trial, std::size_t f) {
  const Channel ch = scen.channel(f);
  const StructuredJonesParams truth = scen.truth_at(f);
  SkyModel sky;
  sky.calibrators = scen.calibrators;
  VisibilitySet clean = synthesize_clean(sky, truth, ch);
  std::vector<OutlierTerm> terms;
  for (const auto& o : trial_outliers(cfg, trial)) terms.push_back(make_outlier_term(o, truth.gains, ch.positions));
  NoiseConfig nc;
  nc.omega = scen.omega;
  nc.texture = {cfg.texture, cfg.texture_shape};
  nc.sigma2 = std::isfinite(snr_db) ? snr_to_sigma2(clean, snr_db) : 0.0;
  const NoiseDraw draw = sample_noise(nc, clean.size(), derive_seed(cfg.seed, {kStreamNoise, trial, f}));
  return add_noise(inject_outliers(clean, terms), draw.noise);
}

/// Truth at the first frequency with independent multiplicative perturbations.
inline StructuredJonesParams perturbed_init(const ExperimentConfig& cfg, const Scenario& scen, std::size_t trial) {
  Rng rng(derive_seed(cfg.seed, {kStreamInit, trial}));
  std::normal_distribution<double> n(0.0, 1.0);
  const double d = cfg.init_perturbation;
  StructuredJonesParams p = scen.truth;
  for (auto& a : p.faraday) a *= 1.0 + d * n(rng);
  for (auto& s : p.shift) {
    s.eta *= 1.0 + d * n(rng);
    s.zeta *= 1.0 + d * n(rng);
    if (cfg.zero_shift_init) s = {};
  }
  for (auto& g : p.gains)
    for (int k = 0; k < 2; ++k) g(k) *= cplx(1.0 + d * n(rng) / std::sqrt(2.0), d * n(rng) / std::sqrt(2.0));
  return p;
}

// ---------------------------------------------------------------------------
// Errors

inline std::vector<std::string> parameter_names(std::size_t sources, std::size_t antennas, std::size_t f_count) {
  std::vector<std::string> n;
  for (std::size_t f = 1; f <= f_count; ++f)
    for (std::size_t i = 1; i <= sources; ++i) {
      const std::string s = std::to_string(i) + "_f" + std::to_string(f);
      n.push_back("theta" + s);
      n.push_back("eta" + s);
      n.push_back("zeta" + s);
    }
  for (std::size_t p = 1; p <= antennas; ++p) n.push_back("gain" + std::to_string(p));
  return n;
}

/// Gains rotated so that [g_1]_1 is real and positive.
inline std::vector<Vec2> normalize_gain_phase(std::span<const Vec2> g) {
  std::vector<Vec2> out(g.begin(), g.end());
  if (out.empty() || std::abs(out[0](0)) == 0.0) return out;
  const cplx r = std::conj(out[0](0)) / std::abs(out[0](0));
  for (auto& x : out) x *= r;
  return out;
}

/// Squared errors in parameter_names order for the first estimates.size() frequencies.
inline std::vector<double> squared_errors(std::span<const StructuredJonesParams> estimates,
                                          std::span<const StructuredJonesParams> truths) {
  std::vector<double> e;
  for (std::size_t f = 0; f < estimates.size(); ++f)
    for (std::size_t i = 0; i < truths[f].sources(); ++i) {
      const double dt = canonical_faraday(estimates[f].faraday[i] - truths[f].faraday[i]);
      const double de = estimates[f].shift[i].eta - truths[f].shift[i].eta;
      const double dz = estimates[f].shift[i].zeta - truths[f].shift[i].zeta;
      e.push_back(dt * dt);
      e.push_back(de * de);
      e.push_back(dz * dz);
    }
  const auto ge = normalize_gain_phase(estimates.front().gains);
  const auto gt = normalize_gain_phase(truths.front().gains);
  for (std::size_t p = 0; p < gt.size(); ++p) e.push_back((ge[p] - gt[p]).squaredNorm());
  return e;
}

// ---------------------------------------------------------------------------
// Cells and trials

struct CellKey {
  double snr_db = 0.0;
  NoiseMode mode = NoiseMode::robust;
  Structure structure = Structure::multi;
  std::size_t f_count = 1;
};

/// Canonical cell order: snr, mode, structure, F.
inline std::vector<CellKey> enumerate_cells(const ExperimentConfig& cfg) {
  std::vector<CellKey> cells;
  for (double snr : cfg.snr_db)
    for (NoiseMode mode : cfg.modes)
      for (Structure st : cfg.structures) {
        if (st == Structure::mono) {
          cells.push_back({snr, mode, st, 1});
          continue;
        }
        for (std::size_t f : cfg.f_counts) cells.push_back({snr, mode, st, f});
      }
  return cells;
}

struct CellTrial {
  bool ok = false;
  std::vector<double> sq_err;
  std::string error;
};

inline std::string cell_label(const CellKey& c) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "snr%g_%s_%s_F%zu", c.snr_db, to_string(c.mode), to_string(c.structure), c.f_count);
  return buf;
}

inline void write_trace(const std::filesystem::path& file, std::span<const MscaTraceRow> rows) {
  std::ofstream os(file);
  if (!os) throw std::runtime_error("cannot write trace file '" + file.string() + "'");
  os << "iter,primal,dual,total_cost,rho_faraday,rho_eta,rho_zeta\n";
  for (const auto& r : rows)
    os << r.iter << ',' << format_real(r.primal) << ',' << format_real(r.dual) << ',' << format_real(r.total_cost)
       << ',' << format_real(r.rho(0)) << ',' << format_real(r.rho(1)) << ',' << format_real(r.rho(2)) << '\n';
}

/// Per-frequency stage of one trial: NSCA on the observed data, then SCA. The
/// first frequency starts SCA from perturbed_init; later ones start from the
/// first fit scaled to their frequency and keep its gains.
struct FrequencyFits {
  std::vector<Channel> channels;
  std::vector<StructuredJonesParams> truths;
  std::vector<StructuredJonesParams> fits;
  std::vector<JonesGrid> aligned;  // NSCA output after SCA gauge alignment
};

/// Appends frequencies to `out` until it holds `nf` fits. Throws on solver
/// failure; frequencies completed before the failure stay in `out`.
inline void fit_frequencies(const ExperimentConfig& cfg, const Scenario& scen, double snr_db, NoiseMode mode,
                            std::size_t trial, std::size_t nf, FrequencyFits& out) {
  const auto coh = scen.coherencies();
  NscaOptions nopt;
  nopt.max_outer = cfg.nsca_max_iter;
  nopt.robust_max_outer = cfg.nsca_robust_iter;
  for (std::size_t f = out.fits.size(); f < nf; ++f) {
    const Channel ch = scen.channel(f);
    const VisibilitySet vis = simulate_observation(cfg, scen, snr_db, trial, f);
    const NscaResult nr = run_nsca(vis, coh, initial_jones(vis, coh, ch.direction), mode, nopt);
    ScaOptions sopt;
    sopt.max_iter = cfg.sca_max_iter;
    StructuredJonesParams init;
    if (f == 0) {
      init = perturbed_init(cfg, scen, trial);
    } else {
      init = scale_truth_to_frequency(out.fits.front(), 1.0, scen.relative[f]);
      sopt.fix_gains = true;
    }
    ScaResult sr = run_sca(nr.jones, coh, ch, init, sopt);
    out.channels.push_back(ch);
    out.truths.push_back(scen.truth_at(f));
    out.fits.push_back(std::move(sr.params));
    out.aligned.push_back(std::move(sr.aligned));
  }
}

/// Consensus calibration over the first `f_count` frequencies of `ff`.
inline MscaResult fit_multi(const ExperimentConfig& cfg, const Scenario& scen, const FrequencyFits& ff,
                            std::size_t f_count) {
  const auto coh = scen.coherencies();
  std::vector<MscaChannel> agents;
  for (std::size_t f = 0; f < f_count; ++f) agents.push_back({scen.relative[f], ff.channels[f], ff.aligned[f], coh});
  const MscaInit init = consensus_init(std::span(ff.fits).first(f_count), std::span(scen.relative).first(f_count),
                                       std::span(ff.channels).first(f_count));
  MscaOptions mo;
  mo.rho = cfg.rho;
  mo.rho_adapt = cfg.rho_adapt;
  mo.max_outer = cfg.msca_max_outer;
  mo.max_middle = cfg.msca_max_middle;
  return run_msca(agents, init, mo);
}

/// Runs every cell that shares (snr, mode) for one trial; NSCA and SCA results
/// are reused across those cells. Returns one entry per cell in `cells`.
inline std::vector<CellTrial> run_trial(const ExperimentConfig& cfg, const Scenario& scen, double snr_db,
                                        NoiseMode mode, std::span<const CellKey> cells, std::size_t trial,
                                        const std::optional<std::filesystem::path>& trace_dir = std::nullopt) {
  std::vector<CellTrial> out(cells.size());
  std::size_t nf = 1;
  for (const auto& c : cells) nf = std::max(nf, c.f_count);
  FrequencyFits ff;
  std::string shared_error;
  try {
    fit_frequencies(cfg, scen, snr_db, mode, trial, nf, ff);
  } catch (const std::exception& e) {
    shared_error = e.what();
  }

  for (std::size_t c = 0; c < cells.size(); ++c) {
    const CellKey& key = cells[c];
    CellTrial& ct = out[c];
    if (ff.fits.size() < key.f_count) {
      ct.error = shared_error;
      continue;
    }
    try {
      if (key.structure == Structure::mono) {
        ct.sq_err = squared_errors(std::span(ff.fits).first(1), ff.truths);
      } else {
        const MscaResult mr = fit_multi(cfg, scen, ff, key.f_count);
        std::vector<StructuredJonesParams> est;
        for (std::size_t f = 0; f < key.f_count; ++f) est.push_back(mr.params(f));
        ct.sq_err = squared_errors(est, ff.truths);
        if (trace_dir && trial < cfg.trace_trials)
          write_trace(*trace_dir / (cell_label(key) + "_trial" + std::to_string(trial) + ".csv"),
                      mr.diagnostics.trace);
      }
      ct.ok = std::all_of(ct.sq_err.begin(), ct.sq_err.end(), [](double x) { return std::isfinite(x); });
      if (!ct.ok) ct.error = "non-finite estimate";
    } catch (const std::exception& e) {
      ct.ok = false;
      ct.error = e.what();
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Records

struct MseRecord {
  std::string parameter;
  double snr_db = 0.0;
  std::size_t f_count = 1;
  NoiseMode mode = NoiseMode::robust;
  Structure structure = Structure::multi;
  double mse = 0.0;
  std::size_t trials = 0;  // successful trials
  double ci_half_width = 0.0;
  std::size_t failures = 0;

  bool operator==(const MseRecord&) const = default;
};

struct CellResult {
  CellKey key;
  std::vector<std::string> parameters;
  std::vector<CellTrial> trials;  // trial order

  std::size_t failures() const {
    return static_cast<std::size_t>(std::count_if(trials.begin(), trials.end(), [](const auto& t) { return !t.ok; }));
  }
};

struct ExperimentResult {
  std::vector<CellResult> cells;
  std::vector<MseRecord> records;
};

inline std::vector<MseRecord> summarize(const CellResult& cell) {
  std::vector<MseRecord> recs;
  for (std::size_t k = 0; k < cell.parameters.size(); ++k) {
    MseRecord r{cell.parameters[k], cell.key.snr_db, cell.key.f_count, cell.key.mode, cell.key.structure};
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& t : cell.trials)
      if (t.ok) {
        sum += t.sq_err[k];
        ++n;
      }
    r.trials = n;
    r.failures = cell.trials.size() - n;
    if (n > 0) {
      r.mse = sum / static_cast<double>(n);
      if (n > 1) {
        double ss = 0.0;
        for (const auto& t : cell.trials)
          if (t.ok) ss += (t.sq_err[k] - r.mse) * (t.sq_err[k] - r.mse);
        r.ci_half_width = 1.96 * std::sqrt(ss / static_cast<double>(n - 1)) / std::sqrt(static_cast<double>(n));
      }
    } else {
      r.mse = std::numeric_limits<double>::quiet_NaN();
      r.ci_half_width = std::numeric_limits<double>::quiet_NaN();
    }
    recs.push_back(r);
  }
  return recs;
}

/// Runs all cells with up to `threads` workers. Work is split into (snr, mode,
/// trial) jobs and results are written into fixed slots, so output does not
/// depend on scheduling.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, unsigned threads = 1,
                                       const std::optional<std::filesystem::path>& trace_dir = std::nullopt) {
  cfg.validate();
  const Scenario scen = make_scenario(cfg);
  const auto cells = enumerate_cells(cfg);
  ExperimentResult res;
  for (const auto& c : cells)
    res.cells.push_back({c, parameter_names(cfg.sources, cfg.antennas, c.f_count),
                         std::vector<CellTrial>(cfg.trials)});

  // Group cells by (snr, mode).
  std::vector<std::vector<std::size_t>> groups;
  for (std::size_t c = 0; c < cells.size(); ++c) {
    bool placed = false;
    for (auto& g : groups) {
      const auto& h = cells[g.front()];
      if (h.snr_db == cells[c].snr_db && h.mode == cells[c].mode) {
        g.push_back(c);
        placed = true;
        break;
      }
    }
    if (!placed) groups.push_back({c});
  }
  if (trace_dir && cfg.trace) std::filesystem::create_directories(*trace_dir);
  const auto tdir = cfg.trace ? trace_dir : std::nullopt;

  const std::size_t jobs = groups.size() * cfg.trials;
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t j = next++; j < jobs; j = next++) {
      const auto& g = groups[j / cfg.trials];
      const std::size_t trial = j % cfg.trials;
      std::vector<CellKey> keys;
      for (std::size_t c : g) keys.push_back(cells[c]);
      auto out = run_trial(cfg, scen, keys.front().snr_db, keys.front().mode, keys, trial, tdir);
      for (std::size_t k = 0; k < g.size(); ++k) res.cells[g[k]].trials[trial] = std::move(out[k]);
    }
  };
  const unsigned n = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(jobs)));
  std::vector<std::thread> pool;
  for (unsigned t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  for (const auto& c : res.cells) {
    auto r = summarize(c);
    res.records.insert(res.records.end(), r.begin(), r.end());
  }
  return res;
}

inline double max_failure_rate(const ExperimentResult& r) {
  double worst = 0.0;
  for (const auto& c : r.cells)
    if (!c.trials.empty())
      worst = std::max(worst, static_cast<double>(c.failures()) / static_cast<double>(c.trials.size()));
  return worst;
}

// ---------------------------------------------------------------------------
// CSV

inline constexpr const char* kMseHeader = "parameter,snr_db,F,mode,structure,mse,trials,ci_half_width,failures";

inline void write_mse_csv(std::ostream& os, std::span<const MseRecord> records) {
  os << kMseHeader << '\n';
  for (const auto& r : records)
    os << r.parameter << ',' << format_real(r.snr_db) << ',' << r.f_count << ',' << to_string(r.mode) << ','
       << to_string(r.structure) << ',' << format_real(r.mse) << ',' << r.trials << ',' << format_real(r.ci_half_width)
       << ',' << r.failures << '\n';
}

inline std::vector<MseRecord> read_mse_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || detail::trim(line) != kMseHeader) throw FormatError("mse csv: missing or bad header");
  std::vector<MseRecord> out;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string item;
    while (std::getline(ss, item, ',')) f.push_back(detail::trim(item));
    if (f.size() != 9) throw FormatError("mse csv line " + std::to_string(lineno) + ": expected 9 fields");
    try {
      MseRecord r;
      r.parameter = f[0];
      r.snr_db = ::robcal::detail::parse_real(f[1]);
      r.f_count = detail::parse_uint("F", f[2]);
      r.mode = detail::parse_mode(f[3]);
      r.structure = detail::parse_structure(f[4]);
      r.mse = ::robcal::detail::parse_real(f[5]);
      r.trials = detail::parse_uint("trials", f[6]);
      r.ci_half_width = ::robcal::detail::parse_real(f[7]);
      r.failures = detail::parse_uint("failures", f[8]);
      out.push_back(r);
    } catch (const std::exception& e) {
      throw FormatError("mse csv line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<MseRecord> load_mse_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open '" + path + "'");
  try {
    return read_mse_csv(is);
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

inline constexpr const char* kPlotScript = R"(#!/usr/bin/env python3
"""Plot MSE against SNR from mse.csv.

usage: plot_mse.py [mse.csv] [parameter] [output.png]
"""
import csv
import sys
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

path = sys.argv[1] if len(sys.argv) > 1 else "mse.csv"
param = sys.argv[2] if len(sys.argv) > 2 else "eta1_f1"
out = sys.argv[3] if len(sys.argv) > 3 else "mse_" + param + ".png"

curves = defaultdict(list)
with open(path) as f:
    for row in csv.DictReader(f):
        if row["parameter"] != param:
            continue
        label = "%s %s F=%s" % (row["mode"], row["structure"], row["F"])
        curves[label].append((float(row["snr_db"]), float(row["mse"]), float(row["ci_half_width"])))

fig, ax = plt.subplots(figsize=(6, 4))
for label, pts in sorted(curves.items()):
    pts.sort()
    snr = [p[0] for p in pts]
    mse = [p[1] for p in pts]
    ci = [p[2] for p in pts]
    ax.errorbar(snr, mse, yerr=ci, marker="o", capsize=3, label=label)
ax.set_yscale("log")
ax.set_xlabel("SNR [dB]")
ax.set_ylabel("MSE of " + param)
ax.grid(True, which="both", alpha=0.3)
ax.legend(fontsize=8)
fig.tight_layout()
fig.savefig(out, dpi=150)
print("wrote", out)
)";

/// Writes mse.csv and plot_mse.py into `dir` (created if missing).
inline void emit_outputs(std::span<const MseRecord> records, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create output directory '" + dir.string() + "': " + ec.message());
  {
    const auto p = dir / "mse.csv";
    std::ofstream os(p, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write '" + p.string() + "'");
    write_mse_csv(os, records);
    if (!os) throw std::runtime_error("write failed for '" + p.string() + "'");
  }
  {
    const auto p = dir / "plot_mse.py";
    std::ofstream os(p, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write '" + p.string() + "'");
    os << kPlotScript;
  }
}

// ---------------------------------------------------------------------------
// Comparison

struct ComparisonRow {
  std::string parameter;
  double snr_db = 0.0;
  std::size_t f_count = 1;
  std::string label_a, label_b;
  double mse_a = 0.0, mse_b = 0.0;
  double ratio = 0.0;  // mse_a / mse_b
  double ratio_low = 0.0, ratio_high = 0.0;
  bool a_wins = false;
};

struct ComparisonSummary {
  std::vector<ComparisonRow> rows;
  std::size_t a_wins = 0;
};

inline std::string record_label(const MseRecord& r) {
  return std::string(to_string(r.mode)) + "/" + to_string(r.structure);
}

/// Matches records of `a` and `b` on (parameter, snr, F) plus mode and
/// structure, except for a field that is constant within each side and differs
/// between them (e.g. an all-robust run against an all-gaussian run). The
/// ratio interval treats the two sides as independent.
inline ComparisonSummary compare_records(std::span<const MseRecord> a, std::span<const MseRecord> b) {
  auto constant_mode = [](std::span<const MseRecord> r) -> std::optional<NoiseMode> {
    if (r.empty()) return std::nullopt;
    for (const auto& x : r)
      if (x.mode != r.front().mode) return std::nullopt;
    return r.front().mode;
  };
  auto constant_structure = [](std::span<const MseRecord> r) -> std::optional<Structure> {
    if (r.empty()) return std::nullopt;
    for (const auto& x : r)
      if (x.structure != r.front().structure) return std::nullopt;
    return r.front().structure;
  };
  const auto ma = constant_mode(a), mb = constant_mode(b);
  const auto sa = constant_structure(a), sb = constant_structure(b);
  const bool ignore_mode = ma && mb && *ma != *mb;
  const bool ignore_structure = sa && sb && *sa != *sb;
  const bool ignore_f = ignore_structure;  // mono has F = 1 only
  using Key = std::tuple<std::string, double, std::size_t, int, int>;
  auto key = [&](const MseRecord& r) {
    return Key{r.parameter, r.snr_db, ignore_f ? 0 : r.f_count, ignore_mode ? -1 : static_cast<int>(r.mode),
               ignore_structure ? -1 : static_cast<int>(r.structure)};
  };
  std::map<Key, const MseRecord*> index;
  for (const auto& r : b)
    if (!index.emplace(key(r), &r).second)
      throw std::invalid_argument("compare: ambiguous cell in second record set: " + r.parameter);
  ComparisonSummary s;
  std::map<Key, bool> seen;
  for (const auto& r : a) {
    if (ignore_f && r.f_count != 1) continue;
    const auto it = index.find(key(r));
    if (it == index.end()) continue;
    if (!seen.emplace(key(r), true).second)
      throw std::invalid_argument("compare: ambiguous cell in first record set: " + r.parameter);
    const MseRecord& o = *it->second;
    ComparisonRow row{r.parameter, r.snr_db, r.f_count, record_label(r), record_label(o), r.mse, o.mse};
    row.ratio = r.mse == o.mse ? 1.0 : r.mse / o.mse;
    const double ra = r.mse > 0.0 ? (r.ci_half_width / 1.96) / r.mse : 0.0;
    const double rb = o.mse > 0.0 ? (o.ci_half_width / 1.96) / o.mse : 0.0;
    const double se = row.ratio * std::sqrt(ra * ra + rb * rb);
    row.ratio_low = row.ratio - 1.96 * se;
    row.ratio_high = row.ratio + 1.96 * se;
    row.a_wins = r.mse < o.mse;
    s.a_wins += row.a_wins ? 1 : 0;
    s.rows.push_back(row);
  }
  if (s.rows.empty() && !a.empty() && !b.empty()) throw std::invalid_argument("compare: no matching cells");
  return s;
}

/// Paired comparison of two cells of one experiment for one parameter:
/// ratio of MSEs with a delta-method interval over the common successful
/// trials.
inline ComparisonRow compare_paired(const CellResult& a, const CellResult& b, const std::string& parameter) {
  auto idx = [&](const CellResult& c) {
    const auto it = std::find(c.parameters.begin(), c.parameters.end(), parameter);
    if (it == c.parameters.end()) throw std::invalid_argument("compare_paired: unknown parameter " + parameter);
    return static_cast<std::size_t>(it - c.parameters.begin());
  };
  const std::size_t ka = idx(a), kb = idx(b);
  if (a.trials.size() != b.trials.size()) throw std::invalid_argument("compare_paired: trial counts differ");
  std::vector<double> xa, xb;
  for (std::size_t t = 0; t < a.trials.size(); ++t)
    if (a.trials[t].ok && b.trials[t].ok) {
      xa.push_back(a.trials[t].sq_err[ka]);
      xb.push_back(b.trials[t].sq_err[kb]);
    }
  ComparisonRow row{parameter, a.key.snr_db, a.key.f_count};
  row.label_a = std::string(to_string(a.key.mode)) + "/" + to_string(a.key.structure) + "/F" +
                std::to_string(a.key.f_count);
  row.label_b = std::string(to_string(b.key.mode)) + "/" + to_string(b.key.structure) + "/F" +
                std::to_string(b.key.f_count);
  const double n = static_cast<double>(xa.size());
  if (xa.size() < 2) throw std::invalid_argument("compare_paired: fewer than two common trials");
  for (std::size_t t = 0; t < xa.size(); ++t) {
    row.mse_a += xa[t] / n;
    row.mse_b += xb[t] / n;
  }
  row.ratio = row.mse_a / row.mse_b;
  double ss = 0.0;
  for (std::size_t t = 0; t < xa.size(); ++t) {
    const double dlt = xa[t] - row.ratio * xb[t];
    ss += dlt * dlt;
  }
  const double se = std::sqrt(ss / (n - 1.0) / n) / row.mse_b;
  row.ratio_low = row.ratio - 1.96 * se;
  row.ratio_high = row.ratio + 1.96 * se;
  row.a_wins = row.mse_a < row.mse_b;
  return row;
}

/// Robust against gaussian for every matching cell of one experiment.
inline ComparisonSummary compare_modes(const ExperimentResult& r) {
  ComparisonSummary s;
  for (const auto& a : r.cells) {
    if (a.key.mode != NoiseMode::robust) continue;
    for (const auto& b : r.cells) {
      if (b.key.mode != NoiseMode::gaussian || b.key.snr_db != a.key.snr_db || b.key.structure != a.key.structure ||
          b.key.f_count != a.key.f_count)
        continue;
      for (const auto& p : a.parameters) {
        const ComparisonRow row = compare_paired(a, b, p);
        s.a_wins += row.a_wins ? 1 : 0;
        s.rows.push_back(row);
      }
    }
  }
  return s;
}

inline const CellResult* find_cell(const ExperimentResult& r, double snr_db, NoiseMode mode, Structure st,
                                   std::size_t f_count) {
  for (const auto& c : r.cells)
    if (c.key.snr_db == snr_db && c.key.mode == mode && c.key.structure == st && c.key.f_count == f_count) return &c;
  return nullptr;
}

}  // namespace robcal
