// Command-line front end for the calibration experiments.
//
//   calibrate run --config <file> --out <dir> [--mode robust|gaussian] [--multi|--mono]
//                 [--seed N] [--trials N]
//   calibrate compare --a <csv> --b <csv>
//   calibrate simulate --config <file> --out <file> [--snr dB] [--trial N]
//
// Exit codes: 0 success, 1 runtime or I/O error, 2 configuration or usage
// error, 3 when some cell failed in more than half of its trials.

#include <robcal/robcal.hpp>

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <thread>

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;
constexpr int kExitFailures = 3;

unsigned thread_count() {
  const char* env = std::getenv("CAL_THREADS");
  if (env == nullptr || *env == '\0') return std::max(1u, std::thread::hardware_concurrency());
  const auto n = robcal::detail::parse_uint("CAL_THREADS", env);
  if (n < 1 || n > 4096) throw robcal::ConfigError("CAL_THREADS must lie in [1, 4096]");
  return static_cast<unsigned>(n);
}

struct RunArgs {
  std::string config;
  std::string out;
  std::string mode;
  bool multi = false;
  bool mono = false;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> trials;
};

int do_run(const RunArgs& a) {
  robcal::ExperimentConfig cfg = robcal::load_config(a.config);
  if (!a.mode.empty()) cfg.modes = {robcal::detail::parse_mode(a.mode)};
  if (a.multi && a.mono) cfg.structures = {robcal::Structure::mono, robcal::Structure::multi};
  else if (a.multi) cfg.structures = {robcal::Structure::multi};
  else if (a.mono) cfg.structures = {robcal::Structure::mono};
  if (a.seed) cfg.seed = *a.seed;
  if (a.trials) cfg.trials = *a.trials;
  cfg.validate();
  const unsigned threads = thread_count();

  const std::filesystem::path out(a.out);
  const auto result = robcal::run_experiment(cfg, threads, out / "trace");
  robcal::emit_outputs(result.records, out);

  std::size_t failures = 0, runs = 0;
  for (const auto& c : result.cells) {
    failures += c.failures();
    runs += c.trials.size();
  }
  std::printf("%zu cells, %zu trials each, %zu of %zu cell-trials failed; wrote %s\n", result.cells.size(),
              cfg.trials, failures, runs, (out / "mse.csv").string().c_str());
  if (robcal::max_failure_rate(result) > 0.5) {
    std::fprintf(stderr, "calibrate: solver failure rate above 50%% in at least one cell\n");
    return kExitFailures;
  }
  return 0;
}

int do_compare(const std::string& a, const std::string& b) {
  const auto ra = robcal::load_mse_csv(a);
  const auto rb = robcal::load_mse_csv(b);
  const auto s = robcal::compare_records(ra, rb);
  std::printf("parameter,snr_db,F,a,b,mse_a,mse_b,ratio,ratio_low,ratio_high\n");
  for (const auto& r : s.rows)
    std::printf("%s,%s,%zu,%s,%s,%s,%s,%s,%s,%s\n", r.parameter.c_str(), robcal::format_real(r.snr_db).c_str(),
                r.f_count, r.label_a.c_str(), r.label_b.c_str(), robcal::format_real(r.mse_a).c_str(),
                robcal::format_real(r.mse_b).c_str(), robcal::format_real(r.ratio).c_str(),
                robcal::format_real(r.ratio_low).c_str(), robcal::format_real(r.ratio_high).c_str());
  std::printf("# a lower in %zu of %zu cells\n", s.a_wins, s.rows.size());
  return 0;
}

int do_simulate(const std::string& config, const std::string& out, double snr, std::size_t trial) {
  const robcal::ExperimentConfig cfg = robcal::load_config(config);
  const robcal::Scenario scen = robcal::make_scenario(cfg);
  robcal::Dataset ds;
  ds.antennas = cfg.antennas;
  ds.sources = cfg.sources;
  ds.seed = cfg.seed;
  for (std::size_t f = 0; f < cfg.frequencies.size(); ++f) {
    ds.frequencies.push_back(cfg.frequencies[f]);
    ds.channels.push_back(robcal::simulate_observation(cfg, scen, snr, trial, f));
  }
  std::ofstream os(out, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write '" + out + "'");
  robcal::write_dataset(os, ds);
  if (!os) throw std::runtime_error("write failed for '" + out + "'");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Robust multi-frequency calibration experiments"};
  app.require_subcommand(1);

  RunArgs run;
  auto* run_cmd = app.add_subcommand("run", "Monte-Carlo sweep; writes mse.csv and plot_mse.py");
  run_cmd->add_option("--config", run.config, "experiment config file")->required();
  run_cmd->add_option("--out", run.out, "output directory")->required();
  run_cmd->add_option("--mode", run.mode, "restrict to one noise mode")->check(CLI::IsMember({"robust", "gaussian"}));
  run_cmd->add_flag("--multi", run.multi, "multi-frequency calibration only");
  run_cmd->add_flag("--mono", run.mono, "mono-frequency calibration only");
  std::uint64_t seed = 0;
  std::size_t trials = 0;
  auto* seed_opt = run_cmd->add_option("--seed", seed, "override the config seed");
  auto* trials_opt = run_cmd->add_option("--trials", trials, "override the trial count")->check(CLI::PositiveNumber);

  std::string csv_a, csv_b;
  auto* cmp_cmd = app.add_subcommand("compare", "MSE ratios between two mse.csv files (a over b)");
  cmp_cmd->add_option("--a", csv_a, "first mse.csv")->required();
  cmp_cmd->add_option("--b", csv_b, "second mse.csv")->required();

  std::string sim_config, sim_out;
  double sim_snr = 10.0;
  std::size_t sim_trial = 0;
  auto* sim_cmd = app.add_subcommand("simulate", "write the observed visibilities of one trial");
  sim_cmd->add_option("--config", sim_config, "experiment config file")->required();
  sim_cmd->add_option("--out", sim_out, "dataset file")->required();
  sim_cmd->add_option("--snr", sim_snr, "SNR in dB (inf for noiseless)");
  sim_cmd->add_option("--trial", sim_trial, "trial index");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*run_cmd) {
      if (*seed_opt) run.seed = seed;
      if (*trials_opt) run.trials = trials;
      return do_run(run);
    }
    if (*cmp_cmd) return do_compare(csv_a, csv_b);
    if (*sim_cmd) return do_simulate(sim_config, sim_out, sim_snr, sim_trial);
  } catch (const robcal::ConfigError& e) {
    std::fprintf(stderr, "calibrate: %s\n", e.what());
    return kExitConfig;
  } catch (const robcal::FormatError& e) {
    std::fprintf(stderr, "calibrate: %s\n", e.what());
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "calibrate: %s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "calibrate: %s\n", e.what());
    return kExitRuntime;
  }
  return 0;
}
