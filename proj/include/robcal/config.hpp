#pragma once

// Flat key = value experiment configuration. Lines starting with '#' are
// comments; lists are comma separated. Unknown keys are rejected.

#include <robcal/nsca.hpp>
#include <robcal/simulator.hpp>

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace robcal {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Structure { mono, multi };

inline const char* to_string(NoiseMode m) { return m == NoiseMode::robust ? "robust" : "gaussian"; }
inline const char* to_string(Structure s) { return s == Structure::mono ? "mono" : "multi"; }

struct ExperimentConfig {
  std::size_t antennas = 8;
  std::size_t sources = 2;
  std::size_t outliers = 4;
  double outlier_flux = 0.05;
  double outlier_extent = 0.3;    // outliers drawn in |l|, |m| <= extent
  double calibrator_extent = 0.05;
  double calibrator_polarization = 0.6;
  double array_radius = 8.0;      // wavelengths at the first frequency
  double faraday_max = 0.6;       // |theta| at the first frequency
  double shift_max = 0.04;        // |eta|, |zeta| at the first frequency
  std::vector<double> frequencies = {50e6, 100e6, 150e6, 200e6};
  std::vector<std::size_t> f_counts = {1, 2, 4};
  std::vector<double> snr_db = {-5, 0, 5, 10, 15, 20, 25};
  std::size_t trials = 200;
  std::uint64_t seed = 1;
  std::vector<NoiseMode> modes = {NoiseMode::robust, NoiseMode::gaussian};
  std::vector<Structure> structures = {Structure::multi};
  TextureFamily texture = TextureFamily::inverse_gamma;
  double texture_shape = 2.0;
  bool random_omega = false;
  double init_perturbation = 0.1;
  bool zero_shift_init = true;    // start eta, zeta at 0 instead of perturbed truth
  double rho = 1.0;
  bool rho_adapt = false;
  int nsca_max_iter = 50;
  int nsca_robust_iter = 0;       // robust-stage cap after the warm-up; 0 = nsca_max_iter
  int sca_max_iter = 500;
  int msca_max_outer = 20;
  int msca_max_middle = 500;
  bool trace = false;
  std::size_t trace_trials = 1;

  /// Throws ConfigError on any violated constraint.
  void validate() const;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const double x = std::strtod(v.c_str(), &end);
  if (v.empty() || *end != '\0') throw ConfigError("config: " + key + ": not a number: '" + v + "'");
  return x;
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos)
    throw ConfigError("config: " + key + ": not a non-negative integer: '" + v + "'");
  try {
    return std::stoull(v);
  } catch (const std::out_of_range&) {
    throw ConfigError("config: " + key + ": out of range: '" + v + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw ConfigError("config: " + key + ": expected a boolean, got '" + v + "'");
}

inline NoiseMode parse_mode(const std::string& v) {
  if (v == "robust") return NoiseMode::robust;
  if (v == "gaussian") return NoiseMode::gaussian;
  throw ConfigError("config: mode: expected robust or gaussian, got '" + v + "'");
}

inline Structure parse_structure(const std::string& v) {
  if (v == "mono") return Structure::mono;
  if (v == "multi") return Structure::multi;
  throw ConfigError("config: structure: expected mono or multi, got '" + v + "'");
}

}  // namespace detail

inline void ExperimentConfig::validate() const {
  if (antennas < 3) throw ConfigError("config: M must be >= 3");
  if (sources < 1) throw ConfigError("config: D must be >= 1");
  if (frequencies.empty()) throw ConfigError("config: frequencies must not be empty");
  for (double f : frequencies)
    if (!(f > 0.0)) throw ConfigError("config: frequencies must be positive");
  if (f_counts.empty()) throw ConfigError("config: f_counts must not be empty");
  for (std::size_t f : f_counts)
    if (f < 1 || f > frequencies.size())
      throw ConfigError("config: f_counts entries must lie in [1, " + std::to_string(frequencies.size()) + "]");
  if (snr_db.empty()) throw ConfigError("config: snr_db must not be empty");
  if (trials < 1) throw ConfigError("config: trials must be >= 1");
  if (modes.empty()) throw ConfigError("config: mode must not be empty");
  if (structures.empty()) throw ConfigError("config: structure must not be empty");
  if (texture == TextureFamily::inverse_gamma && !(texture_shape > 1.0))
    throw ConfigError("config: texture_shape must be > 1 for the inverse-gamma texture");
  if (!(rho > 0.0)) throw ConfigError("config: rho must be positive");
  if (!(init_perturbation >= 0.0)) throw ConfigError("config: init_perturbation must be >= 0");
  if (!(array_radius > 0.0)) throw ConfigError("config: array_radius must be positive");
  if (!(outlier_flux >= 0.0)) throw ConfigError("config: outlier_flux must be >= 0");
  if (!(calibrator_polarization >= 0.0 && calibrator_polarization < 1.0))
    throw ConfigError("config: calibrator_polarization must lie in [0, 1)");
  if (nsca_max_iter < 1 || sca_max_iter < 1 || msca_max_outer < 1 || msca_max_middle < 1)
    throw ConfigError("config: iteration limits must be >= 1");
}

inline ExperimentConfig parse_config(std::istream& is) {
  ExperimentConfig c;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = detail::trim(t.substr(0, eq));
    const std::string val = detail::trim(t.substr(eq + 1));
    const auto list = detail::split_list(val);
    if (key == "M") c.antennas = detail::parse_uint(key, val);
    else if (key == "D") c.sources = detail::parse_uint(key, val);
    else if (key == "outliers") c.outliers = detail::parse_uint(key, val);
    else if (key == "outlier_flux") c.outlier_flux = detail::parse_double(key, val);
    else if (key == "outlier_extent") c.outlier_extent = detail::parse_double(key, val);
    else if (key == "calibrator_extent") c.calibrator_extent = detail::parse_double(key, val);
    else if (key == "calibrator_polarization") c.calibrator_polarization = detail::parse_double(key, val);
    else if (key == "array_radius") c.array_radius = detail::parse_double(key, val);
    else if (key == "faraday_max") c.faraday_max = detail::parse_double(key, val);
    else if (key == "shift_max") c.shift_max = detail::parse_double(key, val);
    else if (key == "frequencies") {
      c.frequencies.clear();
      for (const auto& x : list) c.frequencies.push_back(detail::parse_double(key, x));
    } else if (key == "f_counts") {
      c.f_counts.clear();
      for (const auto& x : list) c.f_counts.push_back(detail::parse_uint(key, x));
    } else if (key == "snr_db") {
      c.snr_db.clear();
      for (const auto& x : list) c.snr_db.push_back(detail::parse_double(key, x));
    } else if (key == "trials") c.trials = detail::parse_uint(key, val);
    else if (key == "seed") c.seed = detail::parse_uint(key, val);
    else if (key == "mode") {
      c.modes.clear();
      for (const auto& x : list) c.modes.push_back(detail::parse_mode(x));
    } else if (key == "structure") {
      c.structures.clear();
      for (const auto& x : list) c.structures.push_back(detail::parse_structure(x));
    } else if (key == "texture") {
      if (val == "constant") c.texture = TextureFamily::constant;
      else if (val == "inverse_gamma") c.texture = TextureFamily::inverse_gamma;
      else throw ConfigError("config: texture: expected constant or inverse_gamma, got '" + val + "'");
    } else if (key == "texture_shape") c.texture_shape = detail::parse_double(key, val);
    else if (key == "omega") {
      if (val == "identity") c.random_omega = false;
      else if (val == "random") c.random_omega = true;
      else throw ConfigError("config: omega: expected identity or random, got '" + val + "'");
    } else if (key == "init_perturbation") c.init_perturbation = detail::parse_double(key, val);
    else if (key == "shift_init") {
      if (val == "zero") c.zero_shift_init = true;
      else if (val == "perturbed") c.zero_shift_init = false;
      else throw ConfigError("config: shift_init: expected zero or perturbed, got '" + val + "'");
    }
    else if (key == "rho") c.rho = detail::parse_double(key, val);
    else if (key == "rho_adapt") c.rho_adapt = detail::parse_bool(key, val);
    else if (key == "nsca_max_iter") c.nsca_max_iter = static_cast<int>(detail::parse_uint(key, val));
    else if (key == "nsca_robust_iter") c.nsca_robust_iter = static_cast<int>(detail::parse_uint(key, val));
    else if (key == "sca_max_iter") c.sca_max_iter = static_cast<int>(detail::parse_uint(key, val));
    else if (key == "msca_max_outer") c.msca_max_outer = static_cast<int>(detail::parse_uint(key, val));
    else if (key == "msca_max_middle") c.msca_max_middle = static_cast<int>(detail::parse_uint(key, val));
    else if (key == "trace") c.trace = detail::parse_bool(key, val);
    else if (key == "trace_trials") c.trace_trials = detail::parse_uint(key, val);
    else throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot open '" + path + "'");
  return parse_config(is);
}

}  // namespace robcal
