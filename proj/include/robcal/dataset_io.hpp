#pragma once

// Columnar text dump of multi-frequency visibility data.
//
//   robcal-dataset 1
//   M <antennas> D <sources> F <frequencies> B <baselines> seed <seed>
//   frequency <index> <Hz>
//   <p> <q> <re v0> <im v0> <re v1> <im v1> <re v2> <im v2> <re v3> <im v3>
//   ...                                   (B rows per frequency block)
//
// Antenna indices are 1-based. Reals are printed with 17 significant digits,
// which round-trips IEEE doubles exactly.

#include <robcal/simulator.hpp>

#include <cstdint>
#include <cstdlib>
#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace robcal {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Dataset {
  std::size_t antennas = 0;
  std::size_t sources = 0;
  std::uint64_t seed = 0;
  std::vector<double> frequencies;
  std::vector<VisibilitySet> channels;
};

inline std::string format_real(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline void write_dataset(std::ostream& os, const Dataset& ds) {
  if (ds.frequencies.size() != ds.channels.size()) throw DimensionError("write_dataset: frequency/channel count");
  const std::size_t nb = baseline_count(ds.antennas);
  os << "robcal-dataset 1\n";
  os << "M " << ds.antennas << " D " << ds.sources << " F " << ds.frequencies.size() << " B " << nb << " seed "
     << ds.seed << "\n";
  for (std::size_t f = 0; f < ds.channels.size(); ++f) {
    const auto& vis = ds.channels[f];
    if (vis.antennas != ds.antennas || vis.size() != nb) throw DimensionError("write_dataset: channel shape");
    os << "frequency " << f << " " << format_real(ds.frequencies[f]) << "\n";
    std::size_t b = 0;
    for (const auto& bl : baselines(ds.antennas)) {
      os << bl.p + 1 << " " << bl.q + 1;
      for (int k = 0; k < 4; ++k)
        os << " " << format_real(vis.v[b](k).real()) << " " << format_real(vis.v[b](k).imag());
      os << "\n";
      ++b;
    }
  }
}

namespace detail {

inline double parse_real(const std::string& s) {
  char* end = nullptr;
  const double x = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0') throw FormatError("dataset: bad number '" + s + "'");
  return x;
}

inline std::string next_line(std::istream& is, const char* what) {
  std::string line;
  if (!std::getline(is, line)) throw FormatError(std::string("dataset: unexpected end of input reading ") + what);
  return line;
}

inline void expect_word(std::istringstream& ss, const char* word) {
  std::string w;
  if (!(ss >> w) || w != word) throw FormatError(std::string("dataset: expected '") + word + "'");
}

}  // namespace detail

inline Dataset read_dataset(std::istream& is) {
  Dataset ds;
  {
    std::istringstream ss(detail::next_line(is, "magic"));
    detail::expect_word(ss, "robcal-dataset");
    int version = 0;
    if (!(ss >> version) || version != 1) throw FormatError("dataset: unsupported version");
  }
  std::size_t nf = 0;
  std::size_t nb = 0;
  {
    std::istringstream ss(detail::next_line(is, "header"));
    detail::expect_word(ss, "M");
    ss >> ds.antennas;
    detail::expect_word(ss, "D");
    ss >> ds.sources;
    detail::expect_word(ss, "F");
    ss >> nf;
    detail::expect_word(ss, "B");
    ss >> nb;
    detail::expect_word(ss, "seed");
    ss >> ds.seed;
    if (!ss) throw FormatError("dataset: malformed header");
    if (nb != baseline_count(ds.antennas)) throw FormatError("dataset: B inconsistent with M");
  }
  const auto bls = baselines(ds.antennas);
  for (std::size_t f = 0; f < nf; ++f) {
    std::istringstream hs(detail::next_line(is, "frequency header"));
    detail::expect_word(hs, "frequency");
    std::size_t idx = 0;
    std::string freq;
    hs >> idx >> freq;
    if (!hs || idx != f) throw FormatError("dataset: bad frequency block " + std::to_string(f));
    ds.frequencies.push_back(detail::parse_real(freq));
    VisibilitySet vis(ds.antennas);
    for (std::size_t b = 0; b < nb; ++b) {
      std::istringstream rs(detail::next_line(is, "baseline row"));
      std::size_t p = 0;
      std::size_t q = 0;
      rs >> p >> q;
      if (!rs || p != bls[b].p + 1 || q != bls[b].q + 1) {
        throw FormatError("dataset: baseline row " + std::to_string(b) + " out of order");
      }
      for (int k = 0; k < 4; ++k) {
        std::string re;
        std::string im;
        rs >> re >> im;
        if (!rs) throw FormatError("dataset: short baseline row " + std::to_string(b));
        vis.v[b](k) = cplx(detail::parse_real(re), detail::parse_real(im));
      }
    }
    ds.channels.push_back(std::move(vis));
  }
  return ds;
}

}  // namespace robcal
