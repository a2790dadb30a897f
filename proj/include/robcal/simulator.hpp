#pragma once

// Synthetic station data: noise-free visibilities of the calibrator sky,
// compound-Gaussian noise n = sqrt(tau) * mu, and unmodeled outlier sources.

#include <robcal/jones.hpp>
#include <robcal/random.hpp>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace robcal {

/// Speed of light, m/s.
inline constexpr double kSpeedOfLight = 299792458.0;

struct Baseline {
  std::size_t p = 0;  // 0-based, p < q
  std::size_t q = 0;
};

inline std::size_t baseline_count(std::size_t antennas) { return antennas * (antennas - 1) / 2; }

/// Lexicographic order (0,1), (0,2), ..., (M-2, M-1).
inline std::vector<Baseline> baselines(std::size_t antennas) {
  std::vector<Baseline> out;
  out.reserve(baseline_count(antennas));
  for (std::size_t p = 0; p < antennas; ++p)
    for (std::size_t q = p + 1; q < antennas; ++q) out.push_back({p, q});
  return out;
}

inline std::size_t baseline_index(std::size_t p, std::size_t q, std::size_t antennas) {
  return p * antennas - p * (p + 1) / 2 + (q - p - 1);
}

/// Per-baseline 4-vectors v_pq in lexicographic baseline order.
struct VisibilitySet {
  std::size_t antennas = 0;
  std::vector<Vec4> v;

  VisibilitySet() = default;
  explicit VisibilitySet(std::size_t m) : antennas(m), v(baseline_count(m), Vec4::Zero()) {}

  std::size_t size() const { return v.size(); }

  /// Stacked x = [v_12^T, v_13^T, ..., v_(M-1)M^T]^T.
  Eigen::VectorXcd stacked() const {
    Eigen::VectorXcd x(4 * v.size());
    for (std::size_t b = 0; b < v.size(); ++b) x.segment<4>(4 * b) = v[b];
    return x;
  }

  double squared_norm() const {
    double s = 0.0;
    for (const auto& x : v) s += x.squaredNorm();
    return s;
  }
};

/// Structured parameters at one frequency: one Faraday angle and shift per
/// source, one complex gain pair per antenna.
struct StructuredJonesParams {
  std::vector<double> faraday;
  std::vector<IonoShift> shift;
  std::vector<Vec2> gains;

  std::size_t sources() const { return faraday.size(); }
  std::size_t antennas() const { return gains.size(); }
};

/// Everything known about one frequency channel: antenna positions in
/// wavelengths and the known direction factors H_{i,p}.
struct Channel {
  double frequency = 0.0;
  std::vector<AntennaPosition> positions;
  JonesGrid direction;

  std::size_t antennas() const { return positions.size(); }
  std::size_t sources() const { return direction.sources(); }
};

/// Point source with direction cosines (l, m) and coherency C.
struct Source {
  Mat2 coherency = Mat2::Identity();
  double l = 0.0;
  double m = 0.0;
};

struct SkyModel {
  std::vector<Source> calibrators;
  std::vector<Source> outliers;

  std::vector<Mat2> calibrator_coherencies() const {
    std::vector<Mat2> c;
    for (const auto& s : calibrators) c.push_back(s.coherency);
    return c;
  }
};

/// Flux of an unpolarized-equivalent source: tr(C)/2.
inline double source_flux(const Mat2& coherency) { return 0.5 * coherency.trace().real(); }

/// Coherency from Stokes (I, Q, U, V) for linear feeds.
inline Mat2 coherency_from_stokes(double i, double q, double u, double v) {
  Mat2 c;
  c << cplx(i + q, 0.0), cplx(u, v), cplx(u, -v), cplx(i - q, 0.0);
  return c;
}

/// Known geometric factor exp(j 2 pi (u l + v m)) I for a source at (l, m).
inline Mat2 geometric_direction(const Source& s, const AntennaPosition& r) {
  return phase_matrix(2.0 * kPi * (r.u * s.l + r.v * s.m));
}

inline JonesGrid direction_factors(std::span<const Source> sources,
                                   std::span<const AntennaPosition> positions) {
  JonesGrid h(sources.size(), positions.size());
  for (std::size_t i = 0; i < sources.size(); ++i)
    for (std::size_t p = 0; p < positions.size(); ++p) h(i, p) = geometric_direction(sources[i], positions[p]);
  return h;
}

/// J_{i,p} = G_p H_{i,p} Z_{i,p} F_i for every source and antenna.
inline JonesGrid structured_jones(const StructuredJonesParams& params, const Channel& channel) {
  const std::size_t d = params.sources();
  const std::size_t m = params.antennas();
  if (params.shift.size() != d || channel.sources() != d || channel.antennas() != m ||
      channel.direction.antennas() != m) {
    throw DimensionError("structured_jones: parameter and channel dimensions disagree");
  }
  JonesGrid j(d, m);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t p = 0; p < m; ++p)
      j(i, p) = compose_jones(params.gains[p], channel.direction(i, p), params.shift[i], params.faraday[i],
                              channel.positions[p]);
  return j;
}

/// v_pq = sum_i vec(J_{i,p} C_i J_{i,q}^H) for every baseline.
inline VisibilitySet synthesize(std::span<const Mat2> coherencies, const JonesGrid& jones) {
  if (jones.sources() != coherencies.size()) {
    throw DimensionError("synthesize: " + std::to_string(coherencies.size()) + " coherencies for " +
                         std::to_string(jones.sources()) + " sources");
  }
  const std::size_t m = jones.antennas();
  VisibilitySet vis(m);
  std::size_t b = 0;
  for (std::size_t p = 0; p < m; ++p) {
    for (std::size_t q = p + 1; q < m; ++q, ++b) {
      Mat2 acc = Mat2::Zero();
      for (std::size_t i = 0; i < coherencies.size(); ++i)
        acc.noalias() += jones(i, p) * coherencies[i] * jones(i, q).adjoint();
      vis.v[b] = vec(acc);
    }
  }
  return vis;
}

inline VisibilitySet synthesize_clean(const SkyModel& sky, const StructuredJonesParams& truth,
                                      const Channel& channel) {
  if (sky.calibrators.size() != truth.sources()) {
    throw DimensionError("synthesize_clean: sky has " + std::to_string(sky.calibrators.size()) +
                         " calibrators, truth has " + std::to_string(truth.sources()));
  }
  const auto coh = sky.calibrator_coherencies();
  return synthesize(coh, structured_jones(truth, channel));
}

// ---------------------------------------------------------------------------
// Outliers

/// An unmodeled source: coherency plus its own per-antenna Jones matrices.
struct OutlierTerm {
  Mat2 coherency = Mat2::Zero();
  std::vector<Mat2> jones;
};

inline VisibilitySet inject_outliers(const VisibilitySet& vis, std::span<const OutlierTerm> outliers) {
  VisibilitySet out = vis;
  const std::size_t m = vis.antennas;
  for (const auto& o : outliers) {
    if (o.jones.size() != m) throw DimensionError("inject_outliers: outlier Jones count != antennas");
    std::size_t b = 0;
    for (std::size_t p = 0; p < m; ++p)
      for (std::size_t q = p + 1; q < m; ++q, ++b)
        out.v[b] += vec(o.jones[p] * o.coherency * o.jones[q].adjoint());
  }
  return out;
}

/// Outlier Jones with gains and known geometry only, no direction-dependent
/// ionospheric or Faraday terms.
inline OutlierTerm make_outlier_term(const Source& s, std::span<const Vec2> gains,
                                     std::span<const AntennaPosition> positions) {
  OutlierTerm t;
  t.coherency = s.coherency;
  for (std::size_t p = 0; p < positions.size(); ++p)
    t.jones.push_back(gain_matrix(gains[p]) * geometric_direction(s, positions[p]));
  return t;
}

// ---------------------------------------------------------------------------
// Noise

enum class TextureFamily { constant, inverse_gamma };

/// Texture law. inverse_gamma has unit mean: tau = (shape - 1) / Gamma(shape, 1).
struct TextureSpec {
  TextureFamily family = TextureFamily::constant;
  double shape = 2.0;
};

struct NoiseConfig {
  Mat4 omega = Mat4::Identity() / 4.0;
  TextureSpec texture;
  double sigma2 = 0.0;
};

struct NoiseDraw {
  std::vector<Vec4> noise;
  std::vector<double> texture;
};

inline double sample_texture(const TextureSpec& spec, Rng& rng) {
  switch (spec.family) {
    case TextureFamily::constant:
      return 1.0;
    case TextureFamily::inverse_gamma: {
      if (!(spec.shape > 1.0)) throw std::invalid_argument("inverse-gamma texture needs shape > 1");
      std::gamma_distribution<double> gamma(spec.shape, 1.0);
      double g = 0.0;
      while (!(g > 0.0)) g = gamma(rng);
      return (spec.shape - 1.0) / g;
    }
  }
  return 1.0;
}

inline Vec4 standard_complex_normal(Rng& rng) {
  std::normal_distribution<double> n(0.0, std::sqrt(0.5));
  Vec4 w;
  for (int k = 0; k < 4; ++k) w(k) = cplx(n(rng), n(rng));
  return w;
}

/// n_pq = sqrt(tau_pq) L w with L L^H = sigma2 * Omega.
inline NoiseDraw sample_noise(const NoiseConfig& cfg, std::size_t count, std::uint64_t seed) {
  NoiseDraw draw;
  draw.noise.assign(count, Vec4::Zero());
  draw.texture.assign(count, 1.0);
  if (cfg.sigma2 < 0.0) throw std::invalid_argument("sample_noise: negative sigma2");
  const Mat4 l = cholesky_hpd(cfg.omega) * std::sqrt(cfg.sigma2);
  Rng rng(seed);
  for (std::size_t b = 0; b < count; ++b) {
    const double tau = sample_texture(cfg.texture, rng);
    const Vec4 w = standard_complex_normal(rng);
    draw.texture[b] = tau;
    if (cfg.sigma2 > 0.0) draw.noise[b] = std::sqrt(tau) * (l * w);
  }
  return draw;
}

inline VisibilitySet add_noise(const VisibilitySet& vis, std::span<const Vec4> noise) {
  if (noise.size() != vis.size()) throw DimensionError("add_noise: size mismatch");
  VisibilitySet out = vis;
  for (std::size_t b = 0; b < vis.size(); ++b) out.v[b] += noise[b];
  return out;
}

/// Random correlated trace-one HPD matrix A A^H / tr(A A^H), A complex Gaussian.
inline Mat4 random_hpd(std::uint64_t seed) {
  Rng rng(seed);
  Mat4 a;
  for (int c = 0; c < 4; ++c) a.col(c) = standard_complex_normal(rng);
  Mat4 s = a * a.adjoint() + 0.1 * Mat4::Identity();
  return s / s.trace().real();
}

/// Noise power per entry for a target SNR: ||x||^2 / (4B 10^(snr/10)).
inline double snr_to_sigma2(const VisibilitySet& clean, double snr_db) {
  const double power = clean.squared_norm();
  if (!(power > 0.0)) throw std::invalid_argument("snr_to_sigma2: clean signal is zero");
  return power / (4.0 * static_cast<double>(clean.size()) * std::pow(10.0, snr_db / 10.0));
}

// ---------------------------------------------------------------------------
// Frequency scaling of the ground truth

/// Faraday angle and shift scale as f^-2; gains are frequency independent.
inline StructuredJonesParams scale_truth_to_frequency(const StructuredJonesParams& base, double f0, double f) {
  if (!(f > 0.0) || !(f0 > 0.0)) throw std::invalid_argument("scale_truth_to_frequency: frequency must be > 0");
  const double k = (f0 / f) * (f0 / f);
  StructuredJonesParams out = base;
  for (auto& a : out.faraday) a *= k;
  for (auto& s : out.shift) {
    s.eta *= k;
    s.zeta *= k;
  }
  return out;
}

/// Positions in wavelengths scale as f.
inline std::vector<AntennaPosition> scale_positions(std::span<const AntennaPosition> base, double f0, double f) {
  if (!(f > 0.0) || !(f0 > 0.0)) throw std::invalid_argument("scale_positions: frequency must be > 0");
  const double k = f / f0;
  std::vector<AntennaPosition> out;
  for (const auto& r : base) out.push_back({r.u * k, r.v * k});
  return out;
}

inline Channel make_channel(std::span<const Source> calibrators, std::span<const AntennaPosition> base_positions,
                            double f0, double f) {
  Channel ch;
  ch.frequency = f;
  ch.positions = scale_positions(base_positions, f0, f);
  ch.direction = direction_factors(calibrators, ch.positions);
  return ch;
}

}  // namespace robcal
