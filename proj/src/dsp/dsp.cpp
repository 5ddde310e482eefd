#include "ensemble/dsp/dsp.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <numbers>

#include <fftw3.h>

#include "ensemble/core/error.hpp"
#include "ensemble/kernels/kernels.hpp"

namespace ensemble::dsp {

namespace {
std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}
}  // namespace

struct RealFft::Impl {
  double* real = nullptr;
  fftw_complex* spec = nullptr;
  fftw_plan fwd = nullptr;
  fftw_plan inv = nullptr;
};

RealFft::RealFft(std::size_t n) : n_(n), impl_(std::make_unique<Impl>()) {
  require(n >= 2, ErrorKind::kValidation, "FFT size must be >= 2");
  std::lock_guard lock(planner_mutex());
  impl_->real = fftw_alloc_real(n);
  impl_->spec = fftw_alloc_complex(n / 2 + 1);
  impl_->fwd = fftw_plan_dft_r2c_1d(static_cast<int>(n), impl_->real, impl_->spec, FFTW_ESTIMATE);
  impl_->inv = fftw_plan_dft_c2r_1d(static_cast<int>(n), impl_->spec, impl_->real, FFTW_ESTIMATE);
}

RealFft::~RealFft() {
  std::lock_guard lock(planner_mutex());
  fftw_destroy_plan(impl_->fwd);
  fftw_destroy_plan(impl_->inv);
  fftw_free(impl_->real);
  fftw_free(impl_->spec);
}

void RealFft::forward(std::span<const double> in, std::span<std::complex<double>> out) {
  std::copy(in.begin(), in.end(), impl_->real);
  std::fill(impl_->real + in.size(), impl_->real + n_, 0.0);
  fftw_execute(impl_->fwd);
  for (std::size_t k = 0; k < bins(); ++k) out[k] = {impl_->spec[k][0], impl_->spec[k][1]};
}

void RealFft::inverse(std::span<const std::complex<double>> in, std::span<double> out) {
  for (std::size_t k = 0; k < bins(); ++k) {
    impl_->spec[k][0] = in[k].real();
    impl_->spec[k][1] = in[k].imag();
  }
  fftw_execute(impl_->inv);  // c2r destroys its input; the copy above keeps `in` intact
  std::copy(impl_->real, impl_->real + n_, out.begin());
}

std::vector<double> hann(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i)
    w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n));
  return w;
}

double rms(std::span<const double> x) {
  if (x.empty()) return 0.0;
  double s = 0.0;
  for (double v : x) s += v * v;
  return std::sqrt(s / static_cast<double>(x.size()));
}

Matrix stft_magnitude(std::span<const double> x, std::size_t n_fft, std::size_t hop) {
  const std::size_t frames = x.size() < n_fft ? 1 : (x.size() - n_fft) / hop + 1;
  const std::size_t bins = n_fft / 2 + 1;
  const auto window = hann(n_fft);
  Matrix out(frames, bins);
#pragma omp parallel
  {
    RealFft fft(n_fft);
    std::vector<double> buf(n_fft);
    std::vector<std::complex<double>> spec(bins);
#pragma omp for schedule(static)
    for (long f = 0; f < static_cast<long>(frames); ++f) {
      const std::size_t s = static_cast<std::size_t>(f) * hop;
      for (std::size_t i = 0; i < n_fft; ++i) buf[i] = (s + i < x.size() ? x[s + i] : 0.0) * window[i];
      fft.forward(buf, spec);
      for (std::size_t k = 0; k < bins; ++k) out(static_cast<std::size_t>(f), k) = std::abs(spec[k]);
    }
  }
  return out;
}

namespace {

// Windowed-sinc interpolation of a lag sequence (kInterpTaps each side), tabulated for positions
// on a grid of 1/kPhases lag.
constexpr int kInterpTaps = 8;
constexpr int kPhases = 4;

struct SincTable {
  double w[kPhases][2 * kInterpTaps];
  SincTable() {
    for (int p = 0; p < kPhases; ++p)
      for (int t = 0; t < 2 * kInterpTaps; ++t) {
        const double d = static_cast<double>(p) / kPhases + static_cast<double>(kInterpTaps - 1 - t);
        const double sinc = std::abs(d) < 1e-12 ? 1.0 : std::sin(std::numbers::pi * d) / (std::numbers::pi * d);
        w[p][t] = sinc * (0.5 + 0.5 * std::cos(std::numbers::pi * d / kInterpTaps));
      }
  }
};

// Value at lag base + phase / kPhases.
double sinc_interp(const double* r, std::size_t n, std::size_t base, int phase) {
  static const SincTable table;
  double acc = 0.0;
  const long j0 = static_cast<long>(base) - kInterpTaps + 1;
  for (int t = 0; t < 2 * kInterpTaps; ++t) {
    const long j = j0 + t;
    if (j < 0 || j >= static_cast<long>(n)) continue;
    acc += r[j] * table.w[phase][t];
  }
  return acc;
}

}  // namespace

std::vector<double> estimate_f0(std::span<const double> x, const F0Config& cfg) {
  const std::size_t hop = static_cast<std::size_t>(std::lround(cfg.sample_rate / cfg.frame_rate));
  const std::size_t frames = (x.size() + hop - 1) / hop;
  std::vector<double> f0(frames, 0.0);
  const double utter = rms(x);
  if (frames == 0 || utter <= 0.0) return f0;

  const std::size_t min_lag = static_cast<std::size_t>(std::floor(cfg.sample_rate / cfg.f0_max));
  const std::size_t max_lag = static_cast<std::size_t>(std::ceil(cfg.sample_rate / cfg.f0_min));
  // Integer lags are computed with margin so that interpolation near the ends sees real values.
  const std::size_t lo_lag = min_lag > kInterpTaps ? min_lag - kInterpTaps : 1;
  const std::size_t hi_lag = max_lag + kInterpTaps;
  const std::size_t lead = cfg.window / 2 > hop / 2 ? cfg.window / 2 - hop / 2 : 0;
  std::vector<double> padded(lead + x.size() + cfg.window + hi_lag, 0.0);
  std::copy(x.begin(), x.end(), padded.begin() + static_cast<long>(lead));

  const std::size_t lags = hi_lag + 1;
  std::vector<double> nccf(frames * lags);
  kernels::frame_nccf(padded.data(), padded.size(), hop, cfg.window, lo_lag, hi_lag, frames, nccf.data());

  // Correlation peaks of high partials are narrower than one lag step, so candidates are searched
  // on a quarter-lag grid of the band-limited interpolation.
  constexpr double kStep = 1.0 / kPhases;
  const auto grid = static_cast<std::size_t>((static_cast<double>(max_lag - min_lag)) / kStep) + 1;
  std::vector<double> fine(grid);
  // Refined lags of every periodic local peak, per frame, for the continuity pass.
  std::vector<std::vector<double>> candidates(frames);
  for (std::size_t t = 0; t < frames; ++t) {
    const std::size_t s = t * hop;
    const std::size_t e = std::min(x.size(), s + hop);
    if (rms(x.subspan(s, e - s)) < cfg.energy_threshold * utter) continue;

    const double* r = nccf.data() + t * lags;
    double best = 0.0;
    for (std::size_t i = 0; i < grid; ++i) {
      fine[i] = sinc_interp(r, lags, min_lag + i / kPhases, static_cast<int>(i % kPhases));
      best = std::max(best, fine[i]);
    }
    if (best < cfg.periodicity_threshold) continue;
    auto refine = [&](std::size_t i) {
      const double a = fine[i - 1], b = fine[i], c = fine[i + 1];
      const double den = a - 2.0 * b + c;
      const double delta = std::abs(den) > 1e-12 ? std::clamp(0.5 * (a - c) / den, -0.5, 0.5) : 0.0;
      return static_cast<double>(min_lag) + kStep * (static_cast<double>(i) + delta);
    };
    // Smallest-lag local peak close to the global maximum avoids sub-octave picks.
    double pick = 0.0;
    for (std::size_t i = 1; i + 1 < grid; ++i) {
      if (fine[i] < fine[i - 1] || fine[i] < fine[i + 1] || fine[i] < cfg.periodicity_threshold) continue;
      const double lag = refine(i);
      candidates[t].push_back(lag);
      if (pick == 0.0 && fine[i] >= 0.9 * best) pick = lag;
    }
    if (pick > 0.0) f0[t] = cfg.sample_rate / pick;
  }

  // A frame whose pitch jumps by more than a fourth away from its voiced neighbours switches to the
  // candidate peak closest to their median, if one lies within a minor third of it.
  constexpr std::ptrdiff_t kReach = 3;
  const std::vector<double> first = f0;
  std::vector<double> near;
  for (std::size_t t = 0; t < frames; ++t) {
    if (first[t] <= 0.0) continue;
    near.clear();
    for (std::ptrdiff_t d = -kReach; d <= kReach; ++d) {
      const auto u = static_cast<std::ptrdiff_t>(t) + d;
      if (d == 0 || u < 0 || u >= static_cast<std::ptrdiff_t>(frames)) continue;
      if (first[static_cast<std::size_t>(u)] > 0.0) near.push_back(std::log2(first[static_cast<std::size_t>(u)]));
    }
    if (near.size() < 3) continue;
    std::nth_element(near.begin(), near.begin() + static_cast<long>(near.size() / 2), near.end());
    const double med = near[near.size() / 2];
    if (std::abs(std::log2(first[t]) - med) < 5.0 / 12.0) continue;
    double best_dist = 0.25;
    for (double lag : candidates[t]) {
      const double dist = std::abs(std::log2(cfg.sample_rate / lag) - med);
      if (dist < best_dist) {
        best_dist = dist;
        f0[t] = cfg.sample_rate / lag;
      }
    }
  }
  return f0;
}

namespace {
double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }
}  // namespace

Matrix mel_spectrogram(std::span<const double> x, const MelConfig& cfg) {
  const Matrix mag = stft_magnitude(x, cfg.n_fft, cfg.hop);
  const std::size_t bins = cfg.n_fft / 2 + 1;
  const double nyq = cfg.sample_rate / 2.0;
  std::vector<double> edges(cfg.n_mels + 2);
  for (std::size_t i = 0; i < edges.size(); ++i)
    edges[i] = mel_to_hz(hz_to_mel(nyq) * static_cast<double>(i) / static_cast<double>(cfg.n_mels + 1));
  Matrix fb(cfg.n_mels, bins);
  for (std::size_t m = 0; m < cfg.n_mels; ++m)
    for (std::size_t k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * cfg.sample_rate / static_cast<double>(cfg.n_fft);
      const double up = (f - edges[m]) / (edges[m + 1] - edges[m]);
      const double down = (edges[m + 2] - f) / (edges[m + 2] - edges[m + 1]);
      fb(m, k) = std::max(0.0, std::min(up, down));
    }
  Matrix out(mag.rows(), cfg.n_mels);
  for (std::size_t t = 0; t < mag.rows(); ++t)
    for (std::size_t m = 0; m < cfg.n_mels; ++m) {
      double p = 0.0;
      for (std::size_t k = 0; k < bins; ++k) p += fb(m, k) * mag(t, k) * mag(t, k);
      out(t, m) = std::log10(p + 1e-10);
    }
  return out;
}

double salience_bin_frequency(const SalienceConfig& cfg, std::size_t bin) {
  return cfg.f_low * std::pow(2.0, static_cast<double>(bin) / cfg.bins_per_octave);
}

Matrix pitch_salience(std::span<const double> x, const SalienceConfig& cfg) {
  const std::size_t n_bins = static_cast<std::size_t>(cfg.octaves * cfg.bins_per_octave);
  const std::size_t frames = (x.size() + cfg.hop - 1) / cfg.hop;
  const double f_high = salience_bin_frequency(cfg, n_bins - 1);
  const std::size_t min_lag = static_cast<std::size_t>(std::floor(cfg.sample_rate / f_high)) - 1;
  const std::size_t max_lag = 3 * static_cast<std::size_t>(std::ceil(cfg.sample_rate / cfg.f_low)) + 2;

  const std::size_t lead = cfg.window / 2;
  std::vector<double> padded(lead + x.size() + cfg.window + max_lag, 0.0);
  std::copy(x.begin(), x.end(), padded.begin() + static_cast<long>(lead));
  std::vector<double> nccf(frames * (max_lag + 1));
  kernels::frame_nccf(padded.data(), padded.size(), cfg.hop, cfg.window, min_lag, max_lag, frames, nccf.data());

  Matrix out(frames, n_bins);
  std::vector<double> pos(max_lag + 1), enh(max_lag + 1);
  auto sample = [](const std::vector<double>& r, double lag) {
    const auto i = static_cast<std::size_t>(std::floor(lag));
    if (i + 1 >= r.size()) return 0.0;
    const double frac = lag - static_cast<double>(i);
    return (1.0 - frac) * r[i] + frac * r[i + 1];
  };
  for (std::size_t t = 0; t < frames; ++t) {
    const std::size_t s = t * cfg.hop;
    double energy = 0.0;
    for (std::size_t i = 0; i < cfg.window; ++i) energy += padded[s + i] * padded[s + i];
    if (energy / static_cast<double>(cfg.window) < cfg.energy_floor) continue;
    const double* r = nccf.data() + t * (max_lag + 1);
    for (std::size_t lag = 0; lag <= max_lag; ++lag) pos[lag] = std::max(0.0, r[lag]);
    // Remove the peaks repeated at integer multiples of each period.
    for (std::size_t lag = 0; lag <= max_lag; ++lag) {
      const double l = static_cast<double>(lag);
      enh[lag] = std::max(0.0, pos[lag] - sample(pos, l / 2.0) - sample(pos, l / 3.0));
    }
    for (std::size_t b = 0; b < n_bins; ++b) {
      const double lag = cfg.sample_rate / salience_bin_frequency(cfg, b);
      out(t, b) = sample(enh, lag);
    }
  }
  return out;
}

std::size_t count_salience_peaks(std::span<const double> column, double fraction, double floor) {
  if (column.empty()) return 0;
  const double mx = *std::max_element(column.begin(), column.end());
  if (mx < floor) return 0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < column.size(); ++i) {
    const double left = i > 0 ? column[i - 1] : -1.0;
    const double right = i + 1 < column.size() ? column[i + 1] : -1.0;
    if (column[i] > left && column[i] >= right && column[i] >= fraction * mx && column[i] >= floor) ++count;
  }
  return count;
}

}  // namespace ensemble::dsp
