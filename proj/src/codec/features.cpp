#include <algorithm>
#include <cmath>
#include <complex>
#include <memory>

#include "ensemble/codec/codec.hpp"
#include "ensemble/core/error.hpp"
#include "ensemble/dsp/dsp.hpp"
#include "ensemble/kernels/kernels.hpp"

namespace ensemble::codec {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;
constexpr double kMagEps = 1e-10;
// Bins closer than this to a harmonic are left out of the noise bands.
constexpr double kHarmonicGuardBins = 2.0;

struct BandLayout {
  std::vector<std::size_t> band_of_bin;  // bins >= n_fft/2 are folded into the last band
};

BandLayout band_layout(const FeatureConfig& cfg) {
  BandLayout b;
  const std::size_t half = cfg.n_fft / 2;
  b.band_of_bin.resize(half + 1);
  for (std::size_t k = 0; k <= half; ++k)
    b.band_of_bin[k] = std::min(cfg.noise_bands - 1, k * cfg.noise_bands / half);
  return b;
}

// Mean magnitude per band over bins away from the harmonics of f0 (all bins when f0 is 0).
void band_magnitudes(std::span<const double> mag, double f0, const FeatureConfig& cfg, const BandLayout& layout,
                     std::span<double> out) {
  std::vector<double> sum(cfg.noise_bands, 0.0), count(cfg.noise_bands, 0.0);
  std::vector<double> all_sum(cfg.noise_bands, 0.0), all_count(cfg.noise_bands, 0.0);
  const double spacing = f0 * static_cast<double>(cfg.n_fft) / cfg.sample_rate;
  for (std::size_t k = 0; k < mag.size(); ++k) {
    const std::size_t b = layout.band_of_bin[k];
    all_sum[b] += mag[k];
    all_count[b] += 1.0;
    if (f0 > 0.0) {
      const double p = static_cast<double>(k);
      const double nearest = std::max(1.0, std::round(p / spacing)) * spacing;
      if (std::abs(p - nearest) < kHarmonicGuardBins) continue;
    }
    sum[b] += mag[k];
    count[b] += 1.0;
  }
  for (std::size_t b = 0; b < cfg.noise_bands; ++b)
    out[b] = count[b] > 0.0 ? sum[b] / count[b] : all_sum[b] / std::max(1.0, all_count[b]);
}

// Amplitude of a sinusoid at fractional bin p from the power of the four bins around it. A Hann
// main lobe spans two bins either side, so the sum is nearly independent of the offset; 1.5 is its
// value for an on-bin sinusoid of unit peak.
double harmonic_amplitude(std::span<const double> mag, double p) {
  const auto k0 = static_cast<std::ptrdiff_t>(std::floor(p));
  double power = 0.0;
  for (std::ptrdiff_t k = k0 - 1; k <= k0 + 2; ++k)
    if (k >= 0 && k < static_cast<std::ptrdiff_t>(mag.size())) power += mag[static_cast<std::size_t>(k)] * mag[static_cast<std::size_t>(k)];
  return std::sqrt(power / 1.5);
}

// Centered frame spectra scaled so a sinusoid of amplitude a peaks at a.
class FrameAnalyzer {
 public:
  explicit FrameAnalyzer(const FeatureConfig& cfg)
      : cfg_(cfg), fft_(cfg.n_fft), window_(dsp::hann(cfg.n_fft)), buf_(cfg.n_fft), spec_(fft_.bins()),
        mag_(fft_.bins()) {
    double s = 0.0;
    for (double w : window_) s += w;
    scale_ = 2.0 / s;
  }

  std::span<const double> frame(std::span<const double> x, std::size_t t) {
    const auto hop = static_cast<std::ptrdiff_t>(cfg_.hop());
    const std::ptrdiff_t start =
        static_cast<std::ptrdiff_t>(t) * hop + hop / 2 - static_cast<std::ptrdiff_t>(cfg_.n_fft / 2);
    for (std::size_t i = 0; i < cfg_.n_fft; ++i) {
      const std::ptrdiff_t j = start + static_cast<std::ptrdiff_t>(i);
      buf_[i] = (j >= 0 && j < static_cast<std::ptrdiff_t>(x.size())) ? x[static_cast<std::size_t>(j)] * window_[i] : 0.0;
    }
    fft_.forward(buf_, spec_);
    for (std::size_t k = 0; k < mag_.size(); ++k) mag_[k] = std::abs(spec_[k]) * scale_;
    return mag_;
  }

 private:
  const FeatureConfig& cfg_;
  dsp::RealFft fft_;
  std::vector<double> window_, buf_;
  std::vector<std::complex<double>> spec_;
  std::vector<double> mag_;
  double scale_ = 1.0;
};

}  // namespace

std::size_t FeatureConfig::hop() const {
  return static_cast<std::size_t>(std::lround(sample_rate / frame_rate));
}

void FeatureConfig::validate() const {
  require(sample_rate > 0 && frame_rate > 0.0, ErrorKind::kConfig, "features: rates must be positive");
  require(std::abs(sample_rate / frame_rate - static_cast<double>(hop())) < 1e-9, ErrorKind::kConfig,
          "features: sample_rate / frame_rate must be an integer");
  require(harmonics >= 1 && noise_bands >= 1, ErrorKind::kConfig, "features: need harmonics and noise bands");
  require(n_fft >= 2 * hop() && n_fft % 2 == 0, ErrorKind::kConfig, "features: n_fft must be even and >= 2 hops");
  require(noise_bands <= n_fft / 2, ErrorKind::kConfig, "features: more noise bands than bins");
  require(amp_floor > 0.0, ErrorKind::kConfig, "features: amp_floor must be positive");
}

Matrix analyze(std::span<const double> waveform, std::span<const double> f0, const FeatureConfig& cfg) {
  cfg.validate();
  const std::size_t frames = f0.size();
  Matrix out(frames, cfg.channels());
  FrameAnalyzer analyzer(cfg);
  const BandLayout layout = band_layout(cfg);
  const double nyquist = cfg.sample_rate / 2.0;
  const double floor_log = std::log(cfg.amp_floor);
  std::vector<double> bands(cfg.noise_bands);
  for (std::size_t t = 0; t < frames; ++t) {
    const auto mag = analyzer.frame(waveform, t);
    const bool voiced = f0[t] > 0.0;
    auto row = out.row(t);
    row[kF0Channel] = voiced ? std::log2(f0[t]) : 0.0;
    row[kVoicingChannel] = voiced ? 1.0 : 0.0;
    for (std::size_t h = 0; h < cfg.harmonics; ++h) {
      const double freq = static_cast<double>(h + 1) * f0[t];
      double amp = 0.0;
      if (voiced && freq < nyquist) {
        amp = harmonic_amplitude(mag, freq * static_cast<double>(cfg.n_fft) / cfg.sample_rate);
      }
      row[kHarmonicChannel + h] = amp > cfg.amp_floor ? std::log(amp) : floor_log;
    }
    band_magnitudes(mag, voiced ? f0[t] : 0.0, cfg, layout, bands);
    for (std::size_t b = 0; b < cfg.noise_bands; ++b)
      row[kHarmonicChannel + cfg.harmonics + b] = bands[b] > cfg.amp_floor ? std::log(bands[b]) : floor_log;
  }
  return out;
}

// ---------------------------------------------------------------- normalization

FeatureNorm FeatureNorm::fit(const std::vector<Matrix>& raw) {
  require(!raw.empty(), ErrorKind::kValidation, "feature norm: no data");
  const std::size_t c = raw.front().cols();
  std::vector<double> sum(c, 0.0), sq(c, 0.0), n(c, 0.0);
  for (const Matrix& m : raw) {
    require(m.cols() == c, ErrorKind::kValidation, "feature norm: channel count differs");
    for (std::size_t t = 0; t < m.rows(); ++t)
      for (std::size_t k = 0; k < c; ++k) {
        if (k == kF0Channel && m(t, kVoicingChannel) <= 0.5) continue;
        sum[k] += m(t, k);
        sq[k] += m(t, k) * m(t, k);
        n[k] += 1.0;
      }
  }
  FeatureNorm norm;
  norm.mean.resize(c);
  norm.std.resize(c);
  for (std::size_t k = 0; k < c; ++k) {
    require(n[k] > 0.0, ErrorKind::kDegenerateSignal, "feature norm: no voiced frames");
    const double mu = sum[k] / n[k];
    norm.mean[k] = mu;
    norm.std[k] = std::max(1e-3, std::sqrt(std::max(0.0, sq[k] / n[k] - mu * mu)));
  }
  norm.mean[kVoicingChannel] = 0.0;
  norm.std[kVoicingChannel] = 1.0;
  return norm;
}

Matrix FeatureNorm::apply(const Matrix& raw) const {
  require(raw.cols() == mean.size(), ErrorKind::kValidation, "feature norm: channel count differs");
  Matrix out(raw.rows(), raw.cols());
  for (std::size_t t = 0; t < raw.rows(); ++t)
    for (std::size_t k = 0; k < raw.cols(); ++k) {
      if (k == kF0Channel && raw(t, kVoicingChannel) <= 0.5) continue;
      out(t, k) = (raw(t, k) - mean[k]) / std[k];
    }
  return out;
}

double FeatureNorm::f0_to_norm(double hz) const {
  return hz > 0.0 ? (std::log2(hz) - mean[kF0Channel]) / std[kF0Channel] : 0.0;
}

nlohmann::json FeatureNorm::to_json() const { return {{"mean", mean}, {"std", std}}; }

FeatureNorm FeatureNorm::from_json(const nlohmann::json& j) {
  FeatureNorm n;
  n.mean = j.at("mean").get<std::vector<double>>();
  n.std = j.at("std").get<std::vector<double>>();
  require(n.mean.size() == n.std.size() && n.mean.size() > kVoicingChannel, ErrorKind::kValidation,
          "feature norm: malformed");
  return n;
}

// ---------------------------------------------------------------- vocoder

Vocoder::Vocoder(const FeatureConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  constexpr std::size_t kBank = std::size_t{1} << 16;
  const std::size_t bands = config_.noise_bands;
  bank_ = Matrix(kBank, bands);
  dsp::RealFft fft(kBank);
  std::vector<double> x(kBank);
  std::vector<std::complex<double>> spec(fft.bins()), masked(fft.bins());
  Rng rng = make_rng(seed, 0);
  for (std::size_t i = 0; i < kBank; ++i) x[i] = normal(rng);
  fft.forward(x, spec);
  // The bank is periodic, so reading it with wrap-around has no seams.
  const double bin_hz = static_cast<double>(config_.sample_rate) / static_cast<double>(kBank);
  const double band_hz = config_.sample_rate / 2.0 / static_cast<double>(bands);
  for (std::size_t b = 0; b < bands; ++b) {
    for (std::size_t k = 0; k < spec.size(); ++k) {
      const double f = static_cast<double>(k) * bin_hz;
      const bool in = f >= static_cast<double>(b) * band_hz && (f < static_cast<double>(b + 1) * band_hz || b + 1 == bands);
      masked[k] = in && k > 0 ? spec[k] : std::complex<double>(0.0, 0.0);
    }
    fft.inverse(masked, x);
    for (std::size_t i = 0; i < kBank; ++i) bank_(i, b) = x[i] / static_cast<double>(kBank);
  }
  // Calibrate each band so its analysed magnitude is 1.
  FrameAnalyzer analyzer(config_);
  const BandLayout layout = band_layout(config_);
  std::vector<double> col(kBank), mags(bands);
  const std::size_t frames = kBank / config_.hop();
  for (std::size_t b = 0; b < bands; ++b) {
    for (std::size_t i = 0; i < kBank; ++i) col[i] = bank_(i, b);
    double acc = 0.0;
    for (std::size_t t = 2; t + 2 < frames; ++t) {
      band_magnitudes(analyzer.frame(col, t), 0.0, config_, layout, mags);
      acc += mags[b];
    }
    const double level = acc / static_cast<double>(frames - 4);
    require(level > 0.0, ErrorKind::kDegenerateSignal, "vocoder: empty noise band");
    for (std::size_t i = 0; i < kBank; ++i) bank_(i, b) /= level;
  }
}

Matrix Vocoder::carriers(std::span<const double> f0, std::size_t noise_offset) const {
  const std::size_t hop = config_.hop(), frames = f0.size(), n = frames * hop;
  const std::size_t harmonics = config_.harmonics, width = controls();
  Matrix out(n, width);
  if (frames == 0) return out;
  std::vector<double> filled(f0.begin(), f0.end());
  double last = 0.0;
  for (double& f : filled) (f > 0.0) ? void(last = f) : void(f = last);
  last = 0.0;
  for (auto it = filled.rbegin(); it != filled.rend(); ++it) (*it > 0.0) ? void(last = *it) : void(*it = last);

  std::vector<double> f(n), theta(n);
  double phase = 0.0;
  const double spf = static_cast<double>(hop);
  for (std::size_t i = 0; i < n; ++i) {
    const double u = (static_cast<double>(i) + 0.5) / spf - 0.5;
    const double fl = std::floor(u);
    const auto a = static_cast<std::size_t>(std::clamp(fl, 0.0, static_cast<double>(frames - 1)));
    const auto b = std::min(a + 1, frames - 1);
    const double w = std::clamp(u - fl, 0.0, 1.0);
    f[i] = (1.0 - w) * filled[a] + w * filled[b];
    theta[i] = phase;
    phase = std::fmod(phase + kTwoPi * f[i] / config_.sample_rate, kTwoPi * 1024.0);
  }
  std::vector<double> phase0(harmonics);
  for (std::size_t h = 0; h < harmonics; ++h) phase0[h] = 0.7 * static_cast<double>(h);
  std::vector<double> harm(n * harmonics);
  kernels::harmonic_carriers(theta.data(), f.data(), phase0.data(), n, harmonics, config_.sample_rate / 2.0,
                             harm.data());
  const std::size_t bank = bank_.rows();
  for (std::size_t i = 0; i < n; ++i) {
    auto row = out.row(i);
    if (f0[i / hop] > 0.0) std::copy_n(harm.data() + i * harmonics, harmonics, row.begin());
    const auto src = bank_.row((noise_offset + i) % bank);
    std::copy(src.begin(), src.end(), row.begin() + static_cast<std::ptrdiff_t>(harmonics));
  }
  return out;
}

std::vector<double> Vocoder::render(const Matrix& amplitudes, const Matrix& carriers) const {
  nn::NoGradGuard guard;
  return linear_synthesis(nn::constant(amplitudes), carriers, 1, config_.hop()).value().storage();
}

// ---------------------------------------------------------------- synthesis op

nn::Var linear_synthesis(const nn::Var& amplitudes, const Matrix& carriers, std::size_t batch, std::size_t hop) {
  const std::size_t width = amplitudes.cols();
  require(batch > 0 && amplitudes.rows() % batch == 0, ErrorKind::kAlignment, "synthesis: rows not divisible by batch");
  const std::size_t frames = amplitudes.rows() / batch;
  require(carriers.cols() == width && carriers.rows() == amplitudes.rows() * hop, ErrorKind::kAlignment,
          "synthesis: carriers do not match the amplitudes");
  const std::size_t n = frames * hop;
  // Interpolation between frame centres, shared by forward and backward.
  std::vector<std::size_t> lo(n), hi(n);
  std::vector<double> wt(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double u = (static_cast<double>(i) + 0.5) / static_cast<double>(hop) - 0.5;
    const double fl = std::floor(u);
    lo[i] = static_cast<std::size_t>(std::clamp(fl, 0.0, static_cast<double>(frames - 1)));
    hi[i] = std::min(lo[i] + 1, frames - 1);
    wt[i] = std::clamp(u - fl, 0.0, 1.0);
  }
  const Matrix& a = amplitudes.value();
  Matrix y(batch * n, 1);
#pragma omp parallel for schedule(static)
  for (std::size_t s = 0; s < batch * n; ++s) {
    const std::size_t b = s / n, i = s % n;
    const auto r0 = a.row(b * frames + lo[i]), r1 = a.row(b * frames + hi[i]);
    const auto c = carriers.row(s);
    double acc = 0.0;
    for (std::size_t k = 0; k < width; ++k) acc += ((1.0 - wt[i]) * r0[k] + wt[i] * r1[k]) * c[k];
    y(s, 0) = acc;
  }
  auto car = std::make_shared<Matrix>(carriers);
  return nn::make_op(std::move(y), {amplitudes}, [car, lo = std::move(lo), hi = std::move(hi), wt = std::move(wt), batch,
                                                  frames, n, width](nn::Node& self) {
    Matrix& ga = self.parents[0]->ensure_grad();
    // Chunks own disjoint rows of the gradient.
#pragma omp parallel for schedule(static)
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t s = b * n + i;
        const double g = self.grad(s, 0);
        const auto c = car->row(s);
        auto g0 = ga.row(b * frames + lo[i]);
        auto g1 = ga.row(b * frames + hi[i]);
        for (std::size_t k = 0; k < width; ++k) {
          g0[k] += g * (1.0 - wt[i]) * c[k];
          g1[k] += g * wt[i] * c[k];
        }
      }
  });
}

// ---------------------------------------------------------------- stft loss

namespace {

struct StftWork {
  explicit StftWork(std::size_t win) : fft(win), window(dsp::hann(win)), buf(win), a(fft.bins()), b(fft.bins()) {}
  dsp::RealFft fft;
  std::vector<double> window, buf;
  std::vector<std::complex<double>> a, b;
};

std::size_t stft_frames(std::size_t n, std::size_t win) {
  const std::size_t hop = win / 4;
  return n < win ? 1 : 1 + (n - win) / hop;
}

void windowed(std::span<const double> x, std::size_t start, StftWork& w) {
  for (std::size_t i = 0; i < w.buf.size(); ++i) w.buf[i] = start + i < x.size() ? x[start + i] * w.window[i] : 0.0;
}

double mag(std::complex<double> z) { return std::sqrt(z.real() * z.real() + z.imag() * z.imag() + kMagEps); }

}  // namespace

nn::Var stft_loss(const nn::Var& estimate, const Matrix& target, std::size_t batch,
                  std::span<const std::size_t> resolutions, StftLossParts* parts) {
  require(estimate.cols() == 1 && target.cols() == 1 && estimate.rows() == target.rows(), ErrorKind::kValidation,
          "stft loss: estimate and target must be matching columns");
  require(batch > 0 && target.rows() % batch == 0, ErrorKind::kAlignment, "stft loss: rows not divisible by batch");
  require(!resolutions.empty(), ErrorKind::kConfig, "stft loss: no resolutions");
  for (std::size_t r : resolutions)
    require(r >= 8 && r % 4 == 0, ErrorKind::kConfig, "stft loss: window sizes must be multiples of 4");
  const std::size_t n = target.rows() / batch;
  const std::size_t jobs = batch * resolutions.size();
  const double norm = 1.0 / static_cast<double>(jobs);
  std::vector<double> sc(jobs, 0.0), lm(jobs, 0.0);
  const bool want_grad = nn::grad_enabled() && estimate.requires_grad();
  // Gradient of each job with respect to its chunk, summed per chunk afterwards.
  std::vector<std::vector<double>> grads(want_grad ? jobs : 0);
  const double* xe = estimate.value().data();
  const double* xt = target.data();

#pragma omp parallel for schedule(dynamic)
  for (std::size_t job = 0; job < jobs; ++job) {
    const std::size_t b = job / resolutions.size();
    const std::size_t win = resolutions[job % resolutions.size()], hop = win / 4;
    StftWork w(win);
    const std::span<const double> e(xe + b * n, n), t(xt + b * n, n);
    const std::size_t frames = stft_frames(n, win), bins = w.fft.bins();
    Matrix me(frames, bins), mt(frames, bins);
    std::vector<std::vector<std::complex<double>>> spec(want_grad ? frames : 0);
    double diff2 = 0.0, tgt2 = 0.0, l1 = 0.0;
    for (std::size_t f = 0; f < frames; ++f) {
      windowed(e, f * hop, w);
      w.fft.forward(w.buf, w.a);
      windowed(t, f * hop, w);
      w.fft.forward(w.buf, w.b);
      for (std::size_t k = 0; k < bins; ++k) {
        me(f, k) = mag(w.a[k]);
        mt(f, k) = mag(w.b[k]);
        const double d = mt(f, k) - me(f, k);
        diff2 += d * d;
        tgt2 += mt(f, k) * mt(f, k);
        l1 += std::abs(std::log(mt(f, k)) - std::log(me(f, k)));
      }
      if (want_grad) spec[f] = w.a;
    }
    const double count = static_cast<double>(frames * bins);
    const double diff_norm = std::sqrt(diff2), tgt_norm = std::sqrt(tgt2);
    sc[job] = diff_norm / tgt_norm;
    lm[job] = l1 / count;
    if (!want_grad) continue;
    std::vector<double>& g = grads[job];
    g.assign(n, 0.0);
    std::vector<std::complex<double>> y(bins);
    std::vector<double> back(win);
    for (std::size_t f = 0; f < frames; ++f) {
      for (std::size_t k = 0; k < bins; ++k) {
        const double m = me(f, k), d = mt(f, k) - m;
        double gm = diff_norm > 0.0 ? -d / (diff_norm * tgt_norm) : 0.0;
        const double dl = std::log(mt(f, k)) - std::log(m);
        if (dl != 0.0) gm += (dl > 0.0 ? -1.0 : 1.0) / (m * count);
        gm *= norm;
        // d|X|/dRe = Re/|X|, d|X|/dIm = Im/|X|; the c2r inverse counts interior bins twice.
        const double half = (k == 0 || 2 * k == win) ? 1.0 : 0.5;
        y[k] = spec[f][k] * (gm / m * half);
      }
      w.fft.inverse(y, back);
      for (std::size_t i = 0; i < win && f * hop + i < n; ++i) g[f * hop + i] += back[i] * w.window[i];
    }
  }

  double total = 0.0;
  StftLossParts p;
  for (std::size_t j = 0; j < jobs; ++j) {
    total += (sc[j] + lm[j]) * norm;
    p.spectral_convergence += sc[j] * norm;
    p.log_magnitude += lm[j] * norm;
  }
  if (parts) *parts = p;
  auto shared = std::make_shared<std::vector<std::vector<double>>>(std::move(grads));
  const std::size_t n_res = resolutions.size();
  return nn::make_op(Matrix(1, 1, total), {estimate}, [shared, n, n_res, batch](nn::Node& self) {
    Matrix& gx = self.parents[0]->ensure_grad();
    const double g = self.grad(0, 0);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t r = 0; r < n_res; ++r) {
        const auto& src = (*shared)[b * n_res + r];
        for (std::size_t i = 0; i < n; ++i) gx(b * n + i, 0) += g * src[i];
      }
  });
}

}  // namespace ensemble::codec
