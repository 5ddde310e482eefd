#pragma once

#include <complex>
#include <cstddef>
#include <memory>
#include <span>
#include <vector>

#include "ensemble/core/matrix.hpp"

namespace ensemble::dsp {

/// FFTW-backed real FFT of a fixed size. Not shareable across threads; create one per thread.
class RealFft {
 public:
  explicit RealFft(std::size_t n);
  ~RealFft();
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;

  std::size_t size() const noexcept { return n_; }
  std::size_t bins() const noexcept { return n_ / 2 + 1; }

  /// out[k] = sum_n in[n] e^{-2 pi i k n / N}, k = 0..N/2.
  void forward(std::span<const double> in, std::span<std::complex<double>> out);
  /// Unnormalized complex-to-real inverse (Hermitian extension of `in`).
  void inverse(std::span<const std::complex<double>> in, std::span<double> out);

 private:
  struct Impl;
  std::size_t n_;
  std::unique_ptr<Impl> impl_;
};

/// Periodic Hann window.
std::vector<double> hann(std::size_t n);

/// Magnitude STFT, frames start at 0, hop, ... (no centering); a signal shorter than the window
/// yields one zero-padded frame. Result is frames x (n_fft/2+1).
Matrix stft_magnitude(std::span<const double> x, std::size_t n_fft, std::size_t hop);

struct F0Config {
  int sample_rate = 8000;
  double frame_rate = 50.0;
  double f0_min = 60.0;
  double f0_max = 1000.0;
  std::size_t window = 320;
  /// Frames whose RMS is below this fraction of the utterance RMS are unvoiced.
  double energy_threshold = 0.05;
  /// Frames whose best normalized autocorrelation peak is below this are unvoiced.
  double periodicity_threshold = 0.5;
};

/// Frame-wise normalized autocorrelation pitch with parabolic peak refinement. Frame t is centred
/// at sample t*hop + hop/2; the result has ceil(n / hop) entries, 0 for unvoiced frames.
std::vector<double> estimate_f0(std::span<const double> x, const F0Config& cfg = {});

struct MelConfig {
  int sample_rate = 8000;
  std::size_t n_fft = 512;
  std::size_t hop = 80;
  std::size_t n_mels = 64;
};

/// Log10 mel power spectrogram, frames x n_mels.
Matrix mel_spectrogram(std::span<const double> x, const MelConfig& cfg = {});

struct SalienceConfig {
  int sample_rate = 8000;
  std::size_t hop = 80;
  std::size_t window = 512;
  double f_low = 65.406;  // C2
  int octaves = 4;        // up to C6
  int bins_per_octave = 36;
  double energy_floor = 1e-6;
};

/// Enhanced (sub-multiple suppressed) normalized autocorrelation sampled on a log-pitch axis.
/// Rows are time columns, columns are pitch bins from f_low upwards.
Matrix pitch_salience(std::span<const double> x, const SalienceConfig& cfg = {});
double salience_bin_frequency(const SalienceConfig& cfg, std::size_t bin);

/// Local maxima in `column` that reach at least `fraction` of the column maximum and `floor`.
std::size_t count_salience_peaks(std::span<const double> column, double fraction = 0.5, double floor = 0.1);

double rms(std::span<const double> x);

}  // namespace ensemble::dsp
