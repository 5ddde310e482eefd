#include <doctest.h>

#include <cmath>
#include <complex>
#include <numbers>
#include <vector>

#include "ensemble/core/rng.hpp"
#include "ensemble/dsp/dsp.hpp"

using namespace ensemble;

namespace {
std::vector<double> tone(double f, double seconds, int sr = 8000, double amp = 0.5) {
  std::vector<double> x(static_cast<std::size_t>(seconds * sr));
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = amp * std::sin(2.0 * std::numbers::pi * f * static_cast<double>(i) / sr);
  return x;
}

std::vector<double> harmonic_tone(double f, double seconds, int sr = 8000) {
  std::vector<double> x(static_cast<std::size_t>(seconds * sr), 0.0);
  for (int h = 1; h <= 6; ++h)
    for (std::size_t i = 0; i < x.size(); ++i)
      x[i] += (0.5 / h) * std::sin(2.0 * std::numbers::pi * f * h * static_cast<double>(i) / sr);
  return x;
}
}  // namespace

TEST_CASE("real fft matches a direct dft") {
  const std::size_t n = 48;
  auto rng = make_rng(11);
  std::vector<double> x(n);
  for (double& v : x) v = normal(rng);
  dsp::RealFft fft(n);
  std::vector<std::complex<double>> spec(fft.bins());
  fft.forward(x, spec);
  for (std::size_t k = 0; k < fft.bins(); ++k) {
    std::complex<double> ref = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      ref += x[i] * std::polar(1.0, -2.0 * std::numbers::pi * static_cast<double>(k * i) / static_cast<double>(n));
    CHECK(std::abs(spec[k] - ref) < 1e-10);
  }
  std::vector<double> back(n);
  fft.inverse(spec, back);
  for (std::size_t i = 0; i < n; ++i) CHECK(back[i] / static_cast<double>(n) == doctest::Approx(x[i]).epsilon(1e-12));
}

TEST_CASE("stft of a sinusoid peaks at its bin") {
  const auto x = tone(1000.0, 0.5);
  const Matrix mag = dsp::stft_magnitude(x, 256, 64);
  CHECK(mag.cols() == 129);
  CHECK(mag.rows() == (x.size() - 256) / 64 + 1);
  for (std::size_t t = 0; t < mag.rows(); ++t) {
    auto row = mag.row(t);
    CHECK(std::max_element(row.begin(), row.end()) - row.begin() == 32);
  }
}

TEST_CASE("f0 of a pure 220 Hz tone") {
  const auto f0 = dsp::estimate_f0(tone(220.0, 1.0));
  CHECK(f0.size() == 50);
  std::size_t voiced = 0;
  for (double v : f0)
    if (v > 0.0) {
      ++voiced;
      CHECK(v == doctest::Approx(220.0).epsilon(2.0 / 220.0));
    }
  CHECK(voiced >= 45);
}

TEST_CASE("f0 of a harmonic tone follows the fundamental, not a sub-octave") {
  for (double f : {110.0, 180.0, 260.0, 390.0}) {
    const auto f0 = dsp::estimate_f0(harmonic_tone(f, 0.6));
    for (std::size_t t = 2; t + 2 < f0.size(); ++t) CHECK(f0[t] == doctest::Approx(f).epsilon(0.01));
  }
}

TEST_CASE("silence is unvoiced everywhere") {
  std::vector<double> x(8000, 0.0);
  for (double v : dsp::estimate_f0(x)) CHECK(v == 0.0);
  const Matrix s = dsp::pitch_salience(x);
  for (double v : s.storage()) CHECK(v == 0.0);
}

TEST_CASE("mel spectrogram shape and silence floor") {
  const Matrix m = dsp::mel_spectrogram(tone(440.0, 1.0));
  CHECK(m.cols() == 64);
  CHECK(m.rows() == (8000 - 512) / 80 + 1);
  const Matrix z = dsp::mel_spectrogram(std::vector<double>(4000, 0.0));
  for (double v : z.storage()) CHECK(v == doctest::Approx(-10.0));
}

TEST_CASE("salience shows one trajectory for a solo and two for a duet") {
  const auto solo = harmonic_tone(220.0, 1.0);
  auto duet = harmonic_tone(220.0, 1.0);
  const auto second = harmonic_tone(277.18, 1.0);
  for (std::size_t i = 0; i < duet.size(); ++i) duet[i] += second[i];
  dsp::SalienceConfig cfg;
  const Matrix s1 = dsp::pitch_salience(solo, cfg);
  const Matrix s2 = dsp::pitch_salience(duet, cfg);
  std::size_t one = 0, two = 0, cols = 0;
  for (std::size_t t = 10; t + 10 < s1.rows(); ++t, ++cols) {
    one += dsp::count_salience_peaks(s1.row(t)) == 1;
    two += dsp::count_salience_peaks(s2.row(t)) >= 2;
  }
  CHECK(one == cols);
  CHECK(two == cols);
  // The solo peak sits at 220 Hz within one bin.
  auto row = s1.row(40);
  const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
  CHECK(std::abs(1200.0 * std::log2(dsp::salience_bin_frequency(cfg, best) / 220.0)) < 34.0);
}
