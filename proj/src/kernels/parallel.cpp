#include <cmath>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "ensemble/kernels/kernels.hpp"

namespace ensemble::kernels {

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

namespace parallel {

namespace {
// Below this many multiply-adds a parallel region costs more than it saves.
constexpr std::size_t kMinParallelWork = 1 << 15;
}  // namespace

void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate) {
  const long rows = static_cast<long>(m);
#pragma omp parallel for schedule(static) if (m * k * n > kMinParallelWork)
  for (long i = 0; i < rows; ++i) {
    double* __restrict ci = c + i * n;
    if (!accumulate)
      for (std::size_t j = 0; j < n; ++j) ci[j] = 0.0;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = ai[p];
      const double* __restrict bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += s * bp[j];
    }
  }
}

void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate) {
  std::vector<double> bt(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  gemm_nn(a, bt.data(), c, m, k, n, accumulate);
}

void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate) {
  const long rows = static_cast<long>(m);
#pragma omp parallel for schedule(static) if (m * k * n > kMinParallelWork)
  for (long i = 0; i < rows; ++i) {
    double* __restrict ci = c + i * n;
    if (!accumulate)
      for (std::size_t j = 0; j < n; ++j) ci[j] = 0.0;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = a[p * m + static_cast<std::size_t>(i)];
      const double* __restrict bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += s * bp[j];
    }
  }
}

void im2col(const double* x, double* cols, const ConvGeometry& g) {
  const std::size_t t_out = g.seq_out();
  const std::size_t width = g.col_width();
  const long total = static_cast<long>(g.batch * t_out);
#pragma omp parallel for schedule(static) if (total * width > kMinParallelWork)
  for (long bt = 0; bt < total; ++bt) {
    const std::size_t b = static_cast<std::size_t>(bt) / t_out, t = static_cast<std::size_t>(bt) % t_out;
    double* row = cols + static_cast<std::size_t>(bt) * width;
    for (std::size_t q = 0; q < g.kernel; ++q) {
      const long src = static_cast<long>(t * g.stride + q) - static_cast<long>(g.pad);
      double* dst = row + q * g.channels;
      if (src < 0 || src >= static_cast<long>(g.seq_in)) {
        for (std::size_t ch = 0; ch < g.channels; ++ch) dst[ch] = 0.0;
      } else {
        const double* s = x + (b * g.seq_in + static_cast<std::size_t>(src)) * g.channels;
        for (std::size_t ch = 0; ch < g.channels; ++ch) dst[ch] = s[ch];
      }
    }
  }
}

void col2im(const double* cols, double* dx, const ConvGeometry& g) {
  // Parallel over batch items: windows of different sequences never overlap.
  const std::size_t t_out = g.seq_out();
  const std::size_t width = g.col_width();
  const long batch = static_cast<long>(g.batch);
#pragma omp parallel for schedule(static) if (g.batch * t_out * width > kMinParallelWork)
  for (long b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < t_out; ++t) {
      const double* row = cols + (static_cast<std::size_t>(b) * t_out + t) * width;
      for (std::size_t q = 0; q < g.kernel; ++q) {
        const long src = static_cast<long>(t * g.stride + q) - static_cast<long>(g.pad);
        if (src < 0 || src >= static_cast<long>(g.seq_in)) continue;
        double* d = dx + (static_cast<std::size_t>(b) * g.seq_in + static_cast<std::size_t>(src)) * g.channels;
        for (std::size_t ch = 0; ch < g.channels; ++ch) d[ch] += row[q * g.channels + ch];
      }
    }
  }
}

void softmax_rows(double* x, std::size_t rows, std::size_t cols) {
  const long r_count = static_cast<long>(rows);
#pragma omp parallel for schedule(static) if (rows * cols > kMinParallelWork)
  for (long r = 0; r < r_count; ++r) serial::softmax_rows(x + static_cast<std::size_t>(r) * cols, 1, cols);
}

void normalize_rows(const double* x, double* y, double* mean, double* rstd, std::size_t rows, std::size_t cols,
                    double eps) {
  const long r_count = static_cast<long>(rows);
#pragma omp parallel for schedule(static) if (rows * cols > kMinParallelWork)
  for (long r = 0; r < r_count; ++r) {
    const std::size_t off = static_cast<std::size_t>(r);
    serial::normalize_rows(x + off * cols, y + off * cols, mean + off, rstd + off, 1, cols, eps);
  }
}

void harmonic_carriers(const double* theta, const double* f0, const double* phase0, std::size_t n,
                       std::size_t harmonics, double nyquist, double* out) {
  const long count = static_cast<long>(n);
#pragma omp parallel for schedule(static) if (n * harmonics > kMinParallelWork)
  for (long i = 0; i < count; ++i) {
    const std::size_t s = static_cast<std::size_t>(i);
    for (std::size_t h = 0; h < harmonics; ++h) {
      const double k = static_cast<double>(h + 1);
      out[s * harmonics + h] = (k * f0[s] < nyquist) ? std::sin(k * theta[s] + phase0[h]) : 0.0;
    }
  }
}

void rowwise_dot(const double* a, const double* b, double* out, std::size_t rows, std::size_t cols,
                 bool accumulate) {
  const long count = static_cast<long>(rows);
#pragma omp parallel for schedule(static) if (rows * cols > kMinParallelWork)
  for (long r = 0; r < count; ++r) {
    const std::size_t s = static_cast<std::size_t>(r);
    serial::rowwise_dot(a + s * cols, b + s * cols, out + s, 1, cols, accumulate);
  }
}

void frame_nccf(const double* x, std::size_t n, std::size_t hop, std::size_t win, std::size_t min_lag,
                std::size_t max_lag, std::size_t frames, double* out) {
  const long count = static_cast<long>(frames);
  const std::size_t lags = max_lag + 1;
#pragma omp parallel for schedule(dynamic, 16)
  for (long f = 0; f < count; ++f) {
    // Shift the signal so this frame starts at index 0 of the serial kernel.
    const std::size_t s = static_cast<std::size_t>(f) * hop;
    const std::size_t avail = s < n ? n - s : 0;
    serial::frame_nccf(x + (s < n ? s : 0), avail, hop, win, min_lag, max_lag, 1,
                       out + static_cast<std::size_t>(f) * lags);
  }
}

}  // namespace parallel
}  // namespace ensemble::kernels
