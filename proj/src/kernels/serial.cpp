#include <cmath>
#include <vector>

#include "ensemble/kernels/kernels.hpp"

namespace ensemble::kernels::serial {

void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = accumulate ? c[i * n + j] : 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      c[i * n + j] = s;
    }
}

void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = accumulate ? c[i * n + j] : 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[j * k + p];
      c[i * n + j] = s;
    }
}

void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = accumulate ? c[i * n + j] : 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[p * m + i] * b[p * n + j];
      c[i * n + j] = s;
    }
}

void im2col(const double* x, double* cols, const ConvGeometry& g) {
  const std::size_t t_out = g.seq_out();
  const std::size_t width = g.col_width();
  for (std::size_t bt = 0; bt < g.batch * t_out; ++bt) {
    const std::size_t b = bt / t_out, t = bt % t_out;
    double* row = cols + bt * width;
    for (std::size_t q = 0; q < g.kernel; ++q) {
      const long src = static_cast<long>(t * g.stride + q) - static_cast<long>(g.pad);
      for (std::size_t ch = 0; ch < g.channels; ++ch)
        row[q * g.channels + ch] = (src >= 0 && src < static_cast<long>(g.seq_in))
                                       ? x[(b * g.seq_in + static_cast<std::size_t>(src)) * g.channels + ch]
                                       : 0.0;
    }
  }
}

void col2im(const double* cols, double* dx, const ConvGeometry& g) {
  const std::size_t t_out = g.seq_out();
  const std::size_t width = g.col_width();
  for (std::size_t bt = 0; bt < g.batch * t_out; ++bt) {
    const std::size_t b = bt / t_out, t = bt % t_out;
    const double* row = cols + bt * width;
    for (std::size_t q = 0; q < g.kernel; ++q) {
      const long src = static_cast<long>(t * g.stride + q) - static_cast<long>(g.pad);
      if (src < 0 || src >= static_cast<long>(g.seq_in)) continue;
      for (std::size_t ch = 0; ch < g.channels; ++ch)
        dx[(b * g.seq_in + static_cast<std::size_t>(src)) * g.channels + ch] += row[q * g.channels + ch];
    }
  }
}

void softmax_rows(double* x, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    double* v = x + r * cols;
    double mx = v[0];
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, v[c]);
    double sum = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      v[c] = std::exp(v[c] - mx);
      sum += v[c];
    }
    for (std::size_t c = 0; c < cols; ++c) v[c] /= sum;
  }
}

void normalize_rows(const double* x, double* y, double* mean, double* rstd, std::size_t rows, std::size_t cols,
                    double eps) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* v = x + r * cols;
    double mu = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mu += v[c];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (v[c] - mu) * (v[c] - mu);
    var /= static_cast<double>(cols);
    const double rs = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < cols; ++c) y[r * cols + c] = (v[c] - mu) * rs;
    mean[r] = mu;
    rstd[r] = rs;
  }
}

void harmonic_carriers(const double* theta, const double* f0, const double* phase0, std::size_t n,
                       std::size_t harmonics, double nyquist, double* out) {
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t h = 0; h < harmonics; ++h) {
      const double k = static_cast<double>(h + 1);
      out[i * harmonics + h] = (k * f0[i] < nyquist) ? std::sin(k * theta[i] + phase0[h]) : 0.0;
    }
}

void rowwise_dot(const double* a, const double* b, double* out, std::size_t rows, std::size_t cols,
                 bool accumulate) {
  for (std::size_t r = 0; r < rows; ++r) {
    double s = accumulate ? out[r] : 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += a[r * cols + c] * b[r * cols + c];
    out[r] = s;
  }
}

void frame_nccf(const double* x, std::size_t n, std::size_t hop, std::size_t win, std::size_t min_lag,
                std::size_t max_lag, std::size_t frames, double* out) {
  const std::size_t lags = max_lag + 1;
  for (std::size_t f = 0; f < frames; ++f) {
    const std::size_t s = f * hop;
    double* row = out + f * lags;
    for (std::size_t lag = 0; lag < lags; ++lag) row[lag] = 0.0;
    double e0 = 0.0;
    for (std::size_t i = 0; i < win && s + i < n; ++i) e0 += x[s + i] * x[s + i];
    for (std::size_t lag = min_lag; lag <= max_lag; ++lag) {
      double num = 0.0, e1 = 0.0;
      for (std::size_t i = 0; i < win; ++i) {
        const std::size_t p = s + i, q = s + i + lag;
        const double xp = p < n ? x[p] : 0.0;
        const double xq = q < n ? x[q] : 0.0;
        num += xp * xq;
        e1 += xq * xq;
      }
      const double den = std::sqrt(e0 * e1);
      row[lag] = den > 0.0 ? num / den : 0.0;
    }
  }
}

}  // namespace ensemble::kernels::serial
