#pragma once

#include <cstddef>

// Data-parallel inner loops. Every kernel exists twice: `serial::` is the
// reference implementation kept for tests and benchmarks, `parallel::` is the
// OpenMP version. Parallel versions only partition independent outputs, so both
// produce bit-identical results. The library multiplies matrices with the
// cache-blocked `blocked::` gemm (Eigen), which agrees with the loops to rounding.
namespace ensemble::kernels {

struct ConvGeometry {
  std::size_t batch = 1;
  std::size_t seq_in = 0;
  std::size_t channels = 0;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t pad = 0;

  std::size_t seq_out() const { return (seq_in + 2 * pad - kernel) / stride + 1; }
  std::size_t col_width() const { return kernel * channels; }
};

#define ENSEMBLE_KERNEL_DECLS                                                                                  \
  /* C[m,n] (+)= A[m,k] * B[k,n] */                                                                            \
  void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,       \
               bool accumulate);                                                                               \
  /* C[m,n] (+)= A[m,k] * B[n,k]^T */                                                                          \
  void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,       \
               bool accumulate);                                                                               \
  /* C[m,n] (+)= A[k,m]^T * B[k,n] */                                                                          \
  void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,       \
               bool accumulate);                                                                               \
  void im2col(const double* x, double* cols, const ConvGeometry& g);                                          \
  /* adjoint of im2col, accumulates into dx */                                                                 \
  void col2im(const double* cols, double* dx, const ConvGeometry& g);                                         \
  void softmax_rows(double* x, std::size_t rows, std::size_t cols);                                            \
  /* y = (x - mean) * rstd per row; mean/rstd receive the row statistics */                                   \
  void normalize_rows(const double* x, double* y, double* mean, double* rstd, std::size_t rows,               \
                      std::size_t cols, double eps);                                                           \
  /* out[n,h] = sin((h+1) * theta[n] + phase0[h]) when (h+1)*f0[n] < nyquist, else 0 */                       \
  void harmonic_carriers(const double* theta, const double* f0, const double* phase0, std::size_t n,           \
                         std::size_t harmonics, double nyquist, double* out);                                  \
  /* out[r] (+)= dot(a[r,:], b[r,:]) */                                                                        \
  void rowwise_dot(const double* a, const double* b, double* out, std::size_t rows, std::size_t cols,         \
                   bool accumulate);                                                                           \
  /* normalized cross-correlation per frame; out is frames x (max_lag + 1), frame f starts at f * hop */      \
  void frame_nccf(const double* x, std::size_t n, std::size_t hop, std::size_t win, std::size_t min_lag,      \
                  std::size_t max_lag, std::size_t frames, double* out);

namespace serial {
ENSEMBLE_KERNEL_DECLS
}  // namespace serial

namespace parallel {
ENSEMBLE_KERNEL_DECLS
}  // namespace parallel

#undef ENSEMBLE_KERNEL_DECLS

namespace blocked {
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate);
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate);
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate);
}  // namespace blocked

using blocked::gemm_nn;
using blocked::gemm_nt;
using blocked::gemm_tn;
using parallel::col2im;
using parallel::frame_nccf;
using parallel::harmonic_carriers;
using parallel::im2col;
using parallel::normalize_rows;
using parallel::rowwise_dot;
using parallel::softmax_rows;

/// Threads available to parallel kernels (1 when built without OpenMP).
int max_threads();

}  // namespace ensemble::kernels
