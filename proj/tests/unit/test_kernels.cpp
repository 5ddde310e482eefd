#include <doctest.h>

#include <vector>

#include "ensemble/core/rng.hpp"
#include "ensemble/kernels/kernels.hpp"

using namespace ensemble;
namespace k = ensemble::kernels;

namespace {
std::vector<double> random_vec(std::size_t n, std::uint64_t seed) {
  auto rng = make_rng(seed);
  std::vector<double> v(n);
  for (double& x : v) x = normal(rng);
  return v;
}
}  // namespace

TEST_CASE("gemm variants agree bitwise between serial and parallel") {
  const std::size_t m = 67, kk = 129, n = 71;
  auto a = random_vec(m * kk, 1), b = random_vec(kk * n, 2), bt = random_vec(n * kk, 3), at = random_vec(kk * m, 4);
  for (bool acc : {false, true}) {
    std::vector<double> c1(m * n, 0.5), c2(m * n, 0.5);
    k::serial::gemm_nn(a.data(), b.data(), c1.data(), m, kk, n, acc);
    k::parallel::gemm_nn(a.data(), b.data(), c2.data(), m, kk, n, acc);
    CHECK(c1 == c2);
    std::fill(c1.begin(), c1.end(), 0.5);
    std::fill(c2.begin(), c2.end(), 0.5);
    k::serial::gemm_nt(a.data(), bt.data(), c1.data(), m, kk, n, acc);
    k::parallel::gemm_nt(a.data(), bt.data(), c2.data(), m, kk, n, acc);
    CHECK(c1 == c2);
    std::fill(c1.begin(), c1.end(), 0.5);
    std::fill(c2.begin(), c2.end(), 0.5);
    k::serial::gemm_tn(at.data(), b.data(), c1.data(), m, kk, n, acc);
    k::parallel::gemm_tn(at.data(), b.data(), c2.data(), m, kk, n, acc);
    CHECK(c1 == c2);
  }
}

TEST_CASE("gemm_nn matches a hand computed product") {
  const std::vector<double> a{1, 2, 3, 4, 5, 6};  // 2x3
  const std::vector<double> b{7, 8, 9, 10, 11, 12};  // 3x2
  std::vector<double> c(4);
  k::gemm_nn(a.data(), b.data(), c.data(), 2, 3, 2, false);
  CHECK(c == std::vector<double>{58, 64, 139, 154});
}

TEST_CASE("col2im is the adjoint of im2col") {
  k::ConvGeometry g{3, 17, 5, 4, 2, 1};
  const std::size_t nx = g.batch * g.seq_in * g.channels, nc = g.batch * g.seq_out() * g.col_width();
  auto x = random_vec(nx, 5), c = random_vec(nc, 6);
  std::vector<double> cols_s(nc), cols_p(nc), dx_s(nx, 0.0), dx_p(nx, 0.0);
  k::serial::im2col(x.data(), cols_s.data(), g);
  k::parallel::im2col(x.data(), cols_p.data(), g);
  CHECK(cols_s == cols_p);
  k::serial::col2im(c.data(), dx_s.data(), g);
  k::parallel::col2im(c.data(), dx_p.data(), g);
  CHECK(dx_s == dx_p);
  double lhs = 0.0, rhs = 0.0;
  for (std::size_t i = 0; i < nc; ++i) lhs += cols_s[i] * c[i];
  for (std::size_t i = 0; i < nx; ++i) rhs += x[i] * dx_s[i];
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("row kernels agree between serial and parallel") {
  const std::size_t rows = 300, cols = 130;
  auto x = random_vec(rows * cols, 7), y = random_vec(rows * cols, 8);
  auto s1 = x, s2 = x;
  k::serial::softmax_rows(s1.data(), rows, cols);
  k::parallel::softmax_rows(s2.data(), rows, cols);
  CHECK(s1 == s2);
  double row_sum = 0.0;
  for (std::size_t c = 0; c < cols; ++c) row_sum += s1[c];
  CHECK(row_sum == doctest::Approx(1.0).epsilon(1e-12));

  std::vector<double> n1(rows * cols), n2(rows * cols), m1(rows), m2(rows), r1(rows), r2(rows);
  k::serial::normalize_rows(x.data(), n1.data(), m1.data(), r1.data(), rows, cols, 1e-5);
  k::parallel::normalize_rows(x.data(), n2.data(), m2.data(), r2.data(), rows, cols, 1e-5);
  CHECK(n1 == n2);
  CHECK(r1 == r2);

  std::vector<double> d1(rows, 1.0), d2(rows, 1.0);
  k::serial::rowwise_dot(x.data(), y.data(), d1.data(), rows, cols, true);
  k::parallel::rowwise_dot(x.data(), y.data(), d2.data(), rows, cols, true);
  CHECK(d1 == d2);
}

TEST_CASE("harmonic carriers zero out partials above nyquist") {
  const std::size_t n = 500, h = 8;
  std::vector<double> theta(n), f0(n), phase(h);
  for (std::size_t i = 0; i < n; ++i) {
    theta[i] = 0.01 * static_cast<double>(i);
    f0[i] = 100.0 + static_cast<double>(i);
  }
  for (std::size_t j = 0; j < h; ++j) phase[j] = 0.3 * static_cast<double>(j);
  std::vector<double> o1(n * h), o2(n * h);
  k::serial::harmonic_carriers(theta.data(), f0.data(), phase.data(), n, h, 4000.0, o1.data());
  k::parallel::harmonic_carriers(theta.data(), f0.data(), phase.data(), n, h, 4000.0, o2.data());
  CHECK(o1 == o2);
  // f0 = 599 Hz: harmonic 7 (4193 Hz) is above nyquist.
  CHECK(o1[499 * h + 6] == 0.0);
  CHECK(o1[499 * h + 5] != 0.0);
}

TEST_CASE("frame nccf agrees between serial and parallel and peaks at the period") {
  const std::size_t n = 4000, hop = 160, win = 320;
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = std::sin(2.0 * 3.141592653589793 * 200.0 * static_cast<double>(i) / 8000.0);
  const std::size_t frames = 20, max_lag = 133;
  std::vector<double> o1(frames * (max_lag + 1)), o2(frames * (max_lag + 1));
  k::serial::frame_nccf(x.data(), n, hop, win, 8, max_lag, frames, o1.data());
  k::parallel::frame_nccf(x.data(), n, hop, win, 8, max_lag, frames, o2.data());
  CHECK(o1 == o2);
  CHECK(o1[3 * (max_lag + 1) + 40] == doctest::Approx(1.0).epsilon(1e-9));
}
