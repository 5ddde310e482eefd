#include <Eigen/Core>

#include "ensemble/kernels/kernels.hpp"

namespace ensemble::kernels::blocked {

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using Map = Eigen::Map<RowMajor>;

auto rows(std::size_t v) { return static_cast<Eigen::Index>(v); }

template <typename Product>
void store(double* c, std::size_t m, std::size_t n, const Product& p, bool accumulate) {
  Map out(c, rows(m), rows(n));
  if (accumulate)
    out.noalias() += p;
  else
    out.noalias() = p;
}

}  // namespace

void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate) {
  store(c, m, n, ConstMap(a, rows(m), rows(k)) * ConstMap(b, rows(k), rows(n)), accumulate);
}

void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate) {
  store(c, m, n, ConstMap(a, rows(m), rows(k)) * ConstMap(b, rows(n), rows(k)).transpose(), accumulate);
}

void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate) {
  store(c, m, n, ConstMap(a, rows(k), rows(m)).transpose() * ConstMap(b, rows(k), rows(n)), accumulate);
}

}  // namespace ensemble::kernels::blocked
