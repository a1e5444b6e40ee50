#include "blas.hpp"

#include <Eigen/Core>

namespace nervesynth::detail {

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor, Eigen::Unaligned, Eigen::OuterStride<>>;
using Map = Eigen::Map<RowMajor, Eigen::Unaligned, Eigen::OuterStride<>>;

}  // namespace

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          double alpha, const double* a, std::size_t lda, const double* b, std::size_t ldb,
          double beta, double* c, std::size_t ldc) {
  if (m == 0 || n == 0) return;
  const auto M = static_cast<Eigen::Index>(m), N = static_cast<Eigen::Index>(n),
             K = static_cast<Eigen::Index>(k);
  Map C(c, M, N, Eigen::OuterStride<>(static_cast<Eigen::Index>(ldc)));
  if (beta == 0.0) {
    C.setZero();
  } else if (beta != 1.0) {
    C *= beta;
  }
  if (k == 0) return;
  ConstMap A(a, trans_a ? K : M, trans_a ? M : K, Eigen::OuterStride<>(static_cast<Eigen::Index>(lda)));
  ConstMap B(b, trans_b ? N : K, trans_b ? K : N, Eigen::OuterStride<>(static_cast<Eigen::Index>(ldb)));
  if (!trans_a && !trans_b) {
    C.noalias() += alpha * A * B;
  } else if (!trans_a) {
    C.noalias() += alpha * A * B.transpose();
  } else if (!trans_b) {
    C.noalias() += alpha * A.transpose() * B;
  } else {
    C.noalias() += alpha * A.transpose() * B.transpose();
  }
}

}  // namespace nervesynth::detail
