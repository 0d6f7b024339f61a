#pragma once

#include <cblas.h>

#include <cstddef>
#include <vector>

namespace scgan::nn::kernels {

// Row-major C = alpha * op(A) * op(B) + beta * C.
inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a,
                 int lda, const float* b, int ldb, float beta, float* c, int ldc) {
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

// Some OpenBLAS builds (0.3.20, SkylakeX/Cooperlake kernels) return wrong
// DGEMM results for transposed operands. Double precision only serves
// verification, so transposes are materialized and the plain NN form is used.
inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a,
                 int lda, const double* b, int ldb, double beta, double* c, int ldc) {
  std::vector<double> at, bt;
  if (trans_a) {  // a is k x m
    at.resize(static_cast<std::size_t>(m) * k);
    for (int i = 0; i < k; ++i)
      for (int j = 0; j < m; ++j) at[static_cast<std::size_t>(j) * k + i] = a[static_cast<std::size_t>(i) * lda + j];
    a = at.data();
    lda = k;
  }
  if (trans_b) {  // b is n x k
    bt.resize(static_cast<std::size_t>(k) * n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < k; ++j) bt[static_cast<std::size_t>(j) * n + i] = b[static_cast<std::size_t>(i) * ldb + j];
    b = bt.data();
    ldb = n;
  }
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

// Numerically stable in-place softmax over each of `rows` contiguous rows.
// Lives in its own translation unit so the exp loop can be vectorized.
void softmax_rows(float* data, std::size_t rows, std::size_t cols);
void softmax_rows(double* data, std::size_t rows, std::size_t cols);
// grad <- probs * (grad - <probs, grad>) row by row (softmax Jacobian product).
void softmax_backward_rows(const float* probs, float* grad, std::size_t rows, std::size_t cols);
void softmax_backward_rows(const double* probs, double* grad, std::size_t rows, std::size_t cols);

}  // namespace scgan::nn::kernels
