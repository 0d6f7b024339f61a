// Compiled with vector math enabled (see src/CMakeLists.txt). Keep this file
// free of anything that depends on strict IEEE semantics such as isfinite.
#include <algorithm>
#include <cmath>

#include "kernels.hpp"

namespace scgan::nn::kernels {
namespace {

template <typename T>
inline void softmax_rows_impl(T* data, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    T* row = data + r * cols;
    T peak = row[0];
    for (std::size_t j = 1; j < cols; ++j) peak = std::max(peak, row[j]);
    for (std::size_t j = 0; j < cols; ++j) row[j] = std::exp(row[j] - peak);
    T sum = 0;
    for (std::size_t j = 0; j < cols; ++j) sum += row[j];
    const T inv = T(1) / sum;
    for (std::size_t j = 0; j < cols; ++j) row[j] *= inv;
  }
}

template <typename T>
inline void softmax_backward_rows_impl(const T* probs, T* grad, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* a = probs + r * cols;
    T* d = grad + r * cols;
    T dot = 0;
    for (std::size_t j = 0; j < cols; ++j) dot += a[j] * d[j];
    for (std::size_t j = 0; j < cols; ++j) d[j] = a[j] * (d[j] - dot);
  }
}

}  // namespace

// Runtime dispatch picks the widest vector exp the CPU supports.
__attribute__((target_clones("avx512f", "avx2", "default")))
void softmax_rows(float* data, std::size_t rows, std::size_t cols) {
  softmax_rows_impl(data, rows, cols);
}

__attribute__((target_clones("avx512f", "avx2", "default")))
void softmax_rows(double* data, std::size_t rows, std::size_t cols) {
  softmax_rows_impl(data, rows, cols);
}

__attribute__((target_clones("avx512f", "avx2", "default")))
void softmax_backward_rows(const float* probs, float* grad, std::size_t rows, std::size_t cols) {
  softmax_backward_rows_impl(probs, grad, rows, cols);
}

__attribute__((target_clones("avx512f", "avx2", "default")))
void softmax_backward_rows(const double* probs, double* grad, std::size_t rows, std::size_t cols) {
  softmax_backward_rows_impl(probs, grad, rows, cols);
}

}  // namespace scgan::nn::kernels
