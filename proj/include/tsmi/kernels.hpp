#pragma once

#include <cstddef>
#include <vector>

// Plain loop kernels. Loop orders keep the innermost loop contiguous so the
// compiler can vectorize without reassociating reductions; accumulation
// order is fixed, which keeps results bit-reproducible.
namespace tsmi::kernels {

/// C[m x n] += A[m x k] * B[k x n]
template <typename R>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const R* A, const R* B, R* C) {
  for (std::size_t i = 0; i < m; ++i) {
    R* __restrict c = C + i * n;
    const R* a = A + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const R ap = a[p];
      const R* __restrict b = B + p * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += ap * b[j];
    }
  }
}

/// C[m x n] += A[k x m]^T * B[k x n]
template <typename R>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const R* A, const R* B, R* C) {
  for (std::size_t p = 0; p < k; ++p) {
    const R* a = A + p * m;
    const R* __restrict b = B + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const R ap = a[i];
      R* __restrict c = C + i * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += ap * b[j];
    }
  }
}

template <typename R>
void transpose(std::size_t rows, std::size_t cols, const R* src, R* dst) {
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
}

/// C[m x n] += A[m x k] * B[n x k]^T
template <typename R>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const R* A, const R* B, R* C) {
  std::vector<R> bt(k * n);
  transpose(n, k, B, bt.data());
  gemm_nn(m, k, n, A, bt.data(), C);
}

}  // namespace tsmi::kernels
