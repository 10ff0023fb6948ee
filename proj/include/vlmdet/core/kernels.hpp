#pragma once

#include <cstddef>
#include <vector>

#if defined(__AVX2__)
#include <immintrin.h>
#endif

// Plain loop kernels used by the differentiable ops. Loop order is fixed so
// that results are bitwise reproducible for a given build.
namespace vlmdet::kernels {

namespace detail {

// Row-by-row reference order: C[i][j] accumulates a[i][p] * b[p][j] for
// p ascending. The blocked paths below keep exactly this order.
template <class T>
void gemm_rows(const T* a, const T* b, T* c, std::size_t i0, std::size_t i1, std::size_t j0, std::size_t k,
               std::size_t n) {
  for (std::size_t i = i0; i < i1; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = j0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

// C[m x n] += A[m x k] * B[k x n]
template <class T>
void gemm_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  detail::gemm_rows(a, b, c, 0, m, 0, k, n);
}

#if defined(__AVX2__)
// 4x16 register tile. Separate multiply and add keep the scalar rounding.
template <>
inline void gemm_acc<float>(const float* a, const float* b, float* c, std::size_t m, std::size_t k,
                            std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    std::size_t j = 0;
    for (; j + 16 <= n; j += 16) {
      __m256 acc[4][2];
      for (int r = 0; r < 4; ++r) {
        acc[r][0] = _mm256_loadu_ps(c + (i + r) * n + j);
        acc[r][1] = _mm256_loadu_ps(c + (i + r) * n + j + 8);
      }
      for (std::size_t p = 0; p < k; ++p) {
        const __m256 b0 = _mm256_loadu_ps(b + p * n + j);
        const __m256 b1 = _mm256_loadu_ps(b + p * n + j + 8);
        for (int r = 0; r < 4; ++r) {
          const __m256 av = _mm256_set1_ps(a[(i + r) * k + p]);
          acc[r][0] = _mm256_add_ps(acc[r][0], _mm256_mul_ps(av, b0));
          acc[r][1] = _mm256_add_ps(acc[r][1], _mm256_mul_ps(av, b1));
        }
      }
      for (int r = 0; r < 4; ++r) {
        _mm256_storeu_ps(c + (i + r) * n + j, acc[r][0]);
        _mm256_storeu_ps(c + (i + r) * n + j + 8, acc[r][1]);
      }
    }
    for (; j + 8 <= n; j += 8) {
      __m256 acc[4];
      for (int r = 0; r < 4; ++r) acc[r] = _mm256_loadu_ps(c + (i + r) * n + j);
      for (std::size_t p = 0; p < k; ++p) {
        const __m256 b0 = _mm256_loadu_ps(b + p * n + j);
        for (int r = 0; r < 4; ++r)
          acc[r] = _mm256_add_ps(acc[r], _mm256_mul_ps(_mm256_set1_ps(a[(i + r) * k + p]), b0));
      }
      for (int r = 0; r < 4; ++r) _mm256_storeu_ps(c + (i + r) * n + j, acc[r]);
    }
    if (j < n) detail::gemm_rows(a, b, c, i, i + 4, j, k, n);
  }
  if (i < m) detail::gemm_rows(a, b, c, i, m, 0, k, n);
}
#endif

template <class T>
void transpose(const T* a, T* out, std::size_t rows, std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = a[i * cols + j];
}

// C[k x n] += A^T * B where A is [m x k], B is [m x n]
template <class T>
void gemm_tn_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  std::vector<T> at(m * k);
  transpose(a, at.data(), m, k);
  gemm_acc(at.data(), b, c, k, m, n);
}

// C[m x n] += A[m x k] * B^T where B is [n x k]
template <class T>
void gemm_nt_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  std::vector<T> bt(k * n);
  transpose(b, bt.data(), n, k);
  gemm_acc(a, bt.data(), c, m, k, n);
}

}  // namespace vlmdet::kernels
