#pragma once

#include <cstddef>

namespace rknet::detail {

// Row-major, accumulating: C += op(A) * op(B).

// C(M,N) += A(M,K) * B(K,N)
template <typename T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* __restrict A,
             const T* __restrict B, T* __restrict C) {
  for (std::size_t i = 0; i < M; ++i) {
    T* c = C + i * N;
    for (std::size_t k = 0; k < K; ++k) {
      const T a = A[i * K + k];
      if (a == T(0)) continue;
      const T* b = B + k * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
    }
  }
}

// C(M,N) += A(K,M)^T * B(K,N)
template <typename T>
void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const T* __restrict A,
             const T* __restrict B, T* __restrict C) {
  for (std::size_t k = 0; k < K; ++k) {
    const T* b = B + k * N;
    for (std::size_t i = 0; i < M; ++i) {
      const T a = A[k * M + i];
      if (a == T(0)) continue;
      T* c = C + i * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
    }
  }
}

// C(M,N) += A(M,K) * B(N,K)^T
template <typename T>
void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const T* __restrict A,
             const T* __restrict B, T* __restrict C) {
  for (std::size_t i = 0; i < M; ++i) {
    const T* a = A + i * K;
    for (std::size_t j = 0; j < N; ++j) {
      const T* b = B + j * K;
      T acc = 0;
      for (std::size_t k = 0; k < K; ++k) acc += a[k] * b[k];
      C[i * N + j] += acc;
    }
  }
}

}  // namespace rknet::detail
