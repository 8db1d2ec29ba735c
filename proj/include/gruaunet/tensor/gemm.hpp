// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>

namespace gruaunet::kernels {

// Row-major C[M,N] += op(A) * op(B). A is [M,K] (or [K,M] when trans_a),
// B is [K,N] (or [N,K] when trans_b). Loop orders keep the innermost loop
// contiguous so the compiler can vectorize it.
template <class T>
void gemm_accumulate(bool trans_a, bool trans_b, std::size_t M, std::size_t N, std::size_t K,
                     const T* A, const T* B, T* C) {
  if (!trans_a && !trans_b) {
    for (std::size_t i = 0; i < M; ++i) {
      T* c = C + i * N;
      const T* a = A + i * K;
      for (std::size_t k = 0; k < K; ++k) {
        const T av = a[k];
        if (av == T{0}) continue;
        const T* b = B + k * N;
        for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
      }
    }
  } else if (!trans_a && trans_b) {
    for (std::size_t i = 0; i < M; ++i) {
      const T* a = A + i * K;
      T* c = C + i * N;
      for (std::size_t j = 0; j < N; ++j) {
        const T* b = B + j * K;
        T acc{0};
        for (std::size_t k = 0; k < K; ++k) acc += a[k] * b[k];
        c[j] += acc;
      }
    }
  } else if (trans_a && !trans_b) {
    for (std::size_t k = 0; k < K; ++k) {
      const T* a = A + k * M;
      const T* b = B + k * N;
      for (std::size_t i = 0; i < M; ++i) {
        const T av = a[i];
        if (av == T{0}) continue;
        T* c = C + i * N;
        for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
      }
    }
  } else {
    for (std::size_t i = 0; i < M; ++i) {
      T* c = C + i * N;
      for (std::size_t j = 0; j < N; ++j) {
        T acc{0};
        for (std::size_t k = 0; k < K; ++k) acc += A[k * M + i] * B[j * K + k];
        c[j] += acc;
      }
    }
  }
}

}  // namespace gruaunet::kernels
