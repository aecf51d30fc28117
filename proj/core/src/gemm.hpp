#pragma once

#include <cstddef>

namespace hsicomp {

// Row-major C[m x n] = A[m x k] * B[n x k]^T, optionally accumulating into C.
// Single-threaded BLAS underneath so results are bitwise reproducible
// regardless of the caller's thread count.
void gemm_nt(int m, int n, int k, const float* a, const float* b, float* c,
             bool accumulate = false);
void gemm_nt(int m, int n, int k, const double* a, const double* b, double* c,
             bool accumulate = false);

// C[m x n] = A[k x m]^T * B[k x n] (both row-major), for weight gradients.
void gemm_tn(int m, int n, int k, const float* a, const float* b, float* c,
             bool accumulate = false);

// C[m x n] = A[m x k] * B[k x n], plain row-major product.
void gemm_nn(int m, int n, int k, const float* a, const float* b, float* c,
             bool accumulate = false);

}  // namespace hsicomp
