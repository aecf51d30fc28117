#include "gemm.hpp"

#if __has_include(<cblas-openblas.h>)
#include <cblas-openblas.h>
#else
#include <cblas.h>
extern "C" void openblas_set_num_threads(int);
#endif

namespace hsicomp {

namespace {

struct BlasInit {
  BlasInit() { openblas_set_num_threads(1); }
};
const BlasInit blas_init;

}  // namespace

void gemm_nt(int m, int n, int k, const float* a, const float* b, float* c,
             bool accumulate) {
  cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, m, n, k, 1.0f, a, k, b,
              k, accumulate ? 1.0f : 0.0f, c, n);
}

void gemm_nt(int m, int n, int k, const double* a, const double* b, double* c,
             bool accumulate) {
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, m, n, k, 1.0, a, k, b,
              k, accumulate ? 1.0 : 0.0, c, n);
}

void gemm_tn(int m, int n, int k, const float* a, const float* b, float* c,
             bool accumulate) {
  cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, m, n, k, 1.0f, a, m, b,
              n, accumulate ? 1.0f : 0.0f, c, n);
}

void gemm_nn(int m, int n, int k, const float* a, const float* b, float* c,
             bool accumulate) {
  cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, m, n, k, 1.0f, a, k,
              b, n, accumulate ? 1.0f : 0.0f, c, n);
}

}  // namespace hsicomp
