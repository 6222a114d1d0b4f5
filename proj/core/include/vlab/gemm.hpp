#pragma once

#include "vlab/common.hpp"

namespace vlab::detail {

// Row-major C = op(A) * op(B), with op = optional transpose.
// A is (m x k) after op, B is (k x n) after op, C is (m x n).
// When accumulate is set, C += instead of C =.
void gemm(bool trans_a, bool trans_b, Index m, Index n, Index k,
          const float* a, const float* b, float* c, bool accumulate);
void gemm(bool trans_a, bool trans_b, Index m, Index n, Index k,
          const double* a, const double* b, double* c, bool accumulate);

// Vectorized GELU kernels (erf form): y = 0.5 x (1 + erf(x/sqrt(2))) and the
// accumulating gradient acc += g * (cdf(x) + x * pdf(x)).
void vec_gelu(const float* x, float* y, Index n);
void vec_gelu(const double* x, double* y, Index n);
void vec_gelu_grad(const float* x, const float* g, float* acc, Index n);
void vec_gelu_grad(const double* x, const double* g, double* acc, Index n);

}  // namespace vlab::detail
