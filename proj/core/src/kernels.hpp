#pragma once

#include <cstddef>

// Raw row-major loops behind the differentiable ops. All routines
// accumulate into the destination.
namespace tap::kernels {

/// c[m x n] += a[m x k] * b[k x n]
void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n);

/// c[m x k] += a[m x n] * b[k x n]^T
void gemm_bt(const double* a, const double* b, double* c, std::size_t m, std::size_t n, std::size_t k);

/// c[k x n] += a[m x k]^T * g[m x n]
void gemm_at(const double* a, const double* g, double* c, std::size_t m, std::size_t k, std::size_t n);

/// out[c x h x w] = bias + depthwise 3x3 (zero padding) of x.
void depthwise3x3(const double* x, const double* w, const double* bias, double* out, std::size_t c,
                  std::size_t h, std::size_t wd);

void depthwise3x3_backward_input(const double* g, const double* w, double* gx, std::size_t c, std::size_t h,
                                 std::size_t wd);

}  // namespace tap::kernels
