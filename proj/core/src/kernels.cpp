#include "kernels.hpp"

namespace tap::kernels {

void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = a[i * k + p];
      if (s == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += s * brow[j];
    }
  }
}

void gemm_bt(const double* a, const double* b, double* c, std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
      c[i * k + p] += acc;
    }
  }
}

void gemm_at(const double* a, const double* g, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = a[i * k + p];
      if (s == 0.0) continue;
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += s * grow[j];
    }
  }
}

void depthwise3x3(const double* x, const double* w, const double* bias, double* out, std::size_t c,
                  std::size_t h, std::size_t wd) {
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* src = x + ch * h * wd;
    const double* k = w + ch * 9;
    double* dst = out + ch * h * wd;
    for (std::size_t i = 0; i < h * wd; ++i) dst[i] = bias[ch];
    for (std::size_t di = 0; di < 3; ++di) {
      for (std::size_t dj = 0; dj < 3; ++dj) {
        const double kv = k[di * 3 + dj];
        // Output rows/cols whose tap (i+di-1, j+dj-1) stays inside the image.
        const std::size_t i0 = di == 0 ? 1 : 0, i1 = di == 2 ? h - 1 : h;
        const std::size_t j0 = dj == 0 ? 1 : 0, j1 = dj == 2 ? wd - 1 : wd;
        for (std::size_t i = i0; i < i1; ++i) {
          const double* srow = src + (i + di - 1) * wd + dj - 1;
          double* drow = dst + i * wd;
          for (std::size_t j = j0; j < j1; ++j) drow[j] += kv * srow[j];
        }
      }
    }
  }
}

void depthwise3x3_backward_input(const double* g, const double* w, double* gx, std::size_t c, std::size_t h,
                                 std::size_t wd) {
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* gc = g + ch * h * wd;
    const double* k = w + ch * 9;
    double* dst = gx + ch * h * wd;
    for (std::size_t di = 0; di < 3; ++di) {
      for (std::size_t dj = 0; dj < 3; ++dj) {
        const double kv = k[di * 3 + dj];
        const std::size_t i0 = di == 0 ? 1 : 0, i1 = di == 2 ? h - 1 : h;
        const std::size_t j0 = dj == 0 ? 1 : 0, j1 = dj == 2 ? wd - 1 : wd;
        for (std::size_t i = i0; i < i1; ++i) {
          const double* grow = gc + i * wd;
          double* drow = dst + (i + di - 1) * wd + dj - 1;
          for (std::size_t j = j0; j < j1; ++j) drow[j] += kv * grow[j];
        }
      }
    }
  }
}

}  // namespace tap::kernels
