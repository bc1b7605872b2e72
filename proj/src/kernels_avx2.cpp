// Compiled with -mavx2 only when the toolchain supports it; dispatch.cpp
// checks the CPU at runtime before handing out this backend.
#include "lumos/kernels.hpp"

#ifdef LUMOS_HAVE_AVX2

#include <immintrin.h>

#include <cstring>

namespace lumos::kernels {
namespace {

// Deliberately mul+add rather than fmadd: bit parity with the scalar
// reference matters more here than the last bit of throughput.

void add_v(double* dst, const double* a, const double* b, size_t n) {
  size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(dst + i, _mm256_add_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  }
  for (; i < n; ++i) dst[i] = a[i] + b[i];
}

void sub_v(double* dst, const double* a, const double* b, size_t n) {
  size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(dst + i, _mm256_sub_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  }
  for (; i < n; ++i) dst[i] = a[i] - b[i];
}

void mul_v(double* dst, const double* a, const double* b, size_t n) {
  size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(dst + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  }
  for (; i < n; ++i) dst[i] = a[i] * b[i];
}

void scale_v(double* dst, const double* x, double a, size_t n) {
  __m256d av = _mm256_set1_pd(a);
  size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(dst + i, _mm256_mul_pd(av, _mm256_loadu_pd(x + i)));
  }
  for (; i < n; ++i) dst[i] = a * x[i];
}

void axpy_v(double* y, double a, const double* x, size_t n) {
  __m256d av = _mm256_set1_pd(a);
  size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d prod = _mm256_mul_pd(av, _mm256_loadu_pd(x + i));
    _mm256_storeu_pd(y + i, _mm256_add_pd(_mm256_loadu_pd(y + i), prod));
  }
  for (; i < n; ++i) y[i] = y[i] + a * x[i];
}

void matmul_v(double* c, const double* a, const double* b, size_t m, size_t n, size_t k) {
  std::memset(c, 0, m * k * sizeof(double));
  for (size_t i = 0; i < m; ++i) {
    double* crow = c + i * k;
    for (size_t p = 0; p < n; ++p) {
      double aip = a[i * n + p];
      const double* brow = b + p * k;
      __m256d av = _mm256_set1_pd(aip);
      size_t j = 0;
      for (; j + 4 <= k; j += 4) {
        __m256d prod = _mm256_mul_pd(av, _mm256_loadu_pd(brow + j));
        _mm256_storeu_pd(crow + j, _mm256_add_pd(_mm256_loadu_pd(crow + j), prod));
      }
      for (; j < k; ++j) crow[j] = crow[j] + aip * brow[j];
    }
  }
}

}  // namespace

const Backend* avx2_backend_impl() {
  static const Backend be{"avx2", add_v, sub_v, mul_v, scale_v, axpy_v, matmul_v};
  return &be;
}

}  // namespace lumos::kernels

#else

namespace lumos::kernels {
const Backend* avx2_backend_impl() { return nullptr; }
}  // namespace lumos::kernels

#endif
