#include "lumos/kernels.hpp"

#include <cstring>

namespace lumos::kernels {
namespace {

void add_s(double* dst, const double* a, const double* b, size_t n) {
  for (size_t i = 0; i < n; ++i) dst[i] = a[i] + b[i];
}

void sub_s(double* dst, const double* a, const double* b, size_t n) {
  for (size_t i = 0; i < n; ++i) dst[i] = a[i] - b[i];
}

void mul_s(double* dst, const double* a, const double* b, size_t n) {
  for (size_t i = 0; i < n; ++i) dst[i] = a[i] * b[i];
}

void scale_s(double* dst, const double* x, double a, size_t n) {
  for (size_t i = 0; i < n; ++i) dst[i] = a * x[i];
}

void axpy_s(double* y, double a, const double* x, size_t n) {
  for (size_t i = 0; i < n; ++i) y[i] = y[i] + a * x[i];
}

// i-k-j order: row i of C accumulates rank-1 updates in k order, giving the
// same per-element addition sequence the vector path uses.
void matmul_s(double* c, const double* a, const double* b, size_t m, size_t n, size_t k) {
  std::memset(c, 0, m * k * sizeof(double));
  for (size_t i = 0; i < m; ++i) {
    double* crow = c + i * k;
    for (size_t p = 0; p < n; ++p) {
      double aip = a[i * n + p];
      const double* brow = b + p * k;
      for (size_t j = 0; j < k; ++j) crow[j] = crow[j] + aip * brow[j];
    }
  }
}

}  // namespace

const Backend& scalar_backend() {
  static const Backend be{"scalar", add_s, sub_s, mul_s, scale_s, axpy_s, matmul_s};
  return be;
}

}  // namespace lumos::kernels
