#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace lumos::kernels {

// Dense inner loops behind the tape ops. Two implementations ship: a scalar
// reference and an AVX2 variant. Both must produce bit-identical results:
// the AVX2 path uses separate multiply and add (no fused ops), matmul fixes
// an i-k-j loop order so each output element sees the same accumulation
// order, and the build disables floating-point contraction globally.
// Reductions and transcendentals stay in shared scalar code for the same
// reason.
struct Backend {
  const char* name;
  void (*add)(double* dst, const double* a, const double* b, size_t n);
  void (*sub)(double* dst, const double* a, const double* b, size_t n);
  void (*mul)(double* dst, const double* a, const double* b, size_t n);
  void (*scale)(double* dst, const double* x, double a, size_t n);
  void (*axpy)(double* y, double a, const double* x, size_t n);
  // C[m x k] = A[m x n] * B[n x k], C overwritten.
  void (*matmul)(double* c, const double* a, const double* b, size_t m, size_t n, size_t k);
};

const Backend& scalar_backend();
bool avx2_supported();             // compiled in and usable on this CPU
const Backend* avx2_backend();     // nullptr when unavailable

// Selection: LUMOS_KERNELS=scalar|avx2 wins, otherwise AVX2 when usable.
// An env value naming an unusable backend falls back to scalar with a
// warning rather than failing.
const Backend& active();
void force(const Backend* b);      // test hook; nullptr re-runs selection
std::vector<const Backend*> all_backends();

}  // namespace lumos::kernels
