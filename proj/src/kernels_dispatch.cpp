#include "lumos/kernels.hpp"

#include <cstdlib>
#include <string>

#include "lumos/log.hpp"

namespace lumos::kernels {

const Backend* avx2_backend_impl();  // defined in kernels_avx2.cpp

bool avx2_supported() {
#if defined(__x86_64__) || defined(__i386__)
  return avx2_backend_impl() != nullptr && __builtin_cpu_supports("avx2");
#else
  return false;
#endif
}

const Backend* avx2_backend() { return avx2_supported() ? avx2_backend_impl() : nullptr; }

namespace {

const Backend* select() {
  const char* env = std::getenv("LUMOS_KERNELS");
  if (env) {
    std::string want(env);
    if (want == "scalar") return &scalar_backend();
    if (want == "avx2") {
      if (const Backend* be = avx2_backend()) return be;
      log::warn("LUMOS_KERNELS=avx2 requested but unavailable, using scalar");
      return &scalar_backend();
    }
    log::warn("LUMOS_KERNELS=%s not recognized, using default selection", env);
  }
  if (const Backend* be = avx2_backend()) return be;
  return &scalar_backend();
}

const Backend*& slot() {
  static const Backend* current = select();
  return current;
}

}  // namespace

const Backend& active() { return *slot(); }

void force(const Backend* b) { slot() = b ? b : select(); }

std::vector<const Backend*> all_backends() {
  std::vector<const Backend*> v{&scalar_backend()};
  if (const Backend* be = avx2_backend()) v.push_back(be);
  return v;
}

}  // namespace lumos::kernels
