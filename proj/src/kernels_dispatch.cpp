#include <cstdlib>
#include <cstring>

#include "cods/common.hpp"
#include "cods/kernels.hpp"

namespace cods::kern {

#if defined(CODS_HAVE_AVX2)
const Ops& avx2_ops();  // kernels_avx2.cpp
#endif

bool avx2_available() {
#if defined(CODS_HAVE_AVX2)
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

namespace {

Backend pick_default() {
  if (const char* env = std::getenv("CODS_KERNELS")) {
    if (std::strcmp(env, "scalar") == 0) return Backend::Scalar;
    if (std::strcmp(env, "avx2") == 0) {
      if (!avx2_available())
        throw ConfigError("CODS_KERNELS=avx2 but AVX2 is not available");
      return Backend::Avx2;
    }
    // anything else (incl. "auto") falls through to detection
  }
  return avx2_available() ? Backend::Avx2 : Backend::Scalar;
}

Backend& active() {
  static Backend b = pick_default();
  return b;
}

}  // namespace

const Ops& ops() {
#if defined(CODS_HAVE_AVX2)
  if (active() == Backend::Avx2) return avx2_ops();
#endif
  return scalar_ops();
}

Backend active_backend() { return active(); }

void set_backend(Backend b) {
  if (b == Backend::Avx2 && !avx2_available())
    throw ConfigError("AVX2 backend requested but not available");
  active() = b;
}

const char* backend_name(Backend b) {
  switch (b) {
    case Backend::Scalar: return "scalar";
    case Backend::Avx2: return "avx2";
  }
  return "?";
}

}  // namespace cods::kern
