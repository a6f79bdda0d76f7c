#pragma once

#include <cstddef>

namespace cods::kern {

// Data-parallel inner loops used by the tensor engine. Every entry has a
// scalar reference implementation and, on x86-64, an AVX2+FMA variant.
// The active table is picked once at startup from CPUID and can be
// overridden with set_backend() or the CODS_KERNELS env var
// ("scalar" | "avx2" | "auto").
struct Ops {
  void (*add)(const float* a, const float* b, float* out, size_t n);
  void (*sub)(const float* a, const float* b, float* out, size_t n);
  void (*mul)(const float* a, const float* b, float* out, size_t n);
  void (*scale)(const float* x, float alpha, float* out, size_t n);
  // y += alpha * x
  void (*axpy)(float alpha, const float* x, float* y, size_t n);
  // out = alpha * x + beta
  void (*affine)(const float* x, float alpha, float beta, float* out, size_t n);
  float (*dot)(const float* a, const float* b, size_t n);
  double (*sum)(const float* x, size_t n);
  double (*sumsq)(const float* x, size_t n);
  void (*leaky_relu)(const float* x, float slope, float* out, size_t n);
  // gin += gout * (x >= 0 ? 1 : slope)
  void (*leaky_relu_grad)(const float* x, const float* gout, float slope,
                          float* gin, size_t n);
  bool (*all_finite)(const float* x, size_t n);
  // dst += conv(src, w) over an HxW plane, 3x3 kernel, stride 1, zero pad 1.
  // w is row-major [ky][kx].
  void (*conv3x3_acc)(const float* src, int h, int w_cols, const float* w9,
                      float* dst);
  // gw[ky*3+kx] += sum_{y,x} src[y+ky-1][x+kx-1] * gout[y][x] (zero pad 1)
  void (*conv3x3_grad_w)(const float* src, const float* gout, int h,
                         int w_cols, float* gw9);
  // bias-corrected Adam: m,v updated in place, then
  // p -= lr * (m*bc1) / (sqrt(v*bc2) + eps)
  void (*adam_update)(float* p, const float* g, float* m, float* v, size_t n,
                      float lr, float beta1, float beta2, float eps, float bc1,
                      float bc2);
};

enum class Backend { Scalar, Avx2 };

const Ops& ops();
const Ops& scalar_ops();
Backend active_backend();
void set_backend(Backend b);  // throws ConfigError if unavailable
bool avx2_available();
const char* backend_name(Backend b);

}  // namespace cods::kern
