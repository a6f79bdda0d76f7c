#include <cmath>

#include "cods/kernels.hpp"

// Reference kernels. Kept deliberately plain: this is the semantics the
// SIMD variants are equivalence-tested against.

namespace cods::kern::scalar {

void add(const float* a, const float* b, float* out, size_t n) {
  for (size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

void sub(const float* a, const float* b, float* out, size_t n) {
  for (size_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
}

void mul(const float* a, const float* b, float* out, size_t n) {
  for (size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

void scale(const float* x, float alpha, float* out, size_t n) {
  for (size_t i = 0; i < n; ++i) out[i] = alpha * x[i];
}

void axpy(float alpha, const float* x, float* y, size_t n) {
  for (size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void affine(const float* x, float alpha, float beta, float* out, size_t n) {
  for (size_t i = 0; i < n; ++i) out[i] = alpha * x[i] + beta;
}

float dot(const float* a, const float* b, size_t n) {
  double acc = 0.0;
  for (size_t i = 0; i < n; ++i) acc += static_cast<double>(a[i]) * b[i];
  return static_cast<float>(acc);
}

double sum(const float* x, size_t n) {
  double acc = 0.0;
  for (size_t i = 0; i < n; ++i) acc += x[i];
  return acc;
}

double sumsq(const float* x, size_t n) {
  double acc = 0.0;
  for (size_t i = 0; i < n; ++i) acc += static_cast<double>(x[i]) * x[i];
  return acc;
}

void leaky_relu(const float* x, float slope, float* out, size_t n) {
  for (size_t i = 0; i < n; ++i) out[i] = x[i] >= 0.f ? x[i] : slope * x[i];
}

void leaky_relu_grad(const float* x, const float* gout, float slope,
                     float* gin, size_t n) {
  for (size_t i = 0; i < n; ++i) gin[i] += gout[i] * (x[i] >= 0.f ? 1.f : slope);
}

bool all_finite(const float* x, size_t n) {
  for (size_t i = 0; i < n; ++i)
    if (!std::isfinite(x[i])) return false;
  return true;
}

void conv3x3_acc(const float* src, int h, int w, const float* w9, float* dst) {
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      float acc = 0.f;
      for (int ky = 0; ky < 3; ++ky) {
        int sy = y + ky - 1;
        if (sy < 0 || sy >= h) continue;
        const float* row = src + static_cast<size_t>(sy) * w;
        for (int kx = 0; kx < 3; ++kx) {
          int sx = x + kx - 1;
          if (sx < 0 || sx >= w) continue;
          acc += w9[ky * 3 + kx] * row[sx];
        }
      }
      dst[static_cast<size_t>(y) * w + x] += acc;
    }
  }
}

void conv3x3_grad_w(const float* src, const float* gout, int h, int w,
                    float* gw9) {
  double acc[9] = {0};
  for (int y = 0; y < h; ++y) {
    const float* grow = gout + static_cast<size_t>(y) * w;
    for (int ky = 0; ky < 3; ++ky) {
      int sy = y + ky - 1;
      if (sy < 0 || sy >= h) continue;
      const float* srow = src + static_cast<size_t>(sy) * w;
      for (int kx = 0; kx < 3; ++kx) {
        double s = 0.0;
        for (int x = 0; x < w; ++x) {
          int sx = x + kx - 1;
          if (sx < 0 || sx >= w) continue;
          s += static_cast<double>(srow[sx]) * grow[x];
        }
        acc[ky * 3 + kx] += s;
      }
    }
  }
  for (int j = 0; j < 9; ++j) gw9[j] += static_cast<float>(acc[j]);
}

void adam_update(float* p, const float* g, float* m, float* v, size_t n,
                 float lr, float beta1, float beta2, float eps, float bc1,
                 float bc2) {
  for (size_t i = 0; i < n; ++i) {
    m[i] = beta1 * m[i] + (1.f - beta1) * g[i];
    v[i] = beta2 * v[i] + (1.f - beta2) * g[i] * g[i];
    float mhat = m[i] * bc1;
    float vhat = v[i] * bc2;
    p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

}  // namespace cods::kern::scalar

namespace cods::kern {

const Ops& scalar_ops() {
  static const Ops table = {
      scalar::add,          scalar::sub,
      scalar::mul,          scalar::scale,
      scalar::axpy,         scalar::affine,
      scalar::dot,          scalar::sum,
      scalar::sumsq,        scalar::leaky_relu,
      scalar::leaky_relu_grad, scalar::all_finite,
      scalar::conv3x3_acc,  scalar::conv3x3_grad_w,
      scalar::adam_update,
  };
  return table;
}

}  // namespace cods::kern
