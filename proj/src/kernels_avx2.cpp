#include "cods/kernels.hpp"

#if defined(__x86_64__) || defined(_M_X64)

#include <immintrin.h>

#include <cmath>

namespace cods::kern::avx2 {

namespace {

inline float hsum(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  __m128 s = _mm_add_ps(lo, hi);
  s = _mm_add_ps(s, _mm_movehl_ps(s, s));
  s = _mm_add_ss(s, _mm_shuffle_ps(s, s, 1));
  return _mm_cvtss_f32(s);
}

inline double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  __m128d s = _mm_add_pd(lo, hi);
  return _mm_cvtsd_f64(s) + _mm_cvtsd_f64(_mm_unpackhi_pd(s, s));
}

}  // namespace

void add(const float* a, const float* b, float* out, size_t n) {
  size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(out + i, _mm256_add_ps(_mm256_loadu_ps(a + i),
                                            _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) out[i] = a[i] + b[i];
}

void sub(const float* a, const float* b, float* out, size_t n) {
  size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(out + i, _mm256_sub_ps(_mm256_loadu_ps(a + i),
                                            _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) out[i] = a[i] - b[i];
}

void mul(const float* a, const float* b, float* out, size_t n) {
  size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(out + i, _mm256_mul_ps(_mm256_loadu_ps(a + i),
                                            _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) out[i] = a[i] * b[i];
}

void scale(const float* x, float alpha, float* out, size_t n) {
  __m256 va = _mm256_set1_ps(alpha);
  size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(out + i, _mm256_mul_ps(va, _mm256_loadu_ps(x + i)));
  for (; i < n; ++i) out[i] = alpha * x[i];
}

void axpy(float alpha, const float* x, float* y, size_t n) {
  __m256 va = _mm256_set1_ps(alpha);
  size_t i = 0;
  for (; i + 16 <= n; i += 16) {
    __m256 y0 = _mm256_fmadd_ps(va, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i));
    __m256 y1 = _mm256_fmadd_ps(va, _mm256_loadu_ps(x + i + 8),
                                _mm256_loadu_ps(y + i + 8));
    _mm256_storeu_ps(y + i, y0);
    _mm256_storeu_ps(y + i + 8, y1);
  }
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(
        y + i, _mm256_fmadd_ps(va, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void affine(const float* x, float alpha, float beta, float* out, size_t n) {
  __m256 va = _mm256_set1_ps(alpha);
  __m256 vb = _mm256_set1_ps(beta);
  size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(out + i, _mm256_fmadd_ps(va, _mm256_loadu_ps(x + i), vb));
  for (; i < n; ++i) out[i] = alpha * x[i] + beta;
}

float dot(const float* a, const float* b, size_t n) {
  __m256 acc0 = _mm256_setzero_ps();
  __m256 acc1 = _mm256_setzero_ps();
  size_t i = 0;
  for (; i + 16 <= n; i += 16) {
    acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc0);
    acc1 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i + 8), _mm256_loadu_ps(b + i + 8),
                           acc1);
  }
  for (; i + 8 <= n; i += 8)
    acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc0);
  double tail = 0.0;
  for (; i < n; ++i) tail += static_cast<double>(a[i]) * b[i];
  return static_cast<float>(static_cast<double>(hsum(_mm256_add_ps(acc0, acc1))) +
                            tail);
}

double sum(const float* x, size_t n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 v = _mm256_loadu_ps(x + i);
    acc0 = _mm256_add_pd(acc0, _mm256_cvtps_pd(_mm256_castps256_ps128(v)));
    acc1 = _mm256_add_pd(acc1, _mm256_cvtps_pd(_mm256_extractf128_ps(v, 1)));
  }
  double s = hsum(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) s += x[i];
  return s;
}

double sumsq(const float* x, size_t n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 v = _mm256_loadu_ps(x + i);
    __m256d lo = _mm256_cvtps_pd(_mm256_castps256_ps128(v));
    __m256d hi = _mm256_cvtps_pd(_mm256_extractf128_ps(v, 1));
    acc0 = _mm256_fmadd_pd(lo, lo, acc0);
    acc1 = _mm256_fmadd_pd(hi, hi, acc1);
  }
  double s = hsum(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) s += static_cast<double>(x[i]) * x[i];
  return s;
}

void leaky_relu(const float* x, float slope, float* out, size_t n) {
  __m256 vs = _mm256_set1_ps(slope);
  __m256 zero = _mm256_setzero_ps();
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 v = _mm256_loadu_ps(x + i);
    __m256 neg = _mm256_mul_ps(vs, v);
    __m256 mask = _mm256_cmp_ps(v, zero, _CMP_GE_OQ);
    _mm256_storeu_ps(out + i, _mm256_blendv_ps(neg, v, mask));
  }
  for (; i < n; ++i) out[i] = x[i] >= 0.f ? x[i] : slope * x[i];
}

void leaky_relu_grad(const float* x, const float* gout, float slope, float* gin,
                     size_t n) {
  __m256 vs = _mm256_set1_ps(slope);
  __m256 one = _mm256_set1_ps(1.f);
  __m256 zero = _mm256_setzero_ps();
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 v = _mm256_loadu_ps(x + i);
    __m256 mask = _mm256_cmp_ps(v, zero, _CMP_GE_OQ);
    __m256 k = _mm256_blendv_ps(vs, one, mask);
    __m256 g = _mm256_fmadd_ps(k, _mm256_loadu_ps(gout + i), _mm256_loadu_ps(gin + i));
    _mm256_storeu_ps(gin + i, g);
  }
  for (; i < n; ++i) gin[i] += gout[i] * (x[i] >= 0.f ? 1.f : slope);
}

bool all_finite(const float* x, size_t n) {
  const __m256i expmask = _mm256_set1_epi32(0x7f800000);
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256i bits = _mm256_castps_si256(_mm256_loadu_ps(x + i));
    __m256i exp = _mm256_and_si256(bits, expmask);
    __m256i bad = _mm256_cmpeq_epi32(exp, expmask);
    if (_mm256_movemask_ps(_mm256_castsi256_ps(bad)) != 0) return false;
  }
  for (; i < n; ++i)
    if (!std::isfinite(x[i])) return false;
  return true;
}

namespace {

inline float conv3x3_px(const float* src, int h, int w, const float* w9, int y,
                        int x) {
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
  return acc;
}

}  // namespace

void conv3x3_acc(const float* src, int h, int w, const float* w9, float* dst) {
  __m256 k[9];
  for (int j = 0; j < 9; ++j) k[j] = _mm256_set1_ps(w9[j]);
  for (int y = 0; y < h; ++y) {
    float* drow = dst + static_cast<size_t>(y) * w;
    const float* r0 = y - 1 >= 0 ? src + static_cast<size_t>(y - 1) * w : nullptr;
    const float* r1 = src + static_cast<size_t>(y) * w;
    const float* r2 = y + 1 < h ? src + static_cast<size_t>(y + 1) * w : nullptr;
    int x = 0;
    if (w >= 10) {
      drow[0] += conv3x3_px(src, h, w, w9, y, 0);
      // one accumulator chain per source row keeps the FMA latency off the
      // critical path
      for (x = 1; x + 8 <= w - 1; x += 8) {
        __m256 a0 = _mm256_setzero_ps(), a1, a2 = _mm256_setzero_ps();
        if (r0) {
          a0 = _mm256_mul_ps(k[0], _mm256_loadu_ps(r0 + x - 1));
          a0 = _mm256_fmadd_ps(k[1], _mm256_loadu_ps(r0 + x), a0);
          a0 = _mm256_fmadd_ps(k[2], _mm256_loadu_ps(r0 + x + 1), a0);
        }
        a1 = _mm256_mul_ps(k[3], _mm256_loadu_ps(r1 + x - 1));
        a1 = _mm256_fmadd_ps(k[4], _mm256_loadu_ps(r1 + x), a1);
        a1 = _mm256_fmadd_ps(k[5], _mm256_loadu_ps(r1 + x + 1), a1);
        if (r2) {
          a2 = _mm256_mul_ps(k[6], _mm256_loadu_ps(r2 + x - 1));
          a2 = _mm256_fmadd_ps(k[7], _mm256_loadu_ps(r2 + x), a2);
          a2 = _mm256_fmadd_ps(k[8], _mm256_loadu_ps(r2 + x + 1), a2);
        }
        __m256 sum = _mm256_add_ps(_mm256_add_ps(a0, a2),
                                   _mm256_add_ps(a1, _mm256_loadu_ps(drow + x)));
        _mm256_storeu_ps(drow + x, sum);
      }
    }
    for (; x < w; ++x) drow[x] += conv3x3_px(src, h, w, w9, y, x);
  }
}

void conv3x3_grad_w(const float* src, const float* gout, int h, int w,
                    float* gw9) {
  __m256 acc[9];
  for (int j = 0; j < 9; ++j) acc[j] = _mm256_setzero_ps();
  double edge[9] = {0};
  for (int y = 0; y < h; ++y) {
    const float* grow = gout + static_cast<size_t>(y) * w;
    for (int ky = 0; ky < 3; ++ky) {
      int sy = y + ky - 1;
      if (sy < 0 || sy >= h) continue;
      const float* srow = src + static_cast<size_t>(sy) * w;
      int x = 1;
      if (w >= 10) {
        for (; x + 8 <= w - 1; x += 8) {
          __m256 g = _mm256_loadu_ps(grow + x);
          acc[ky * 3 + 0] =
              _mm256_fmadd_ps(g, _mm256_loadu_ps(srow + x - 1), acc[ky * 3 + 0]);
          acc[ky * 3 + 1] =
              _mm256_fmadd_ps(g, _mm256_loadu_ps(srow + x), acc[ky * 3 + 1]);
          acc[ky * 3 + 2] =
              _mm256_fmadd_ps(g, _mm256_loadu_ps(srow + x + 1), acc[ky * 3 + 2]);
        }
      } else {
        x = 1;
      }
      // x = 0 column plus the vector-loop tail
      for (int kx = 0; kx < 3; ++kx) {
        int sx0 = 0 + kx - 1;
        if (sx0 >= 0 && sx0 < w)
          edge[ky * 3 + kx] += static_cast<double>(srow[sx0]) * grow[0];
        for (int xt = x; xt < w; ++xt) {
          int sx = xt + kx - 1;
          if (sx < 0 || sx >= w) continue;
          edge[ky * 3 + kx] += static_cast<double>(srow[sx]) * grow[xt];
        }
      }
    }
  }
  for (int j = 0; j < 9; ++j)
    gw9[j] += static_cast<float>(static_cast<double>(hsum(acc[j])) + edge[j]);
}

void adam_update(float* p, const float* g, float* m, float* v, size_t n,
                 float lr, float beta1, float beta2, float eps, float bc1,
                 float bc2) {
  __m256 vb1 = _mm256_set1_ps(beta1);
  __m256 vb1c = _mm256_set1_ps(1.f - beta1);
  __m256 vb2 = _mm256_set1_ps(beta2);
  __m256 vb2c = _mm256_set1_ps(1.f - beta2);
  __m256 vlr = _mm256_set1_ps(lr);
  __m256 veps = _mm256_set1_ps(eps);
  __m256 vbc1 = _mm256_set1_ps(bc1);
  __m256 vbc2 = _mm256_set1_ps(bc2);
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 gv = _mm256_loadu_ps(g + i);
    __m256 mv = _mm256_fmadd_ps(vb1c, gv, _mm256_mul_ps(vb1, _mm256_loadu_ps(m + i)));
    __m256 vv = _mm256_fmadd_ps(vb2c, _mm256_mul_ps(gv, gv),
                                _mm256_mul_ps(vb2, _mm256_loadu_ps(v + i)));
    _mm256_storeu_ps(m + i, mv);
    _mm256_storeu_ps(v + i, vv);
    __m256 mhat = _mm256_mul_ps(mv, vbc1);
    __m256 denom = _mm256_add_ps(_mm256_sqrt_ps(_mm256_mul_ps(vv, vbc2)), veps);
    __m256 upd = _mm256_div_ps(_mm256_mul_ps(vlr, mhat), denom);
    _mm256_storeu_ps(p + i, _mm256_sub_ps(_mm256_loadu_ps(p + i), upd));
  }
  for (; i < n; ++i) {
    m[i] = beta1 * m[i] + (1.f - beta1) * g[i];
    v[i] = beta2 * v[i] + (1.f - beta2) * g[i] * g[i];
    p[i] -= lr * (m[i] * bc1) / (std::sqrt(v[i] * bc2) + eps);
  }
}

}  // namespace cods::kern::avx2

namespace cods::kern {

const Ops& avx2_ops() {
  static const Ops table = {
      avx2::add,          avx2::sub,
      avx2::mul,          avx2::scale,
      avx2::axpy,         avx2::affine,
      avx2::dot,          avx2::sum,
      avx2::sumsq,        avx2::leaky_relu,
      avx2::leaky_relu_grad, avx2::all_finite,
      avx2::conv3x3_acc,  avx2::conv3x3_grad_w,
      avx2::adam_update,
  };
  return table;
}

}  // namespace cods::kern

#endif  // x86_64
