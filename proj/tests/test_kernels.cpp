#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "cods/common.hpp"
#include "cods/kernels.hpp"

using namespace cods;

namespace {

std::vector<float> rand_vec(size_t n, Rng& rng, float lo = -2.f, float hi = 2.f) {
  std::vector<float> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

bool close(float a, float b, float rel = 1e-6f, float abs_tol = 1e-6f) {
  return std::fabs(a - b) <= abs_tol + rel * std::max(std::fabs(a), std::fabs(b));
}

const std::vector<size_t> kSizes = {0, 1, 3, 7, 8, 9, 16, 31, 44, 528, 1000};

}  // namespace

// Every SIMD variant must agree with the scalar reference. Elementwise
// kernels that do not fuse multiply-adds must agree bit-for-bit; fused and
// reduction kernels get a small tolerance for rounding-order differences.
TEST_CASE("simd kernels match the scalar reference") {
  if (!kern::avx2_available()) {
    MESSAGE("AVX2 not available; skipping equivalence checks");
    return;
  }
  const auto& s = kern::scalar_ops();
  kern::set_backend(kern::Backend::Avx2);
  const auto& f = kern::ops();
  Rng rng(2024);

  for (size_t n : kSizes) {
    auto a = rand_vec(n, rng);
    auto b = rand_vec(n, rng);
    std::vector<float> o1(n), o2(n);

    s.add(a.data(), b.data(), o1.data(), n);
    f.add(a.data(), b.data(), o2.data(), n);
    CHECK(o1 == o2);

    s.sub(a.data(), b.data(), o1.data(), n);
    f.sub(a.data(), b.data(), o2.data(), n);
    CHECK(o1 == o2);

    s.mul(a.data(), b.data(), o1.data(), n);
    f.mul(a.data(), b.data(), o2.data(), n);
    CHECK(o1 == o2);

    s.scale(a.data(), 1.7f, o1.data(), n);
    f.scale(a.data(), 1.7f, o2.data(), n);
    CHECK(o1 == o2);

    s.leaky_relu(a.data(), 0.1f, o1.data(), n);
    f.leaky_relu(a.data(), 0.1f, o2.data(), n);
    CHECK(o1 == o2);

    auto y1 = b, y2 = b;
    s.axpy(0.37f, a.data(), y1.data(), n);
    f.axpy(0.37f, a.data(), y2.data(), n);
    for (size_t i = 0; i < n; ++i) CHECK(close(y1[i], y2[i]));

    s.affine(a.data(), 1.3f, -0.2f, o1.data(), n);
    f.affine(a.data(), 1.3f, -0.2f, o2.data(), n);
    for (size_t i = 0; i < n; ++i) CHECK(close(o1[i], o2[i]));

    CHECK(close(s.dot(a.data(), b.data(), n), f.dot(a.data(), b.data(), n),
                1e-5f, 1e-5f));
    CHECK(s.sum(a.data(), n) == doctest::Approx(f.sum(a.data(), n)).epsilon(1e-9));
    CHECK(s.sumsq(a.data(), n) ==
          doctest::Approx(f.sumsq(a.data(), n)).epsilon(1e-9));

    auto g1 = rand_vec(n, rng);
    auto gin1 = b, gin2 = b;
    s.leaky_relu_grad(a.data(), g1.data(), 0.1f, gin1.data(), n);
    f.leaky_relu_grad(a.data(), g1.data(), 0.1f, gin2.data(), n);
    for (size_t i = 0; i < n; ++i) CHECK(close(gin1[i], gin2[i]));

    CHECK(s.all_finite(a.data(), n) == f.all_finite(a.data(), n));
  }
}

TEST_CASE("all_finite flags NaN and Inf in any lane position") {
  const auto& f = kern::ops();
  Rng rng(7);
  for (size_t n : {1u, 8u, 9u, 33u}) {
    auto v = rand_vec(n, rng);
    CHECK(f.all_finite(v.data(), n));
    for (size_t bad = 0; bad < n; ++bad) {
      auto w = v;
      w[bad] = std::numeric_limits<float>::quiet_NaN();
      CHECK_FALSE(f.all_finite(w.data(), n));
      w[bad] = std::numeric_limits<float>::infinity();
      CHECK_FALSE(f.all_finite(w.data(), n));
    }
  }
  CHECK(f.all_finite(nullptr, 0));
}

TEST_CASE("conv3x3 plane kernels match scalar on awkward sizes") {
  if (!kern::avx2_available()) return;
  const auto& s = kern::scalar_ops();
  kern::set_backend(kern::Backend::Avx2);
  const auto& f = kern::ops();
  Rng rng(99);
  struct HW { int h, w; };
  for (HW hw : {HW{1, 1}, HW{2, 3}, HW{3, 9}, HW{4, 10}, HW{12, 44}, HW{13, 44},
                HW{8, 32}, HW{5, 17}}) {
    size_t n = static_cast<size_t>(hw.h) * hw.w;
    auto src = rand_vec(n, rng);
    auto w9 = rand_vec(9, rng);
    auto d1 = rand_vec(n, rng);
    auto d2 = d1;
    s.conv3x3_acc(src.data(), hw.h, hw.w, w9.data(), d1.data());
    f.conv3x3_acc(src.data(), hw.h, hw.w, w9.data(), d2.data());
    for (size_t i = 0; i < n; ++i) CHECK(close(d1[i], d2[i], 1e-5f, 1e-5f));

    auto g = rand_vec(n, rng);
    std::vector<float> gw1(9, 0.5f), gw2(9, 0.5f);
    s.conv3x3_grad_w(src.data(), g.data(), hw.h, hw.w, gw1.data());
    f.conv3x3_grad_w(src.data(), g.data(), hw.h, hw.w, gw2.data());
    for (int j = 0; j < 9; ++j) CHECK(close(gw1[j], gw2[j], 1e-5f, 1e-5f));
  }
}

TEST_CASE("conv3x3_acc hand case: centered cross kernel") {
  // 3x3 plane, kernel picks center + north neighbor
  std::vector<float> src = {1, 2, 3, 4, 5, 6, 7, 8, 9};
  std::vector<float> w9 = {0, 1, 0, 0, 1, 0, 0, 0, 0};  // north + self
  std::vector<float> dst(9, 0.f);
  kern::ops().conv3x3_acc(src.data(), 3, 3, w9.data(), dst.data());
  // row 0 has no north neighbor
  std::vector<float> want = {1, 2, 3, 5, 7, 9, 11, 13, 15};
  CHECK(dst == want);
}

TEST_CASE("adam kernel equivalence and bit determinism") {
  const auto& s = kern::scalar_ops();
  Rng rng(5);
  size_t n = 37;
  auto p0 = rand_vec(n, rng);
  auto g = rand_vec(n, rng);
  std::vector<float> m0(n, 0.f), v0(n, 0.f);

  auto run = [&](const kern::Ops& k) {
    auto p = p0;
    auto m = m0, v = v0;
    for (int t = 1; t <= 3; ++t) {
      float bc1 = 1.f / (1.f - std::pow(0.9f, static_cast<float>(t)));
      float bc2 = 1.f / (1.f - std::pow(0.999f, static_cast<float>(t)));
      k.adam_update(p.data(), g.data(), m.data(), v.data(), n, 0.002f, 0.9f,
                    0.999f, 1e-8f, bc1, bc2);
    }
    return p;
  };

  auto ps = run(s);
  auto ps2 = run(s);
  CHECK(ps == ps2);  // deterministic
  if (kern::avx2_available()) {
    kern::set_backend(kern::Backend::Avx2);
    auto pf = run(kern::ops());
    for (size_t i = 0; i < n; ++i) CHECK(close(ps[i], pf[i], 1e-6f, 1e-7f));
    auto pf2 = run(kern::ops());
    CHECK(pf == pf2);
  }
}

TEST_CASE("backend selection is sticky and reports its name") {
  kern::set_backend(kern::Backend::Scalar);
  CHECK(kern::active_backend() == kern::Backend::Scalar);
  CHECK(std::string(kern::backend_name(kern::active_backend())) == "scalar");
  if (kern::avx2_available()) {
    kern::set_backend(kern::Backend::Avx2);
    CHECK(kern::active_backend() == kern::Backend::Avx2);
  }
}
