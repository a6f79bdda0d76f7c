#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <vector>

#include "cods/tensor.hpp"
#include "gradcheck_cases.hpp"
#include "testutil.hpp"

using namespace cods;
using testutil::grad_check;
using testutil::random_tensor;

namespace {

using testutil::bilinear_oracle;
using testutil::conv_oracle;

// kept locally callable for readability of this suite
Tensor conv_oracle_local(const Tensor& x, const Tensor& w, const Tensor& b,
                         int pad) {
  return conv_oracle(x, w, b, pad);
}

void check_all_close(const Tensor& a, const Tensor& b, float rel, float abs_tol) {
  REQUIRE(a.dims == b.dims);
  for (size_t i = 0; i < a.numel(); ++i) {
    float lhs = a.v[i], rhs = b.v[i];
    CHECK(std::fabs(lhs - rhs) <=
          abs_tol + rel * std::max(std::fabs(lhs), std::fabs(rhs)));
  }
}

}  // namespace

TEST_CASE("conv2d 1x1 identity weight reproduces the input") {
  Rng rng(1);
  Tensor x = random_tensor({3, 4, 5}, rng);
  Tensor w({3, 3, 1, 1});
  for (int i = 0; i < 3; ++i) w.v[static_cast<size_t>(i) * 3 + i] = 1.f;
  Var out = conv2d(constant(x), constant(w), constant(Tensor({3})));
  check_all_close(out->value, x, 0.f, 0.f);
}

TEST_CASE("conv2d constant field: interior equals 9*w*c") {
  const float cval = 0.7f, wval = 0.3f;
  Tensor x = Tensor::full({1, 5, 6}, cval);
  Tensor w = Tensor::full({1, 1, 3, 3}, wval);
  Var out = conv2d(constant(x), constant(w), constant(Tensor({1})), 1, 1);
  for (int y = 1; y < 4; ++y)
    for (int xx = 1; xx < 5; ++xx)
      CHECK(out->value.at3(0, y, xx) == doctest::Approx(9 * wval * cval).epsilon(1e-6));
  // corners see only 4 taps
  CHECK(out->value.at3(0, 0, 0) == doctest::Approx(4 * wval * cval).epsilon(1e-6));
}

TEST_CASE("conv2d matches the sextuple-loop oracle") {
  Rng rng(42);
  Tensor x = random_tensor({2, 4, 4}, rng);
  Tensor w = random_tensor({3, 2, 3, 3}, rng);
  Tensor b = random_tensor({3}, rng);
  Var out = conv2d(constant(x), constant(w), constant(b), 1, 1);
  check_all_close(out->value, conv_oracle_local(x, w, b, 1), 1e-6f, 1e-6f);

  Tensor w1 = random_tensor({4, 2, 1, 1}, rng);
  Tensor b1 = random_tensor({4}, rng);
  Var out1 = conv2d(constant(x), constant(w1), constant(b1));
  check_all_close(out1->value, conv_oracle_local(x, w1, b1, 0), 1e-6f, 1e-6f);
}

TEST_CASE("conv2d rejects bad geometry") {
  Rng rng(3);
  Tensor x = random_tensor({2, 4, 4}, rng);
  CHECK_THROWS_AS(conv2d(constant(x), constant(random_tensor({3, 5, 3, 3}, rng)),
                         constant(Tensor({3}))),
                  DimError);
  CHECK_THROWS_AS(conv2d(constant(x), constant(random_tensor({3, 2, 5, 5}, rng)),
                         constant(Tensor({3}))),
                  DimError);
  Tensor bad = x;
  bad.v[0] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(constant(bad), NumericError);
}

TEST_CASE("batchnorm2d normalizes to zero mean unit variance before affine") {
  Rng rng(11);
  Tensor x = random_tensor({4, 2, 3, 3}, rng, -3.f, 5.f);
  Tensor gamma = Tensor::full({2}, 1.f);
  Tensor beta({2});
  BatchNormState st;
  Var out = batchnorm2d(constant(x), constant(gamma), constant(beta), st, true);

  // two-pass oracle
  int n = 4, c = 2, hw = 9;
  for (int ch = 0; ch < c; ++ch) {
    double mu = 0, var = 0;
    std::vector<float> vals;
    for (int nb = 0; nb < n; ++nb)
      for (int i = 0; i < hw; ++i)
        vals.push_back(x.v[(static_cast<size_t>(nb) * c + ch) * hw + i]);
    for (float v : vals) mu += v;
    mu /= vals.size();
    for (float v : vals) var += (v - mu) * (v - mu);
    var /= vals.size();
    double istd = 1.0 / std::sqrt(var + 1e-5);
    size_t k = 0;
    double omu = 0, osq = 0;
    for (int nb = 0; nb < n; ++nb)
      for (int i = 0; i < hw; ++i) {
        float got = out->value.v[(static_cast<size_t>(nb) * c + ch) * hw + i];
        float want = static_cast<float>((vals[k++] - mu) * istd);
        CHECK(got == doctest::Approx(want).epsilon(1e-6));
        omu += got;
        osq += static_cast<double>(got) * got;
      }
    omu /= vals.size();
    osq = osq / vals.size() - omu * omu;
    CHECK(std::fabs(omu) < 1e-5);
    CHECK(std::fabs(osq - 1.0) < 1e-4);
  }
}

TEST_CASE("batchnorm2d passthrough and constant-output edge cases") {
  Rng rng(13);
  // gamma=1, beta=0 on an already standardized input stays put (tol 1e-4)
  Tensor x({1, 1, 2, 50});
  double mu = 0, var = 0;
  for (auto& v : x.v) v = rng.normal();
  for (auto v : x.v) mu += v;
  mu /= x.numel();
  for (auto v : x.v) var += (v - mu) * (v - mu);
  var /= x.numel();
  for (auto& v : x.v) v = static_cast<float>((v - mu) / std::sqrt(var));
  BatchNormState st;
  Var out = batchnorm2d(constant(x), constant(Tensor::full({1}, 1.f)),
                        constant(Tensor({1})), st, true);
  check_all_close(out->value, x, 1e-3f, 1e-4f);

  // gamma=0 -> output equals beta broadcast
  BatchNormState st2;
  Var out2 = batchnorm2d(constant(x), constant(Tensor({1})),
                         constant(Tensor::full({1}, 0.25f)), st2, true);
  for (float v : out2->value.v) CHECK(v == 0.25f);

  // degenerate statistics
  BatchNormState st3;
  Tensor one({1, 1, 1});
  CHECK_THROWS_AS(batchnorm2d(constant(one), constant(Tensor::full({1}, 1.f)),
                              constant(Tensor({1})), st3, true),
                  DegenerateStatsError);
}

TEST_CASE("batchnorm2d eval mode uses running statistics") {
  Rng rng(17);
  Tensor gamma = Tensor::full({2}, 1.f), beta({2});
  BatchNormState st;
  for (int i = 0; i < 50; ++i) {
    Tensor x = random_tensor({2, 4, 6}, rng, 1.f, 3.f);  // mean ~2
    batchnorm2d(constant(x), constant(gamma), constant(beta), st, true);
  }
  CHECK(st.running_mean[0] == doctest::Approx(2.0).epsilon(0.1));
  Tensor probe = Tensor::full({2, 4, 6}, 2.f);
  Var out = batchnorm2d(constant(probe), constant(gamma), constant(beta), st, false);
  for (float v : out->value.v) CHECK(std::fabs(v) < 0.2f);
}

TEST_CASE("leaky_relu basics") {
  Rng rng(19);
  Tensor x = random_tensor({2, 3, 4}, rng, 0.01f, 2.f);
  Var out = leaky_relu(constant(x), 0.1f);
  check_all_close(out->value, x, 0.f, 0.f);

  Tensor neg = Tensor::full({1}, -1.f);
  CHECK(leaky_relu(constant(neg), 0.1f)->value.v[0] == doctest::Approx(-0.1f));

  CHECK_THROWS_AS(leaky_relu(constant(x), 1.5f), ConfigError);
}

TEST_CASE("bilinear_resize identity, constant, and oracle cases") {
  Rng rng(23);
  Tensor x = random_tensor({2, 5, 7}, rng);
  Var same = bilinear_resize(constant(x), 5, 7);
  check_all_close(same->value, x, 1e-6f, 1e-6f);

  Tensor c = Tensor::full({3, 4, 4}, 3.5f);
  Var up = bilinear_resize(constant(c), 9, 5);
  for (float v : up->value.v) CHECK(v == doctest::Approx(3.5f).epsilon(1e-6));

  Tensor q({1, 2, 2});
  q.v = {1, 2, 3, 4};
  Var o = bilinear_resize(constant(q), 3, 3);
  check_all_close(o->value, bilinear_oracle(q, 3, 3), 1e-6f, 1e-6f);
  std::vector<float> want = {1, 1.5f, 2, 2, 2.5f, 3, 3, 3.5f, 4};
  for (size_t i = 0; i < 9; ++i)
    CHECK(o->value.v[i] == doctest::Approx(want[i]).epsilon(1e-6));

  Tensor big = random_tensor({2, 8, 32}, rng);
  Var r = bilinear_resize(constant(big), 12, 44);
  check_all_close(r->value, bilinear_oracle(big, 12, 44), 1e-6f, 1e-6f);
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
  Rng rng(29);
  Var p = leaf(random_tensor({3, 3}, rng), true);
  Tensor before = p->value;
  auto st = make_adam({p});
  p->grad_ref();  // zeros
  adam_step({p}, st);
  CHECK(p->value.v == before.v);
}

TEST_CASE("adam: first step from zero moves by lr") {
  Var p = leaf(Tensor({1}), true);
  p->grad_ref().v[0] = 1.f;
  auto st = make_adam({p}, 0.002f);
  adam_step({p}, st);
  CHECK(p->value.v[0] == doctest::Approx(-0.002f).epsilon(1e-6));
}

TEST_CASE("adam: descent on x^2 is monotone after warmup") {
  Var p = leaf(Tensor::full({1}, 1.f), true);
  auto st = make_adam({p}, 0.002f);
  float prev = 1.f;
  for (int t = 1; t <= 100; ++t) {
    zero_grad({p});
    Var loss = mul(p, p);
    backward(loss);
    adam_step({p}, st);
    float f = p->value.v[0] * p->value.v[0];
    if (t > 3) CHECK(f < prev);
    prev = f;
  }
  CHECK(prev < 0.75f);
}

TEST_CASE("adam rejects non-finite gradients") {
  Var p = leaf(Tensor({2}), true);
  auto st = make_adam({p});
  p->grad_ref().v[0] = std::numeric_limits<float>::infinity();
  CHECK_THROWS_AS(adam_step({p}, st), NumericError);
}

TEST_CASE("backward accumulates over shared subexpressions") {
  Rng rng(31);
  Tensor xt = random_tensor({4}, rng);

  Var x1 = leaf(xt, true);
  Var s = mul(x1, x1);
  Var z = sum(add(s, s));  // shared node used twice
  backward(z);

  Var x2 = leaf(xt, true);
  Var z2 = sum(add(mul(x2, x2), mul(x2, x2)));  // duplicated subgraph
  backward(z2);

  for (size_t i = 0; i < 4; ++i)
    CHECK(x1->grad.v[i] == doctest::Approx(x2->grad.v[i]).epsilon(1e-6));
}

TEST_CASE("ops are deterministic: identical inputs give identical bytes") {
  Rng rng(37);
  Tensor x = random_tensor({3, 6, 8}, rng);
  Tensor w = random_tensor({4, 3, 3, 3}, rng);
  Tensor b = random_tensor({4}, rng);
  Var o1 = conv2d(constant(x), constant(w), constant(b));
  Var o2 = conv2d(constant(x), constant(w), constant(b));
  CHECK(o1->value.v == o2->value.v);
  Var f1 = bilinear_resize(constant(x), 9, 11);
  Var f2 = bilinear_resize(constant(x), 9, 11);
  CHECK(f1->value.v == f2->value.v);
}

TEST_CASE("concat/slice/pad channel ops round-trip") {
  Rng rng(41);
  Tensor a = random_tensor({2, 3, 4}, rng), b = random_tensor({3, 3, 4}, rng);
  Var cat = concat_channels({constant(a), constant(b)});
  CHECK(cat->value.dims == std::vector<int>{5, 3, 4});
  Var sl = slice_channels(cat, 2, 3);
  CHECK(sl->value.v == b.v);
  Var pd = pad_channels(constant(a), 4);
  CHECK(pd->value.dims == std::vector<int>{4, 3, 4});
  for (size_t i = a.numel(); i < pd->value.numel(); ++i)
    CHECK(pd->value.v[i] == 0.f);
}

TEST_CASE("ctns save/load round-trips exactly") {
  Rng rng(43);
  Tensor t = random_tensor({3, 5, 7}, rng);
  std::string path = "/tmp/cods_test_roundtrip.ctns";
  save_ctns(path, t);
  Tensor r = load_ctns(path);
  CHECK(r.dims == t.dims);
  CHECK(r.v == t.v);
  std::remove(path.c_str());
  CHECK_THROWS_AS(load_ctns("/tmp/cods_missing_file.ctns"), IoError);
}

// The gradient contract: analytic vs central differences, h = 1e-4,
// relative error < 1e-3, at least 20 random instances per op.
TEST_CASE("gradient suite across every differentiable op") {
  auto results = testutil::gradient_suite(20);
  REQUIRE(results.size() >= 14);
  for (const auto& r : results) {
    INFO(r.op << " worst rel=" << r.worst_rel);
    CHECK(r.worst_rel < 1e-3);
  }
}

TEST_CASE("leaky_relu gradient matches finite differences away from zero") {
  for (int rep = 0; rep < 5; ++rep) {
    Rng rng(500 + rep);
    Tensor t = random_tensor({20}, rng, -3.f, 3.f);
    for (auto& v : t.v)
      if (std::fabs(v) < 1e-2f) v = 0.5f;
    Var x = leaf(t, true);
    auto r = grad_check([x] { return leaky_relu(x, 0.1f); }, {x}, 1e-4f);
    CHECK(r.rel_error < 1e-4);
  }
}

TEST_CASE("backward requires a scalar root") {
  Rng rng(53);
  Var x = leaf(random_tensor({2, 2}, rng), true);
  CHECK_THROWS_AS(backward(mul(x, x)), DimError);
}
