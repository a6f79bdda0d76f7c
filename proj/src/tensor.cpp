#include "cods/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "cods/kernels.hpp"

namespace cods {

Tensor::Tensor(std::vector<int> d, float fill) : dims(std::move(d)) {
  v.assign(numel_of(dims), fill);
}

Tensor Tensor::full(std::vector<int> d, float value) {
  return Tensor(std::move(d), value);
}

float& Tensor::at3(int c, int y, int x) {
  int h = dims[1], w = dims[2];
  return v[(static_cast<size_t>(c) * h + y) * w + x];
}

float Tensor::at3(int c, int y, int x) const {
  int h = dims[1], w = dims[2];
  return v[(static_cast<size_t>(c) * h + y) * w + x];
}

size_t numel_of(const std::vector<int>& dims) {
  size_t n = 1;
  for (int d : dims) {
    if (d <= 0) throw DimError("non-positive dimension in " + dims_str(dims));
    n *= static_cast<size_t>(d);
  }
  return n;
}

std::string dims_str(const std::vector<int>& dims) {
  std::string s = "[";
  for (size_t i = 0; i < dims.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(dims[i]);
  }
  return s + "]";
}

void check_finite(const Tensor& t, const char* what) {
  if (!kern::ops().all_finite(t.data(), t.numel()))
    throw NumericError(std::string("non-finite values in ") + what);
}

Tensor randn(std::vector<int> dims, Rng& rng, float stddev) {
  Tensor t(std::move(dims));
  for (auto& x : t.v) x = rng.normal(0.f, stddev);
  return t;
}

Tensor rand_uniform(std::vector<int> dims, Rng& rng, float lo, float hi) {
  Tensor t(std::move(dims));
  for (auto& x : t.v) x = rng.uniform(lo, hi);
  return t;
}

Tensor kaiming_uniform(std::vector<int> dims, Rng& rng, float leaky_slope) {
  // fan_in = product of all dims but the first
  size_t fan_in = 1;
  for (size_t i = 1; i < dims.size(); ++i) fan_in *= static_cast<size_t>(dims[i]);
  float gain = std::sqrt(2.0f / (1.0f + leaky_slope * leaky_slope));
  float bound = gain * std::sqrt(3.0f / static_cast<float>(fan_in));
  return rand_uniform(std::move(dims), rng, -bound, bound);
}

// ---------------------------------------------------------------------------

Tensor& Node::grad_ref() {
  if (grad.v.empty()) grad = Tensor(value.dims);
  return grad;
}

namespace {

thread_local bool g_grad_enabled = true;

Var make_node(Tensor value, const char* op, std::vector<Var> inputs,
              std::function<void(Node&)> backprop) {
  check_finite(value, op);
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = op;
  bool need = false;
  if (g_grad_enabled)
    for (const auto& i : inputs)
      if (i->requires_grad) need = true;
  if (need) {
    n->requires_grad = true;
    n->inputs = std::move(inputs);
    n->backprop = std::move(backprop);
  }
  return n;
}

void require_same_dims(const Var& a, const Var& b, const char* op) {
  if (!a->value.same_dims(b->value))
    throw DimError(std::string(op) + ": shape mismatch " +
                   dims_str(a->value.dims) + " vs " + dims_str(b->value.dims));
}

void acc(Tensor& dst, const float* src, size_t n) {
  kern::ops().axpy(1.f, src, dst.data(), n);
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGrad::NoGrad() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGrad::~NoGrad() { g_grad_enabled = prev_; }

Var leaf(Tensor t, bool requires_grad) {
  check_finite(t, "leaf");
  auto n = std::make_shared<Node>();
  n->value = std::move(t);
  n->requires_grad = requires_grad && g_grad_enabled;
  return n;
}

Var constant(Tensor t) { return leaf(std::move(t), false); }

Var scalar_var(float x) { return constant(Tensor::full({1}, x)); }

// ---------------------------------------------------------------------------
// elementwise

Var add(const Var& a, const Var& b) {
  require_same_dims(a, b, "add");
  Tensor out(a->value.dims);
  kern::ops().add(a->value.data(), b->value.data(), out.data(), out.numel());
  return make_node(std::move(out), "add", {a, b}, [a, b](Node& o) {
    size_t n = o.grad.numel();
    if (a->requires_grad) acc(a->grad_ref(), o.grad.data(), n);
    if (b->requires_grad) acc(b->grad_ref(), o.grad.data(), n);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_dims(a, b, "sub");
  Tensor out(a->value.dims);
  kern::ops().sub(a->value.data(), b->value.data(), out.data(), out.numel());
  return make_node(std::move(out), "sub", {a, b}, [a, b](Node& o) {
    size_t n = o.grad.numel();
    if (a->requires_grad) acc(a->grad_ref(), o.grad.data(), n);
    if (b->requires_grad) kern::ops().axpy(-1.f, o.grad.data(), b->grad_ref().data(), n);
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_dims(a, b, "mul");
  Tensor out(a->value.dims);
  kern::ops().mul(a->value.data(), b->value.data(), out.data(), out.numel());
  return make_node(std::move(out), "mul", {a, b}, [a, b](Node& o) {
    size_t n = o.grad.numel();
    if (a->requires_grad) {
      float* g = a->grad_ref().data();
      const float* go = o.grad.data();
      const float* bv = b->value.data();
      for (size_t i = 0; i < n; ++i) g[i] += go[i] * bv[i];
    }
    if (b->requires_grad) {
      float* g = b->grad_ref().data();
      const float* go = o.grad.data();
      const float* av = a->value.data();
      for (size_t i = 0; i < n; ++i) g[i] += go[i] * av[i];
    }
  });
}

Var scale(const Var& x, float alpha) {
  Tensor out(x->value.dims);
  kern::ops().scale(x->value.data(), alpha, out.data(), out.numel());
  return make_node(std::move(out), "scale", {x}, [x, alpha](Node& o) {
    if (x->requires_grad)
      kern::ops().axpy(alpha, o.grad.data(), x->grad_ref().data(), o.grad.numel());
  });
}

Var add_const(const Var& x, float c) {
  Tensor out(x->value.dims);
  kern::ops().affine(x->value.data(), 1.f, c, out.data(), out.numel());
  return make_node(std::move(out), "add_const", {x}, [x](Node& o) {
    if (x->requires_grad) acc(x->grad_ref(), o.grad.data(), o.grad.numel());
  });
}

namespace {
// evaluated in double so the stored f32 carries only storage quantization
inline float sigmoid_f(float x) {
  double xd = x;
  if (xd >= 0.0) {
    double e = std::exp(-xd);
    return static_cast<float>(1.0 / (1.0 + e));
  }
  double e = std::exp(xd);
  return static_cast<float>(e / (1.0 + e));
}
inline float softplus_f(float x) {
  double xd = x;
  return static_cast<float>(std::max(xd, 0.0) +
                            std::log1p(std::exp(-std::fabs(xd))));
}
}  // namespace

Var sigmoid(const Var& x) {
  Tensor out(x->value.dims);
  const float* xv = x->value.data();
  for (size_t i = 0; i < out.numel(); ++i) out.v[i] = sigmoid_f(xv[i]);
  return make_node(std::move(out), "sigmoid", {x}, [x](Node& o) {
    if (!x->requires_grad) return;
    float* g = x->grad_ref().data();
    const float* go = o.grad.data();
    const float* y = o.value.data();
    for (size_t i = 0; i < o.grad.numel(); ++i)
      g[i] += go[i] * y[i] * (1.f - y[i]);
  });
}

Var softplus(const Var& x) {
  Tensor out(x->value.dims);
  const float* xv = x->value.data();
  for (size_t i = 0; i < out.numel(); ++i) out.v[i] = softplus_f(xv[i]);
  return make_node(std::move(out), "softplus", {x}, [x](Node& o) {
    if (!x->requires_grad) return;
    float* g = x->grad_ref().data();
    const float* go = o.grad.data();
    const float* xv = x->value.data();
    for (size_t i = 0; i < o.grad.numel(); ++i) g[i] += go[i] * sigmoid_f(xv[i]);
  });
}

Var leaky_relu(const Var& x, float slope) {
  if (!(slope > 0.f && slope < 1.f))
    throw ConfigError("leaky_relu: slope must be in (0,1)");
  Tensor out(x->value.dims);
  kern::ops().leaky_relu(x->value.data(), slope, out.data(), out.numel());
  return make_node(std::move(out), "leaky_relu", {x}, [x, slope](Node& o) {
    if (x->requires_grad)
      kern::ops().leaky_relu_grad(x->value.data(), o.grad.data(), slope,
                                  x->grad_ref().data(), o.grad.numel());
  });
}

Var smooth_l1(const Var& x) {
  Tensor out(x->value.dims);
  const float* xv = x->value.data();
  for (size_t i = 0; i < out.numel(); ++i) {
    float d = xv[i];
    float a = std::fabs(d);
    out.v[i] = a < 1.f ? 0.5f * d * d : a - 0.5f;
  }
  return make_node(std::move(out), "smooth_l1", {x}, [x](Node& o) {
    if (!x->requires_grad) return;
    float* g = x->grad_ref().data();
    const float* go = o.grad.data();
    const float* xv = x->value.data();
    for (size_t i = 0; i < o.grad.numel(); ++i)
      g[i] += go[i] * std::clamp(xv[i], -1.f, 1.f);
  });
}

// ---------------------------------------------------------------------------
// reductions

Var sum(const Var& x) {
  Tensor out({1});
  double acc = kern::ops().sum(x->value.data(), x->value.numel());
  out.v[0] = static_cast<float>(acc);
  Var node = make_node(std::move(out), "sum", {x}, [x](Node& o) {
    if (!x->requires_grad) return;
    float g = o.grad.v[0];
    float* gx = x->grad_ref().data();
    for (size_t i = 0; i < x->grad.numel(); ++i) gx[i] += g;
  });
  node->hi_scalar = acc;
  node->has_hi_scalar = true;
  return node;
}

Var mean(const Var& x) {
  size_t n = x->value.numel();
  Tensor out({1});
  double acc =
      kern::ops().sum(x->value.data(), n) / static_cast<double>(n);
  out.v[0] = static_cast<float>(acc);
  Var node = make_node(std::move(out), "mean", {x}, [x, n](Node& o) {
    if (!x->requires_grad) return;
    float g = o.grad.v[0] / static_cast<float>(n);
    float* gx = x->grad_ref().data();
    for (size_t i = 0; i < n; ++i) gx[i] += g;
  });
  node->hi_scalar = acc;
  node->has_hi_scalar = true;
  return node;
}

// ---------------------------------------------------------------------------
// channel structure ops ([C,H,W])

namespace {
void require_rank3(const Var& x, const char* op) {
  if (x->value.rank() != 3)
    throw DimError(std::string(op) + ": expected rank-3 tensor, got " +
                   dims_str(x->value.dims));
}
}  // namespace

Var concat_channels(const std::vector<Var>& xs) {
  if (xs.empty()) throw DimError("concat_channels: empty input list");
  require_rank3(xs[0], "concat_channels");
  int h = xs[0]->value.dim(1), w = xs[0]->value.dim(2);
  int c_total = 0;
  for (const auto& x : xs) {
    require_rank3(x, "concat_channels");
    if (x->value.dim(1) != h || x->value.dim(2) != w)
      throw DimError("concat_channels: spatial dims differ");
    c_total += x->value.dim(0);
  }
  Tensor out({c_total, h, w});
  size_t plane = static_cast<size_t>(h) * w;
  size_t off = 0;
  for (const auto& x : xs) {
    std::copy(x->value.v.begin(), x->value.v.end(), out.v.begin() + off);
    off += static_cast<size_t>(x->value.dim(0)) * plane;
  }
  std::vector<Var> inputs(xs.begin(), xs.end());
  return make_node(std::move(out), "concat_channels", inputs, [xs, plane](Node& o) {
    size_t off = 0;
    for (const auto& x : xs) {
      size_t n = static_cast<size_t>(x->value.dim(0)) * plane;
      if (x->requires_grad) acc(x->grad_ref(), o.grad.data() + off, n);
      off += n;
    }
  });
}

Var slice_channels(const Var& x, int start, int count) {
  require_rank3(x, "slice_channels");
  int c = x->value.dim(0);
  if (start < 0 || count <= 0 || start + count > c)
    throw DimError("slice_channels: range out of bounds");
  int h = x->value.dim(1), w = x->value.dim(2);
  size_t plane = static_cast<size_t>(h) * w;
  Tensor out({count, h, w});
  std::copy_n(x->value.v.begin() + start * plane, count * plane, out.v.begin());
  return make_node(std::move(out), "slice_channels", {x},
                   [x, start, plane](Node& o) {
                     if (x->requires_grad)
                       kern::ops().axpy(1.f, o.grad.data(),
                                        x->grad_ref().data() + start * plane,
                                        o.grad.numel());
                   });
}

Var pad_channels(const Var& x, int new_c) {
  require_rank3(x, "pad_channels");
  int c = x->value.dim(0);
  if (new_c < c) throw DimError("pad_channels: target channel count smaller");
  int h = x->value.dim(1), w = x->value.dim(2);
  Tensor out({new_c, h, w});
  std::copy(x->value.v.begin(), x->value.v.end(), out.v.begin());
  return make_node(std::move(out), "pad_channels", {x}, [x](Node& o) {
    if (x->requires_grad) acc(x->grad_ref(), o.grad.data(), x->value.numel());
  });
}

// ---------------------------------------------------------------------------
// conv2d

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int padding) {
  require_rank3(x, "conv2d");
  if (w->value.rank() != 4) throw DimError("conv2d: weight must be rank 4");
  int c_in = x->value.dim(0), h = x->value.dim(1), wd = x->value.dim(2);
  int c_out = w->value.dim(0);
  int kh = w->value.dim(2), kw = w->value.dim(3);
  if (w->value.dim(1) != c_in)
    throw DimError("conv2d: weight in-channels " + std::to_string(w->value.dim(1)) +
                   " != input channels " + std::to_string(c_in));
  if (kh != kw || (kh != 1 && kh != 3))
    throw DimError("conv2d: only 1x1 and 3x3 kernels supported");
  if (stride != 1) throw DimError("conv2d: stride must be 1");
  int want_pad = kh == 3 ? 1 : 0;
  if (padding >= 0 && padding != want_pad)
    throw DimError("conv2d: padding must preserve spatial dims");
  if (b->value.rank() != 1 || b->value.dim(0) != c_out)
    throw DimError("conv2d: bias shape mismatch");

  size_t plane = static_cast<size_t>(h) * wd;
  Tensor out({c_out, h, wd});
  const auto& K = kern::ops();
  const float* xv = x->value.data();
  const float* wv = w->value.data();
  for (int co = 0; co < c_out; ++co) {
    float* op_ = out.data() + co * plane;
    std::fill(op_, op_ + plane, b->value.v[static_cast<size_t>(co)]);
    if (kh == 1) {
      for (int ci = 0; ci < c_in; ++ci)
        K.axpy(wv[static_cast<size_t>(co) * c_in + ci], xv + ci * plane, op_, plane);
    } else {
      for (int ci = 0; ci < c_in; ++ci)
        K.conv3x3_acc(xv + ci * plane, h, wd,
                      wv + (static_cast<size_t>(co) * c_in + ci) * 9, op_);
    }
  }

  return make_node(
      std::move(out), "conv2d", {x, w, b}, [x, w, b, c_in, c_out, h, wd, kh, plane](Node& o) {
        const auto& K = kern::ops();
        const float* go = o.grad.data();
        const float* xv = x->value.data();
        const float* wv = w->value.data();
        if (b->requires_grad) {
          float* gb = b->grad_ref().data();
          for (int co = 0; co < c_out; ++co)
            gb[co] += static_cast<float>(K.sum(go + co * plane, plane));
        }
        if (kh == 1) {
          if (w->requires_grad) {
            float* gw = w->grad_ref().data();
            for (int co = 0; co < c_out; ++co)
              for (int ci = 0; ci < c_in; ++ci)
                gw[static_cast<size_t>(co) * c_in + ci] +=
                    K.dot(xv + ci * plane, go + co * plane, plane);
          }
          if (x->requires_grad) {
            float* gx = x->grad_ref().data();
            for (int co = 0; co < c_out; ++co)
              for (int ci = 0; ci < c_in; ++ci)
                K.axpy(wv[static_cast<size_t>(co) * c_in + ci], go + co * plane,
                       gx + ci * plane, plane);
          }
        } else {
          if (w->requires_grad) {
            float* gw = w->grad_ref().data();
            for (int co = 0; co < c_out; ++co)
              for (int ci = 0; ci < c_in; ++ci)
                K.conv3x3_grad_w(xv + ci * plane, go + co * plane, h, wd,
                                 gw + (static_cast<size_t>(co) * c_in + ci) * 9);
          }
          if (x->requires_grad) {
            float* gx = x->grad_ref().data();
            for (int co = 0; co < c_out; ++co)
              for (int ci = 0; ci < c_in; ++ci) {
                const float* wk = wv + (static_cast<size_t>(co) * c_in + ci) * 9;
                float flipped[9];
                for (int j = 0; j < 9; ++j) flipped[j] = wk[8 - j];
                K.conv3x3_acc(go + co * plane, h, wd, flipped, gx + ci * plane);
              }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// batchnorm2d

Var batchnorm2d(const Var& x, const Var& gamma, const Var& beta,
                BatchNormState& state, bool training, float eps) {
  int rank = x->value.rank();
  if (rank != 3 && rank != 4)
    throw DimError("batchnorm2d: expected rank 3 or 4, got " +
                   dims_str(x->value.dims));
  int n_batch = rank == 4 ? x->value.dim(0) : 1;
  int c = x->value.dim(rank - 3);
  int h = x->value.dim(rank - 2);
  int wd = x->value.dim(rank - 1);
  if (gamma->value.rank() != 1 || gamma->value.dim(0) != c ||
      beta->value.rank() != 1 || beta->value.dim(0) != c)
    throw DimError("batchnorm2d: gamma/beta must be [C]");
  if (eps <= 0.f) throw ConfigError("batchnorm2d: eps must be positive");
  if (state.running_mean.empty()) state.init(c);
  if (static_cast<int>(state.running_mean.size()) != c)
    throw DimError("batchnorm2d: state channel mismatch");

  size_t plane = static_cast<size_t>(h) * wd;
  size_t chan_stride = static_cast<size_t>(c) * plane;
  size_t m = static_cast<size_t>(n_batch) * plane;
  if (training && m == 1)
    throw DegenerateStatsError("batchnorm2d: single-element batch statistics");

  const auto& K = kern::ops();
  const float* xv = x->value.data();
  std::vector<float> mean_c(static_cast<size_t>(c)), istd_c(static_cast<size_t>(c));
  if (training) {
    for (int ch = 0; ch < c; ++ch) {
      double s = 0.0, s2 = 0.0;
      for (int nb = 0; nb < n_batch; ++nb) {
        const float* p = xv + nb * chan_stride + ch * plane;
        s += K.sum(p, plane);
        s2 += K.sumsq(p, plane);
      }
      double mu = s / static_cast<double>(m);
      double var = s2 / static_cast<double>(m) - mu * mu;
      if (var < 0.0) var = 0.0;  // guard fp cancellation
      mean_c[static_cast<size_t>(ch)] = static_cast<float>(mu);
      istd_c[static_cast<size_t>(ch)] =
          1.f / std::sqrt(static_cast<float>(var) + eps);
      float mom = state.momentum;
      state.running_mean[static_cast<size_t>(ch)] =
          (1.f - mom) * state.running_mean[static_cast<size_t>(ch)] +
          mom * static_cast<float>(mu);
      state.running_var[static_cast<size_t>(ch)] =
          (1.f - mom) * state.running_var[static_cast<size_t>(ch)] +
          mom * static_cast<float>(var);
    }
  } else {
    for (int ch = 0; ch < c; ++ch) {
      mean_c[static_cast<size_t>(ch)] = state.running_mean[static_cast<size_t>(ch)];
      istd_c[static_cast<size_t>(ch)] =
          1.f / std::sqrt(state.running_var[static_cast<size_t>(ch)] + eps);
    }
  }

  Tensor xhat(x->value.dims);
  Tensor out(x->value.dims);
  for (int nb = 0; nb < n_batch; ++nb) {
    for (int ch = 0; ch < c; ++ch) {
      size_t off = nb * chan_stride + ch * plane;
      float mu = mean_c[static_cast<size_t>(ch)];
      float istd = istd_c[static_cast<size_t>(ch)];
      K.affine(xv + off, istd, -mu * istd, xhat.data() + off, plane);
      K.affine(xhat.data() + off, gamma->value.v[static_cast<size_t>(ch)],
               beta->value.v[static_cast<size_t>(ch)], out.data() + off, plane);
    }
  }

  auto xhat_p = std::make_shared<Tensor>(std::move(xhat));
  auto istd_p = std::make_shared<std::vector<float>>(std::move(istd_c));
  return make_node(
      std::move(out), "batchnorm2d", {x, gamma, beta},
      [x, gamma, beta, xhat_p, istd_p, n_batch, c, plane, chan_stride, m,
       training](Node& o) {
        const float* go = o.grad.data();
        const float* xh = xhat_p->data();
        for (int ch = 0; ch < c; ++ch) {
          double sg = 0.0, sgx = 0.0;
          for (int nb = 0; nb < n_batch; ++nb) {
            size_t off = nb * chan_stride + ch * plane;
            const float* g = go + off;
            const float* xr = xh + off;
            for (size_t i = 0; i < plane; ++i) {
              sg += g[i];
              sgx += static_cast<double>(g[i]) * xr[i];
            }
          }
          if (beta->requires_grad)
            beta->grad_ref().v[static_cast<size_t>(ch)] += static_cast<float>(sg);
          if (gamma->requires_grad)
            gamma->grad_ref().v[static_cast<size_t>(ch)] += static_cast<float>(sgx);
          if (x->requires_grad) {
            float a = gamma->value.v[static_cast<size_t>(ch)] *
                      (*istd_p)[static_cast<size_t>(ch)];
            float mg = training ? static_cast<float>(sg / static_cast<double>(m)) : 0.f;
            float mgx = training ? static_cast<float>(sgx / static_cast<double>(m)) : 0.f;
            float* gx = x->grad_ref().data();
            for (int nb = 0; nb < n_batch; ++nb) {
              size_t off = nb * chan_stride + ch * plane;
              const float* g = go + off;
              const float* xr = xh + off;
              float* gxo = gx + off;
              for (size_t i = 0; i < plane; ++i)
                gxo[i] += a * (g[i] - mg - xr[i] * mgx);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// bilinear resize

namespace {
struct AxisMap {
  std::vector<int> i0, i1;
  std::vector<float> f;  // weight of i1
};

AxisMap make_axis_map(int in, int out) {
  AxisMap m;
  m.i0.resize(static_cast<size_t>(out));
  m.i1.resize(static_cast<size_t>(out));
  m.f.resize(static_cast<size_t>(out));
  double r = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double s = (o + 0.5) * r - 0.5;
    int lo = static_cast<int>(std::floor(s));
    float f = static_cast<float>(s - lo);
    int lo_c = std::clamp(lo, 0, in - 1);
    int hi_c = std::clamp(lo + 1, 0, in - 1);
    m.i0[static_cast<size_t>(o)] = lo_c;
    m.i1[static_cast<size_t>(o)] = hi_c;
    m.f[static_cast<size_t>(o)] = f;
  }
  return m;
}
}  // namespace

Var bilinear_resize(const Var& x, int out_h, int out_w) {
  require_rank3(x, "bilinear_resize");
  if (out_h < 1 || out_w < 1)
    throw DimError("bilinear_resize: output dims must be positive");
  int c = x->value.dim(0), h = x->value.dim(1), w = x->value.dim(2);
  AxisMap ym = make_axis_map(h, out_h);
  AxisMap xm = make_axis_map(w, out_w);
  Tensor out({c, out_h, out_w});
  const float* xv = x->value.data();
  for (int ch = 0; ch < c; ++ch) {
    const float* src = xv + static_cast<size_t>(ch) * h * w;
    float* dst = out.data() + static_cast<size_t>(ch) * out_h * out_w;
    for (int oy = 0; oy < out_h; ++oy) {
      const float* r0 = src + static_cast<size_t>(ym.i0[oy]) * w;
      const float* r1 = src + static_cast<size_t>(ym.i1[oy]) * w;
      float fy = ym.f[static_cast<size_t>(oy)];
      float* drow = dst + static_cast<size_t>(oy) * out_w;
      for (int ox = 0; ox < out_w; ++ox) {
        int x0 = xm.i0[static_cast<size_t>(ox)], x1 = xm.i1[static_cast<size_t>(ox)];
        float fx = xm.f[static_cast<size_t>(ox)];
        float top = r0[x0] + fx * (r0[x1] - r0[x0]);
        float bot = r1[x0] + fx * (r1[x1] - r1[x0]);
        drow[ox] = top + fy * (bot - top);
      }
    }
  }
  return make_node(
      std::move(out), "bilinear_resize", {x}, [x, c, h, w, out_h, out_w](Node& o) {
        if (!x->requires_grad) return;
        AxisMap ym = make_axis_map(h, out_h);
        AxisMap xm = make_axis_map(w, out_w);
        const float* go = o.grad.data();
        float* gx = x->grad_ref().data();
        for (int ch = 0; ch < c; ++ch) {
          float* gsrc = gx + static_cast<size_t>(ch) * h * w;
          const float* gdst = go + static_cast<size_t>(ch) * out_h * out_w;
          for (int oy = 0; oy < out_h; ++oy) {
            int y0 = ym.i0[static_cast<size_t>(oy)], y1 = ym.i1[static_cast<size_t>(oy)];
            float fy = ym.f[static_cast<size_t>(oy)];
            const float* grow = gdst + static_cast<size_t>(oy) * out_w;
            for (int ox = 0; ox < out_w; ++ox) {
              int x0 = xm.i0[static_cast<size_t>(ox)], x1 = xm.i1[static_cast<size_t>(ox)];
              float fx = xm.f[static_cast<size_t>(ox)];
              float g = grow[ox];
              gsrc[static_cast<size_t>(y0) * w + x0] += g * (1.f - fy) * (1.f - fx);
              gsrc[static_cast<size_t>(y0) * w + x1] += g * (1.f - fy) * fx;
              gsrc[static_cast<size_t>(y1) * w + x0] += g * fy * (1.f - fx);
              gsrc[static_cast<size_t>(y1) * w + x1] += g * fy * fx;
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// attention fuse

Var attention_fuse(const std::vector<Var>& features) {
  if (features.empty()) throw DimError("attention_fuse: empty feature list");
  int a_count = static_cast<int>(features.size());
  require_rank3(features[0], "attention_fuse");
  int c = features[0]->value.dim(0);
  int h = features[0]->value.dim(1), w = features[0]->value.dim(2);
  for (const auto& f : features) {
    require_rank3(f, "attention_fuse");
    if (f->value.dim(0) != c || f->value.dim(1) != h || f->value.dim(2) != w)
      throw DimError("attention_fuse: geometry mismatch");
  }
  size_t plane = static_cast<size_t>(h) * w;
  float inv_sqrt_c = 1.f / std::sqrt(static_cast<float>(c));

  // per-cell agent scores from the query slot
  std::vector<float> sc(static_cast<size_t>(a_count) * plane, 0.f);
  const float* q = features[0]->value.data();
  for (int a = 0; a < a_count; ++a) {
    const float* fa = features[static_cast<size_t>(a)]->value.data();
    float* sa = sc.data() + static_cast<size_t>(a) * plane;
    for (int ch = 0; ch < c; ++ch) {
      const float* qp = q + static_cast<size_t>(ch) * plane;
      const float* fp = fa + static_cast<size_t>(ch) * plane;
      for (size_t p = 0; p < plane; ++p) sa[p] += qp[p] * fp[p];
    }
    for (size_t p = 0; p < plane; ++p) sa[p] *= inv_sqrt_c;
  }
  // softmax over agents per cell
  auto wts = std::make_shared<std::vector<float>>(static_cast<size_t>(a_count) * plane);
  for (size_t p = 0; p < plane; ++p) {
    float mx = sc[p];
    for (int a = 1; a < a_count; ++a)
      mx = std::max(mx, sc[static_cast<size_t>(a) * plane + p]);
    float denom = 0.f;
    for (int a = 0; a < a_count; ++a) {
      float e = std::exp(sc[static_cast<size_t>(a) * plane + p] - mx);
      (*wts)[static_cast<size_t>(a) * plane + p] = e;
      denom += e;
    }
    for (int a = 0; a < a_count; ++a)
      (*wts)[static_cast<size_t>(a) * plane + p] /= denom;
  }

  Tensor out({c, h, w});
  for (int a = 0; a < a_count; ++a) {
    const float* fa = features[static_cast<size_t>(a)]->value.data();
    const float* wa = wts->data() + static_cast<size_t>(a) * plane;
    for (int ch = 0; ch < c; ++ch) {
      float* op_ = out.data() + static_cast<size_t>(ch) * plane;
      const float* fp = fa + static_cast<size_t>(ch) * plane;
      for (size_t p = 0; p < plane; ++p) op_[p] += wa[p] * fp[p];
    }
  }

  std::vector<Var> inputs(features.begin(), features.end());
  return make_node(
      std::move(out), "attention_fuse", inputs,
      [features, wts, a_count, c, plane, inv_sqrt_c](Node& o) {
        const float* go = o.grad.data();
        // dL/dw_a per cell
        std::vector<float> dw(static_cast<size_t>(a_count) * plane, 0.f);
        for (int a = 0; a < a_count; ++a) {
          const float* fa = features[static_cast<size_t>(a)]->value.data();
          float* da = dw.data() + static_cast<size_t>(a) * plane;
          for (int ch = 0; ch < c; ++ch) {
            const float* gp = go + static_cast<size_t>(ch) * plane;
            const float* fp = fa + static_cast<size_t>(ch) * plane;
            for (size_t p = 0; p < plane; ++p) da[p] += gp[p] * fp[p];
          }
        }
        // softmax backward
        std::vector<float> ds(static_cast<size_t>(a_count) * plane);
        for (size_t p = 0; p < plane; ++p) {
          float dotv = 0.f;
          for (int a = 0; a < a_count; ++a)
            dotv += (*wts)[static_cast<size_t>(a) * plane + p] *
                    dw[static_cast<size_t>(a) * plane + p];
          for (int a = 0; a < a_count; ++a) {
            size_t idx = static_cast<size_t>(a) * plane + p;
            ds[idx] = (*wts)[idx] * (dw[idx] - dotv);
          }
        }
        const float* q = features[0]->value.data();
        for (int a = 0; a < a_count; ++a) {
          const auto& fa_var = features[static_cast<size_t>(a)];
          const float* wa = wts->data() + static_cast<size_t>(a) * plane;
          const float* dsa = ds.data() + static_cast<size_t>(a) * plane;
          // value path
          if (fa_var->requires_grad) {
            float* gfa = fa_var->grad_ref().data();
            for (int ch = 0; ch < c; ++ch) {
              const float* gp = go + static_cast<size_t>(ch) * plane;
              float* gf = gfa + static_cast<size_t>(ch) * plane;
              for (size_t p = 0; p < plane; ++p) gf[p] += wa[p] * gp[p];
            }
          }
          // key path: gFa += inv_sqrt_c * ds_a * F0
          if (fa_var->requires_grad) {
            float* gfa = fa_var->grad_ref().data();
            for (int ch = 0; ch < c; ++ch) {
              const float* qp = q + static_cast<size_t>(ch) * plane;
              float* gf = gfa + static_cast<size_t>(ch) * plane;
              for (size_t p = 0; p < plane; ++p)
                gf[p] += inv_sqrt_c * dsa[p] * qp[p];
            }
          }
          // query path: gF0 += inv_sqrt_c * ds_a * Fa
          if (features[0]->requires_grad) {
            float* gq = features[0]->grad_ref().data();
            const float* fav = fa_var->value.data();
            for (int ch = 0; ch < c; ++ch) {
              const float* fp = fav + static_cast<size_t>(ch) * plane;
              float* gf = gq + static_cast<size_t>(ch) * plane;
              for (size_t p = 0; p < plane; ++p)
                gf[p] += inv_sqrt_c * dsa[p] * fp[p];
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// backward

void backward(const Var& root) {
  if (!root) throw Error("backward: null root");
  if (root->value.numel() != 1)
    throw DimError("backward: root must be scalar, got " +
                   dims_str(root->value.dims));
  if (!root->requires_grad) return;

  // iterative post-order DFS over grad-requiring nodes
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->inputs.size()) {
      Node* child = node->inputs[idx].get();
      ++idx;
      if (child->requires_grad && !seen.count(child)) {
        seen.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->grad_ref().v[0] += 1.f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backprop && n->has_grad()) n->backprop(*n);
  }
  for (Node* n : order)
    if (n->has_grad()) check_finite(n->grad, "backward gradient");
}

void zero_grad(const std::vector<Var>& params) {
  for (const auto& p : params)
    if (p->has_grad()) std::fill(p->grad.v.begin(), p->grad.v.end(), 0.f);
}

// ---------------------------------------------------------------------------
// Adam

AdamState make_adam(const std::vector<Var>& params, float lr, float beta1,
                    float beta2, float eps) {
  if (lr <= 0.f || beta1 <= 0.f || beta2 <= 0.f || eps <= 0.f)
    throw ConfigError("adam: hyperparameters must be positive");
  AdamState s;
  s.lr = lr;
  s.beta1 = beta1;
  s.beta2 = beta2;
  s.eps = eps;
  for (const auto& p : params) {
    s.m.emplace_back(p->value.dims);
    s.v.emplace_back(p->value.dims);
  }
  return s;
}

void adam_step(const std::vector<Var>& params, AdamState& state) {
  if (params.size() != state.m.size())
    throw DimError("adam_step: parameter count mismatch");
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    if (!p->value.same_dims(state.m[i]))
      throw DimError("adam_step: moment shape mismatch");
    if (p->has_grad() && !kern::ops().all_finite(p->grad.data(), p->grad.numel()))
      throw NumericError("adam_step: non-finite gradient");
  }
  state.step += 1;
  float bc1 = 1.f / (1.f - std::pow(state.beta1, static_cast<float>(state.step)));
  float bc2 = 1.f / (1.f - std::pow(state.beta2, static_cast<float>(state.step)));
  for (size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    Tensor zeros;
    if (!p->has_grad()) zeros = Tensor(p->value.dims);
    const Tensor& g = p->has_grad() ? p->grad : zeros;
    kern::ops().adam_update(p->value.data(), g.data(), state.m[i].data(),
                            state.v[i].data(), p->value.numel(), state.lr,
                            state.beta1, state.beta2, state.eps, bc1, bc2);
  }
}

}  // namespace cods
