#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "cods/common.hpp"

namespace cods {

// Dense row-major f32 tensor.
struct Tensor {
  std::vector<int> dims;
  std::vector<float> v;

  Tensor() = default;
  explicit Tensor(std::vector<int> d, float fill = 0.f);

  size_t numel() const { return v.size(); }
  int rank() const { return static_cast<int>(dims.size()); }
  int dim(int i) const { return dims[static_cast<size_t>(i)]; }
  float* data() { return v.data(); }
  const float* data() const { return v.data(); }
  bool same_dims(const Tensor& o) const { return dims == o.dims; }

  // slow accessors, for tests and cold paths
  float& at3(int c, int y, int x);
  float at3(int c, int y, int x) const;

  static Tensor zeros_like(const Tensor& t) { return Tensor(t.dims); }
  static Tensor full(std::vector<int> d, float value);
};

size_t numel_of(const std::vector<int>& dims);
std::string dims_str(const std::vector<int>& dims);
void check_finite(const Tensor& t, const char* what);

Tensor randn(std::vector<int> dims, Rng& rng, float stddev = 1.f);
Tensor rand_uniform(std::vector<int> dims, Rng& rng, float lo, float hi);
// fan-in Kaiming uniform: bound = sqrt(6 / fan_in) scaled for leaky slope
Tensor kaiming_uniform(std::vector<int> dims, Rng& rng, float leaky_slope = 0.1f);

// ---------------------------------------------------------------------------
// Reverse-mode graph.

class Node;
using Var = std::shared_ptr<Node>;

class Node {
 public:
  Tensor value;
  Tensor grad;  // empty until first accumulation
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<Var> inputs;
  std::function<void(Node&)> backprop;
  // reductions keep their double accumulator; used by numeric oracles
  double hi_scalar = 0.0;
  bool has_hi_scalar = false;

  Tensor& grad_ref();  // allocates zeros on first use
  bool has_grad() const { return !grad.v.empty(); }
};

Var leaf(Tensor t, bool requires_grad = false);
Var constant(Tensor t);
Var scalar_var(float x);

bool grad_enabled();
struct NoGrad {
  NoGrad();
  ~NoGrad();
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;

 private:
  bool prev_;
};

// elementwise
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& x, float alpha);
Var add_const(const Var& x, float c);
Var sigmoid(const Var& x);
Var softplus(const Var& x);
Var leaky_relu(const Var& x, float slope);
Var smooth_l1(const Var& x);  // elementwise Huber, delta = 1

// reductions
Var sum(const Var& x);
Var mean(const Var& x);

// structure (rank-3 [C,H,W])
Var concat_channels(const std::vector<Var>& xs);
Var slice_channels(const Var& x, int start, int count);
Var pad_channels(const Var& x, int new_c);

// stride must be 1; kernel 1x1 (padding 0) or 3x3 (padding 1)
Var conv2d(const Var& x, const Var& w, const Var& b, int stride = 1,
           int padding = -1);

struct BatchNormState {
  std::vector<float> running_mean, running_var;
  float momentum = 0.1f;
  void init(int channels) {
    running_mean.assign(static_cast<size_t>(channels), 0.f);
    running_var.assign(static_cast<size_t>(channels), 1.f);
  }
};

// x is [C,H,W] or [N,C,H,W]; stats per channel over N*H*W
Var batchnorm2d(const Var& x, const Var& gamma, const Var& beta,
                BatchNormState& state, bool training, float eps = 1e-5f);

// half-pixel source coordinates, edge-clamped
Var bilinear_resize(const Var& x, int out_h, int out_w);

// features[0] is the query slot; scaled dot-product weights per cell
Var attention_fuse(const std::vector<Var>& features);

void backward(const Var& root);  // root must be scalar
void zero_grad(const std::vector<Var>& params);

// ---------------------------------------------------------------------------
// Optimizer.

struct AdamState {
  int64_t step = 0;
  float lr = 0.002f, beta1 = 0.9f, beta2 = 0.999f, eps = 1e-8f;
  std::vector<Tensor> m, v;
};

AdamState make_adam(const std::vector<Var>& params, float lr = 0.002f,
                    float beta1 = 0.9f, float beta2 = 0.999f,
                    float eps = 1e-8f);
void adam_step(const std::vector<Var>& params, AdamState& state);

// ---------------------------------------------------------------------------
// CTNS tensor dump: magic "CTNS", u32 version=1, u32 rank, rank x u64 dims,
// f32 little-endian row-major payload.

void save_ctns(const std::string& path, const Tensor& t);
Tensor load_ctns(const std::string& path);

}  // namespace cods
