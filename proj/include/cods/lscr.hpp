#pragma once

#include "cods/tensor.hpp"

namespace cods::adapter {

// Channel alignment by 1x1 conv, then bilinear spatial resize to the ego
// grid, in that order.
struct LscrParams {
  Var weight;  // [C, C_in, 1, 1]
  Var bias;    // [C]
  int target_h = 0, target_w = 0;
  uint64_t init_seed = 0;
  int in_channels() const { return weight->value.dim(1); }
  int out_channels() const { return weight->value.dim(0); }
};

LscrParams build_lscr(int in_channels, int out_channels, int target_h,
                      int target_w, uint64_t seed);

Var lscr_forward(const LscrParams& params, const Var& f_proj);

// Parameter-free baseline: bilinear to (h,w), then channel slice or zero-pad.
Tensor hete_resize(const Tensor& f, int out_c, int out_h, int out_w);

}  // namespace cods::adapter
