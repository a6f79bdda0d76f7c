#include "cods/lscr.hpp"

namespace cods::adapter {

LscrParams build_lscr(int in_channels, int out_channels, int target_h,
                      int target_w, uint64_t seed) {
  if (in_channels < 1 || out_channels < 1 || target_h < 1 || target_w < 1)
    throw ConfigError("lscr: dims must be positive");
  Rng rng(seed);
  LscrParams p;
  p.weight = leaf(kaiming_uniform({out_channels, in_channels, 1, 1}, rng), true);
  p.bias = leaf(Tensor({out_channels}), true);
  p.target_h = target_h;
  p.target_w = target_w;
  p.init_seed = seed;
  return p;
}

Var lscr_forward(const LscrParams& params, const Var& f_proj) {
  if (f_proj->value.rank() != 3)
    throw DimError("lscr_forward: expected [C,H,W]");
  if (f_proj->value.dim(0) != params.in_channels())
    throw DimError("lscr_forward: channel mismatch, got " +
                   std::to_string(f_proj->value.dim(0)) + " want " +
                   std::to_string(params.in_channels()));
  Var aligned = conv2d(f_proj, params.weight, params.bias);
  return bilinear_resize(aligned, params.target_h, params.target_w);
}

Tensor hete_resize(const Tensor& f, int out_c, int out_h, int out_w) {
  if (f.rank() != 3) throw DimError("hete_resize: expected [C,H,W]");
  NoGrad ng;
  Var resized = bilinear_resize(constant(f), out_h, out_w);
  int c = f.dim(0);
  if (c == out_c) return resized->value;
  if (c > out_c) return slice_channels(resized, 0, out_c)->value;
  return pad_channels(resized, out_c)->value;
}

}  // namespace cods::adapter
