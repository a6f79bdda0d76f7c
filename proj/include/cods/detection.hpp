#pragma once

#include <vector>

#include "cods/tensor.hpp"
#include "cods/world.hpp"

namespace cods::det {

struct BoxBev {
  float cx = 0, cy = 0, w = 0, l = 0, yaw = 0;
};

inline BoxBev to_bev(const world::GroundTruthBox& g) {
  return {g.cx, g.cy, g.w, g.l, g.yaw};
}

// intersection over union of rotated BEV rectangles (polygon clipping)
float rotated_iou(const BoxBev& a, const BoxBev& b);

struct DetectionBox {
  float cx = 0, cy = 0, w = 0, l = 0, yaw = 0;
  float score = 0;  // in [0,1]
  BoxBev bev() const { return {cx, cy, w, l, yaw}; }
};

std::vector<DetectionBox> nms_bev(std::vector<DetectionBox> dets, float iou_thresh);

// all-point interpolated AP with greedy per-scene matching at >= iou_thresh;
// throws EvalError when the ground-truth set is empty
double evaluate_ap(const std::vector<std::vector<DetectionBox>>& dets_per_scene,
                   const std::vector<std::vector<world::GroundTruthBox>>& gts_per_scene,
                   float iou_thresh);

struct LossWeights {
  float beta_dami = 1.f;
  float alpha_cls = 1.f;
  float alpha_reg = 2.f;
  float alpha_dir = 0.2f;
};

// single-anchor head: shared 3x3 conv + LeakyReLU, then 1x1 convs for
// objectness [1], regression [6] (dx, dy, log w, log l, sin yaw, cos yaw)
// and direction bins [2] ({0, pi})
struct HeadParams {
  Var conv_w, conv_b;
  Var cls_w, cls_b;
  Var reg_w, reg_b;
  Var dir_w, dir_b;
};

HeadParams build_head(int channels, uint64_t seed);
std::vector<Var> head_params(const HeadParams& h);

struct DetectionOutput {
  Var cls;  // [1,H,W] logits
  Var reg;  // [6,H,W]
  Var dir;  // [2,H,W] logits
};

DetectionOutput detect(const HeadParams& head, const Var& fused);

struct Targets {
  Tensor cls_mask;    // [1,H,W], 1 at GT center cells
  Tensor reg_target;  // [6,H,W]
  Tensor reg_mask;    // [6,H,W], cls_mask tiled over channels
  Tensor dir_target;  // [1,H,W], 1 where the direction bin is pi
  int n_pos = 0;
};

Targets build_targets(const std::vector<world::GroundTruthBox>& gts,
                      const world::Extent& extent, int h, int w);

// focal (gamma 2, alpha 0.25) + smooth-L1 at positives + direction CE at
// positives, each normalized by max(1, n_pos)
Var detection_loss(const DetectionOutput& out, const Targets& targets,
                   const LossWeights& weights);

double total_loss(double det, double dami, const LossWeights& weights);

std::vector<DetectionBox> decode(const DetectionOutput& out,
                                 const world::Extent& extent,
                                 float score_thresh, float nms_iou);

}  // namespace cods::det
