#include "cods/detection.hpp"

#include <algorithm>
#include <cmath>

namespace cods::det {

namespace {

struct Pt {
  double x, y;
};

void box_corners(const BoxBev& b, Pt out[4]) {
  double c = std::cos(b.yaw), s = std::sin(b.yaw);
  double hl = b.l * 0.5, hw = b.w * 0.5;
  // counter-clockwise in a y-up frame
  const double local[4][2] = {{hl, hw}, {-hl, hw}, {-hl, -hw}, {hl, -hw}};
  for (int i = 0; i < 4; ++i) {
    out[i].x = b.cx + c * local[i][0] - s * local[i][1];
    out[i].y = b.cy + s * local[i][0] + c * local[i][1];
  }
}

double polygon_area(const std::vector<Pt>& p) {
  if (p.size() < 3) return 0.0;
  double acc = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    const Pt& a = p[i];
    const Pt& b = p[(i + 1) % p.size()];
    acc += a.x * b.y - b.x * a.y;
  }
  return 0.5 * std::fabs(acc);
}

// Sutherland-Hodgman clip of `subject` by the half-plane left of (a -> b)
std::vector<Pt> clip_halfplane(const std::vector<Pt>& subject, const Pt& a,
                               const Pt& b) {
  auto side = [&](const Pt& p) {
    return (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
  };
  std::vector<Pt> out;
  size_t n = subject.size();
  for (size_t i = 0; i < n; ++i) {
    const Pt& cur = subject[i];
    const Pt& nxt = subject[(i + 1) % n];
    double sc = side(cur), sn = side(nxt);
    if (sc >= 0) out.push_back(cur);
    if ((sc >= 0) != (sn >= 0)) {
      double t = sc / (sc - sn);
      out.push_back({cur.x + t * (nxt.x - cur.x), cur.y + t * (nxt.y - cur.y)});
    }
  }
  return out;
}

}  // namespace

float rotated_iou(const BoxBev& a, const BoxBev& b) {
  if (a.w <= 0 || a.l <= 0 || b.w <= 0 || b.l <= 0) return 0.f;
  Pt ca[4], cb[4];
  box_corners(a, ca);
  box_corners(b, cb);
  std::vector<Pt> poly(ca, ca + 4);
  for (int e = 0; e < 4 && !poly.empty(); ++e)
    poly = clip_halfplane(poly, cb[e], cb[(e + 1) % 4]);
  double inter = polygon_area(poly);
  double area_a = static_cast<double>(a.w) * a.l;
  double area_b = static_cast<double>(b.w) * b.l;
  double uni = area_a + area_b - inter;
  if (uni <= 0) return 0.f;
  return static_cast<float>(inter / uni);
}

std::vector<DetectionBox> nms_bev(std::vector<DetectionBox> dets,
                                  float iou_thresh) {
  std::stable_sort(dets.begin(), dets.end(),
                   [](const DetectionBox& a, const DetectionBox& b) {
                     return a.score > b.score;
                   });
  std::vector<DetectionBox> kept;
  for (const auto& d : dets) {
    bool suppressed = false;
    for (const auto& k : kept)
      if (rotated_iou(d.bev(), k.bev()) >= iou_thresh) {
        suppressed = true;
        break;
      }
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

double evaluate_ap(
    const std::vector<std::vector<DetectionBox>>& dets_per_scene,
    const std::vector<std::vector<world::GroundTruthBox>>& gts_per_scene,
    float iou_thresh) {
  if (dets_per_scene.size() != gts_per_scene.size())
    throw DimError("evaluate_ap: scene count mismatch");
  size_t total_gt = 0;
  for (const auto& g : gts_per_scene) total_gt += g.size();
  if (total_gt == 0)
    throw EvalError("evaluate_ap: no ground truth, AP undefined");

  struct Flat {
    float score;
    int scene;
    int idx;
  };
  std::vector<Flat> order;
  for (size_t s = 0; s < dets_per_scene.size(); ++s)
    for (size_t i = 0; i < dets_per_scene[s].size(); ++i)
      order.push_back({dets_per_scene[s][i].score, static_cast<int>(s),
                       static_cast<int>(i)});
  std::stable_sort(order.begin(), order.end(), [](const Flat& a, const Flat& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.scene != b.scene) return a.scene < b.scene;
    return a.idx < b.idx;
  });

  std::vector<std::vector<char>> taken;
  for (const auto& g : gts_per_scene)
    taken.emplace_back(g.size(), 0);

  std::vector<double> precision, recall;
  size_t tp = 0, fp = 0;
  for (const auto& f : order) {
    const auto& det = dets_per_scene[static_cast<size_t>(f.scene)]
                                    [static_cast<size_t>(f.idx)];
    const auto& gts = gts_per_scene[static_cast<size_t>(f.scene)];
    int best = -1;
    float best_iou = 0.f;
    for (size_t g = 0; g < gts.size(); ++g) {
      if (taken[static_cast<size_t>(f.scene)][g]) continue;
      float iou = rotated_iou(det.bev(), to_bev(gts[g]));
      if (iou >= iou_thresh && iou > best_iou) {
        best_iou = iou;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0) {
      taken[static_cast<size_t>(f.scene)][static_cast<size_t>(best)] = 1;
      ++tp;
    } else {
      ++fp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(total_gt));
  }
  if (precision.empty()) return 0.0;

  // precision envelope from the right, integrate over recall steps
  std::vector<double> env(precision.size());
  double run = 0.0;
  for (size_t i = precision.size(); i-- > 0;) {
    run = std::max(run, precision[i]);
    env[i] = run;
  }
  double ap = 0.0, prev_r = 0.0;
  for (size_t i = 0; i < recall.size(); ++i) {
    if (recall[i] > prev_r) {
      ap += (recall[i] - prev_r) * env[i];
      prev_r = recall[i];
    }
  }
  return ap;
}

// ---------------------------------------------------------------------------

HeadParams build_head(int channels, uint64_t seed) {
  if (channels < 1) throw ConfigError("head: channels must be positive");
  Rng rng(seed);
  HeadParams h;
  h.conv_w = leaf(kaiming_uniform({channels, channels, 3, 3}, rng), true);
  h.conv_b = leaf(Tensor({channels}), true);
  h.cls_w = leaf(kaiming_uniform({1, channels, 1, 1}, rng), true);
  h.cls_b = leaf(Tensor::full({1}, -2.f), true);  // objectness prior ~0.12
  h.reg_w = leaf(kaiming_uniform({6, channels, 1, 1}, rng), true);
  h.reg_b = leaf(Tensor({6}), true);
  h.dir_w = leaf(kaiming_uniform({2, channels, 1, 1}, rng), true);
  h.dir_b = leaf(Tensor({2}), true);
  return h;
}

std::vector<Var> head_params(const HeadParams& h) {
  return {h.conv_w, h.conv_b, h.cls_w, h.cls_b,
          h.reg_w,  h.reg_b,  h.dir_w, h.dir_b};
}

DetectionOutput detect(const HeadParams& head, const Var& fused) {
  Var t = leaky_relu(conv2d(fused, head.conv_w, head.conv_b), 0.1f);
  DetectionOutput out;
  out.cls = conv2d(t, head.cls_w, head.cls_b);
  out.reg = conv2d(t, head.reg_w, head.reg_b);
  out.dir = conv2d(t, head.dir_w, head.dir_b);
  return out;
}

namespace {

// fold yaw into (-pi/2, pi/2] plus a {0, pi} bin
void fold_yaw(float yaw, float& fold, int& bin) {
  fold = normalize_angle(yaw);
  bin = 0;
  if (fold > static_cast<float>(M_PI) / 2) {
    fold -= static_cast<float>(M_PI);
    bin = 1;
  } else if (fold <= -static_cast<float>(M_PI) / 2) {
    fold += static_cast<float>(M_PI);
    bin = 1;
  }
}

}  // namespace

Targets build_targets(const std::vector<world::GroundTruthBox>& gts,
                      const world::Extent& extent, int h, int w) {
  Targets t;
  t.cls_mask = Tensor({1, h, w});
  t.reg_target = Tensor({6, h, w});
  t.reg_mask = Tensor({6, h, w});
  t.dir_target = Tensor({1, h, w});
  float dx = extent.width() / static_cast<float>(w);
  float dy = extent.height() / static_cast<float>(h);
  for (const auto& g : gts) {
    int col = static_cast<int>(std::floor((g.cx - extent.xmin) / dx));
    int row = static_cast<int>(std::floor((g.cy - extent.ymin) / dy));
    if (col < 0 || col >= w || row < 0 || row >= h) continue;
    if (t.cls_mask.at3(0, row, col) > 0.f) continue;  // first box wins the cell
    t.cls_mask.at3(0, row, col) = 1.f;
    float cell_x = extent.xmin + (static_cast<float>(col) + 0.5f) * dx;
    float cell_y = extent.ymin + (static_cast<float>(row) + 0.5f) * dy;
    float fold;
    int bin;
    fold_yaw(g.yaw, fold, bin);
    t.reg_target.at3(0, row, col) = g.cx - cell_x;
    t.reg_target.at3(1, row, col) = g.cy - cell_y;
    t.reg_target.at3(2, row, col) = std::log(g.w);
    t.reg_target.at3(3, row, col) = std::log(g.l);
    t.reg_target.at3(4, row, col) = std::sin(fold);
    t.reg_target.at3(5, row, col) = std::cos(fold);
    for (int ch = 0; ch < 6; ++ch) t.reg_mask.at3(ch, row, col) = 1.f;
    t.dir_target.at3(0, row, col) = static_cast<float>(bin);
    ++t.n_pos;
  }
  return t;
}

Var detection_loss(const DetectionOutput& out, const Targets& targets,
                   const LossWeights& weights) {
  const float focal_alpha = 0.25f;
  float norm = 1.f / static_cast<float>(std::max(1, targets.n_pos));

  Var z = out.cls;
  Var p = sigmoid(z);
  Var q = sigmoid(scale(z, -1.f));  // 1 - p
  Var log_p = softplus(scale(z, -1.f));
  Var log_q = softplus(z);
  Var pos_focal = scale(mul(mul(q, q), log_p), focal_alpha);
  Var neg_focal = scale(mul(mul(p, p), log_q), 1.f - focal_alpha);
  Var mask = constant(targets.cls_mask);
  Tensor inv = targets.cls_mask;
  for (auto& v : inv.v) v = 1.f - v;
  Var imask = constant(inv);
  Var l_cls = scale(add(sum(mul(mask, pos_focal)), sum(mul(imask, neg_focal))),
                    norm);

  Var diff = sub(out.reg, constant(targets.reg_target));
  Var l_reg = scale(sum(mul(constant(targets.reg_mask), smooth_l1(diff))), norm);

  Var z0 = slice_channels(out.dir, 0, 1);
  Var z1 = slice_channels(out.dir, 1, 1);
  Var bin1 = constant(targets.dir_target);
  Tensor inv_bin = targets.dir_target;
  for (auto& v : inv_bin.v) v = 1.f - v;
  Var bin0 = constant(inv_bin);
  Var z_target = add(mul(z1, bin1), mul(z0, bin0));
  Var z_other = add(mul(z0, bin1), mul(z1, bin0));
  Var ce = softplus(sub(z_other, z_target));
  Var l_dir = scale(sum(mul(mask, ce)), norm);

  return add(add(scale(l_cls, weights.alpha_cls), scale(l_reg, weights.alpha_reg)),
             scale(l_dir, weights.alpha_dir));
}

double total_loss(double det, double dami, const LossWeights& weights) {
  return det + static_cast<double>(weights.beta_dami) * dami;
}

std::vector<DetectionBox> decode(const DetectionOutput& out,
                                 const world::Extent& extent,
                                 float score_thresh, float nms_iou) {
  const Tensor& cls = out.cls->value;
  const Tensor& reg = out.reg->value;
  const Tensor& dir = out.dir->value;
  int h = cls.dim(1), w = cls.dim(2);
  float dx = extent.width() / static_cast<float>(w);
  float dy = extent.height() / static_cast<float>(h);
  std::vector<DetectionBox> dets;
  for (int row = 0; row < h; ++row)
    for (int col = 0; col < w; ++col) {
      float logit = cls.at3(0, row, col);
      float score = 1.f / (1.f + std::exp(-logit));
      if (score < score_thresh) continue;
      DetectionBox d;
      float cell_x = extent.xmin + (static_cast<float>(col) + 0.5f) * dx;
      float cell_y = extent.ymin + (static_cast<float>(row) + 0.5f) * dy;
      d.cx = cell_x + reg.at3(0, row, col);
      d.cy = cell_y + reg.at3(1, row, col);
      d.w = std::exp(reg.at3(2, row, col));
      d.l = std::exp(reg.at3(3, row, col));
      float fold = std::atan2(reg.at3(4, row, col), reg.at3(5, row, col));
      int bin = dir.at3(1, row, col) > dir.at3(0, row, col) ? 1 : 0;
      d.yaw = normalize_angle(fold + static_cast<float>(bin) *
                                         static_cast<float>(M_PI));
      d.score = score;
      dets.push_back(d);
    }
  return nms_bev(std::move(dets), nms_iou);
}

}  // namespace cods::det
