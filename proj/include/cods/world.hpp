#pragma once

#include <string>
#include <vector>

#include "cods/common.hpp"
#include "cods/tensor.hpp"

namespace cods::world {

struct Extent {
  float xmin = -22.f, xmax = 22.f, ymin = -6.f, ymax = 6.f;
  float width() const { return xmax - xmin; }
  float height() const { return ymax - ymin; }
};

struct Pose2D {
  float x = 0.f, y = 0.f, yaw = 0.f;  // yaw in (-pi, pi]
};

struct GroundTruthBox {
  float cx = 0.f, cy = 0.f;  // ego frame, meters
  float w = 0.f, l = 0.f;    // width across heading, length along heading
  float yaw = 0.f;
};

// Frozen procedural encoder. Two specs differing in seed/gain/bias/sign
// produce feature maps that disagree in distribution, not just in shape.
struct EncoderSpec {
  std::string id;
  int out_channels = 32;
  int out_h = 12, out_w = 44;
  uint64_t seed = 1;
  float gain = 1.f;
  float bias = 0.f;
  int sign = 1;  // +1 or -1
};

struct VisibilityCfg {
  float sector_min_rad = 1.6f;
  float sector_max_rad = 2.8f;
};

struct WorldConfig {
  Extent extent;
  int raster_h = 24, raster_w = 88;
  int n_objects_min = 4, n_objects_max = 9;
  int n_agents_min = 2, n_agents_max = 3;
  std::vector<EncoderSpec> encoders;
  VisibilityCfg vis;
  float nei_dx = 8.f, nei_dy = 3.f, nei_dyaw = 0.5f;
  float obj_w_min = 1.6f, obj_w_max = 2.6f;
  float obj_l_min = 3.5f, obj_l_max = 5.5f;
  uint64_t world_seed = 42;

  const EncoderSpec& encoder(const std::string& id) const;
  void validate() const;

  // desk-scale default: one ego geometry plus two mismatched neighbor
  // variants (channel doubling and spatial shrink)
  static WorldConfig desk_default();
};

std::string world_config_to_json(const WorldConfig& cfg);
WorldConfig world_config_from_json(const std::string& text);

struct PoseNoiseConfig {
  float sigma_p = 0.f;  // meters, on x and y
  float sigma_r = 0.f;  // radians, on yaw
  uint64_t seed = 0;
};

struct SceneGeometry {
  int n_agents = 0;
  std::vector<GroundTruthBox> objects;       // ego frame
  std::vector<Pose2D> poses;                 // [0] is ego, identity frame
  std::vector<std::vector<char>> visible;    // [agent][object]
};

struct SceneSample {
  uint64_t scene_id = 0;
  Tensor ego_feature;                   // [C,H,W] from the ego encoder
  std::vector<Tensor> neighbor_features;  // raw, in each neighbor's frame
  std::vector<Pose2D> poses;            // [0] ego
  std::vector<GroundTruthBox> gt_boxes;
  int n_nei = 0;
  SceneGeometry geometry;               // kept for diagnostics and tests
};

uint64_t scene_seed(uint64_t world_seed, uint64_t scene_id);

SceneGeometry generate_geometry(const WorldConfig& cfg, uint64_t rng_seed);

// agent-frame occupancy raster [1, raster_h, raster_w] of visible objects
Tensor rasterize(const WorldConfig& cfg, const SceneGeometry& geom, int agent);

Tensor encode(const EncoderSpec& spec, const Tensor& raster);

// Inverse-warp f (covering `ext` in agent j's frame) onto the same grid in
// agent i's frame. Out-of-view cells are zero.
Tensor project_to_ego(const Tensor& f, const Extent& ext, const Pose2D& xi_j,
                      const Pose2D& xi_i);

Pose2D perturb_pose(const Pose2D& pose, const PoseNoiseConfig& cfg,
                    uint64_t draw_index);

SceneSample generate_scene(const WorldConfig& cfg, uint64_t rng_seed,
                           const std::string& ego_encoder_id,
                           const std::string& nei_encoder_id);

// CTNS bundle: ego.ctns, nei_<k>.ctns plus manifest.json
void export_scene_bundle(const std::string& dir, const SceneSample& scene);

}  // namespace cods::world
