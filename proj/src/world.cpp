#include "cods/world.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace cods::world {

using nlohmann::json;

const EncoderSpec& WorldConfig::encoder(const std::string& id) const {
  for (const auto& e : encoders)
    if (e.id == id) return e;
  throw ConfigError("unknown encoder id: " + id);
}

void WorldConfig::validate() const {
  if (extent.xmax <= extent.xmin || extent.ymax <= extent.ymin)
    throw ConfigError("world: degenerate extent");
  if (raster_h < 2 || raster_w < 2) throw ConfigError("world: raster too small");
  if (n_objects_min < 0 || n_objects_max < n_objects_min)
    throw ConfigError("world: bad object count range");
  if (n_agents_min < 1 || n_agents_max < n_agents_min)
    throw ConfigError("world: bad agent count range");
  if (encoders.empty()) throw ConfigError("world: no encoders configured");
  for (const auto& e : encoders) {
    if (e.out_channels < 1 || e.out_h < 1 || e.out_w < 1)
      throw ConfigError("world: bad encoder dims for " + e.id);
    if (e.sign != 1 && e.sign != -1)
      throw ConfigError("world: encoder sign must be +1 or -1");
  }
  if (vis.sector_min_rad < 0.f || vis.sector_max_rad < vis.sector_min_rad)
    throw ConfigError("world: bad visibility sector range");
}

WorldConfig WorldConfig::desk_default() {
  WorldConfig cfg;
  cfg.encoders = {
      {"p0d", 32, 12, 44, 101, 1.0f, 0.10f, +1},
      {"p1d", 32, 8, 32, 202, 1.4f, -0.20f, -1},
      {"s1d", 64, 13, 44, 303, 1.2f, 0.30f, -1},
  };
  return cfg;
}

std::string world_config_to_json(const WorldConfig& cfg) {
  json j;
  j["extent_m"] = {cfg.extent.xmin, cfg.extent.xmax, cfg.extent.ymin,
                   cfg.extent.ymax};
  j["cells"] = {cfg.raster_h, cfg.raster_w};
  j["n_objects"] = {cfg.n_objects_min, cfg.n_objects_max};
  j["n_agents"] = {cfg.n_agents_min, cfg.n_agents_max};
  json encs = json::array();
  for (const auto& e : cfg.encoders) {
    encs.push_back({{"id", e.id},
                    {"out_channels", e.out_channels},
                    {"out_h", e.out_h},
                    {"out_w", e.out_w},
                    {"seed", e.seed},
                    {"gain", e.gain},
                    {"bias", e.bias},
                    {"sign", e.sign}});
  }
  j["encoders"] = encs;
  j["visibility"] = {{"sector_min_rad", cfg.vis.sector_min_rad},
                     {"sector_max_rad", cfg.vis.sector_max_rad}};
  j["neighbor_spread"] = {{"dx", cfg.nei_dx}, {"dy", cfg.nei_dy},
                          {"dyaw", cfg.nei_dyaw}};
  j["object_size"] = {{"w", {cfg.obj_w_min, cfg.obj_w_max}},
                      {"l", {cfg.obj_l_min, cfg.obj_l_max}}};
  j["seed"] = cfg.world_seed;
  return j.dump(2);
}

WorldConfig world_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("world config: invalid json: ") + e.what());
  }
  WorldConfig cfg;
  try {
    auto ext = j.at("extent_m");
    cfg.extent = {ext.at(0).get<float>(), ext.at(1).get<float>(),
                  ext.at(2).get<float>(), ext.at(3).get<float>()};
    cfg.raster_h = j.at("cells").at(0).get<int>();
    cfg.raster_w = j.at("cells").at(1).get<int>();
    cfg.n_objects_min = j.at("n_objects").at(0).get<int>();
    cfg.n_objects_max = j.at("n_objects").at(1).get<int>();
    cfg.n_agents_min = j.at("n_agents").at(0).get<int>();
    cfg.n_agents_max = j.at("n_agents").at(1).get<int>();
    cfg.encoders.clear();
    for (const auto& e : j.at("encoders")) {
      EncoderSpec spec;
      spec.id = e.at("id").get<std::string>();
      spec.out_channels = e.at("out_channels").get<int>();
      spec.out_h = e.at("out_h").get<int>();
      spec.out_w = e.at("out_w").get<int>();
      spec.seed = e.at("seed").get<uint64_t>();
      spec.gain = e.at("gain").get<float>();
      spec.bias = e.at("bias").get<float>();
      spec.sign = e.at("sign").get<int>();
      cfg.encoders.push_back(spec);
    }
    if (j.contains("visibility")) {
      cfg.vis.sector_min_rad = j["visibility"].value("sector_min_rad", 1.6f);
      cfg.vis.sector_max_rad = j["visibility"].value("sector_max_rad", 2.8f);
    }
    if (j.contains("neighbor_spread")) {
      cfg.nei_dx = j["neighbor_spread"].value("dx", 8.f);
      cfg.nei_dy = j["neighbor_spread"].value("dy", 3.f);
      cfg.nei_dyaw = j["neighbor_spread"].value("dyaw", 0.5f);
    }
    if (j.contains("object_size")) {
      cfg.obj_w_min = j["object_size"].at("w").at(0).get<float>();
      cfg.obj_w_max = j["object_size"].at("w").at(1).get<float>();
      cfg.obj_l_min = j["object_size"].at("l").at(0).get<float>();
      cfg.obj_l_max = j["object_size"].at("l").at(1).get<float>();
    }
    cfg.world_seed = j.value("seed", 42ull);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("world config: missing/invalid field: ") +
                      e.what());
  }
  cfg.validate();
  return cfg;
}

uint64_t scene_seed(uint64_t world_seed, uint64_t scene_id) {
  return mix_seed(world_seed, scene_id + 0x5ce9e0ull);
}

// ---------------------------------------------------------------------------

namespace {

struct Vec2 {
  float x, y;
};

inline Vec2 to_frame(const Pose2D& frame, float gx, float gy) {
  float dx = gx - frame.x, dy = gy - frame.y;
  float c = std::cos(frame.yaw), s = std::sin(frame.yaw);
  return {c * dx + s * dy, -s * dx + c * dy};
}

inline Vec2 from_frame(const Pose2D& frame, float lx, float ly) {
  float c = std::cos(frame.yaw), s = std::sin(frame.yaw);
  return {frame.x + c * lx - s * ly, frame.y + s * lx + c * ly};
}

inline bool in_extent(const Extent& e, float x, float y) {
  return x >= e.xmin && x <= e.xmax && y >= e.ymin && y <= e.ymax;
}

inline bool point_in_box(const GroundTruthBox& b, float px, float py) {
  float dx = px - b.cx, dy = py - b.cy;
  float c = std::cos(b.yaw), s = std::sin(b.yaw);
  float u = c * dx + s * dy;   // along heading (length)
  float v = -s * dx + c * dy;  // across heading (width)
  return std::fabs(u) <= b.l * 0.5f && std::fabs(v) <= b.w * 0.5f;
}

inline bool angle_in_sector(float a, float center, float half_width) {
  float d = normalize_angle(a - center);
  return std::fabs(d) <= half_width;
}

// hidden iff outside the agent's extent window or inside its occlusion sector
bool object_visible(const WorldConfig& cfg, const Pose2D& pose,
                    const GroundTruthBox& obj, float sector_center,
                    float sector_half) {
  Vec2 local = to_frame(pose, obj.cx, obj.cy);
  if (!in_extent(cfg.extent, local.x, local.y)) return false;
  float bearing = std::atan2(local.y, local.x);
  return !angle_in_sector(bearing, sector_center, sector_half);
}

}  // namespace

SceneGeometry generate_geometry(const WorldConfig& cfg, uint64_t rng_seed) {
  cfg.validate();
  Rng base(rng_seed);
  Rng counts = base.child(1);
  Rng obj_rng = base.child(2);
  Rng pose_rng = base.child(3);
  Rng vis_rng = base.child(4);

  SceneGeometry g;
  int n_obj = counts.uniform_int(cfg.n_objects_min, cfg.n_objects_max);
  g.n_agents = counts.uniform_int(cfg.n_agents_min, cfg.n_agents_max);

  const float margin = 1.0f;
  for (int i = 0; i < n_obj; ++i) {
    GroundTruthBox b;
    b.cx = obj_rng.uniform(cfg.extent.xmin + margin, cfg.extent.xmax - margin);
    b.cy = obj_rng.uniform(cfg.extent.ymin + margin, cfg.extent.ymax - margin);
    b.w = obj_rng.uniform(cfg.obj_w_min, cfg.obj_w_max);
    b.l = obj_rng.uniform(cfg.obj_l_min, cfg.obj_l_max);
    b.yaw = normalize_angle(obj_rng.uniform(-static_cast<float>(M_PI),
                                            static_cast<float>(M_PI)));
    g.objects.push_back(b);
  }

  g.poses.push_back(Pose2D{});  // ego anchors the frame
  for (int a = 1; a < g.n_agents; ++a) {
    Pose2D p;
    p.x = pose_rng.uniform(-cfg.nei_dx, cfg.nei_dx);
    p.y = pose_rng.uniform(-cfg.nei_dy, cfg.nei_dy);
    p.yaw = pose_rng.uniform(-cfg.nei_dyaw, cfg.nei_dyaw);
    g.poses.push_back(p);
  }

  // Occlusion sectors. When there are enough objects, every agent must miss
  // at least one object that some other agent can still see, so that fusion
  // carries real information. Rejection sampling first, then a directed fix.
  std::vector<float> centers(static_cast<size_t>(g.n_agents));
  std::vector<float> halves(static_cast<size_t>(g.n_agents));

  auto compute_visibility = [&]() {
    g.visible.assign(static_cast<size_t>(g.n_agents),
                     std::vector<char>(g.objects.size(), 0));
    for (int a = 0; a < g.n_agents; ++a)
      for (size_t o = 0; o < g.objects.size(); ++o)
        g.visible[static_cast<size_t>(a)][o] =
            object_visible(cfg, g.poses[static_cast<size_t>(a)], g.objects[o],
                           centers[static_cast<size_t>(a)],
                           halves[static_cast<size_t>(a)]);
  };
  auto agent_ok = [&](int a) {
    if (g.objects.size() < 3) return true;
    for (size_t o = 0; o < g.objects.size(); ++o) {
      if (g.visible[static_cast<size_t>(a)][o]) continue;
      for (int b = 0; b < g.n_agents; ++b)
        if (b != a && g.visible[static_cast<size_t>(b)][o]) return true;
    }
    return false;
  };

  bool ok = false;
  for (int attempt = 0; attempt < 50 && !ok; ++attempt) {
    for (int a = 0; a < g.n_agents; ++a) {
      centers[static_cast<size_t>(a)] = vis_rng.uniform(
          -static_cast<float>(M_PI), static_cast<float>(M_PI));
      halves[static_cast<size_t>(a)] =
          0.5f * vis_rng.uniform(cfg.vis.sector_min_rad, cfg.vis.sector_max_rad);
    }
    compute_visibility();
    ok = true;
    for (int a = 0; a < g.n_agents; ++a) ok = ok && agent_ok(a);
  }
  if (!ok) {
    // aim each failing agent's sector at an object another agent sees
    for (int a = 0; a < g.n_agents; ++a) {
      if (agent_ok(a)) continue;
      for (size_t o = 0; o < g.objects.size(); ++o) {
        bool other_sees = false;
        for (int b = 0; b < g.n_agents; ++b)
          if (b != a && g.visible[static_cast<size_t>(b)][o]) other_sees = true;
        if (!other_sees) continue;
        Vec2 local = to_frame(g.poses[static_cast<size_t>(a)],
                              g.objects[o].cx, g.objects[o].cy);
        centers[static_cast<size_t>(a)] = std::atan2(local.y, local.x);
        break;
      }
      compute_visibility();
    }
  }
  return g;
}

Tensor rasterize(const WorldConfig& cfg, const SceneGeometry& geom, int agent) {
  if (agent < 0 || agent >= geom.n_agents)
    throw ConfigError("rasterize: agent index out of range");
  Tensor r({1, cfg.raster_h, cfg.raster_w});
  float dx = cfg.extent.width() / static_cast<float>(cfg.raster_w);
  float dy = cfg.extent.height() / static_cast<float>(cfg.raster_h);
  const auto& pose = geom.poses[static_cast<size_t>(agent)];
  for (size_t o = 0; o < geom.objects.size(); ++o) {
    if (!geom.visible[static_cast<size_t>(agent)][o]) continue;
    // object in the agent frame
    GroundTruthBox b = geom.objects[o];
    Vec2 c = to_frame(pose, b.cx, b.cy);
    b.cx = c.x;
    b.cy = c.y;
    b.yaw = normalize_angle(b.yaw - pose.yaw);
    for (int row = 0; row < cfg.raster_h; ++row) {
      float py = cfg.extent.ymin + (static_cast<float>(row) + 0.5f) * dy;
      for (int col = 0; col < cfg.raster_w; ++col) {
        float px = cfg.extent.xmin + (static_cast<float>(col) + 0.5f) * dx;
        if (point_in_box(b, px, py)) r.at3(0, row, col) = 1.f;
      }
    }
  }
  return r;
}

Tensor encode(const EncoderSpec& spec, const Tensor& raster) {
  if (raster.rank() != 3 || raster.dim(0) != 1)
    throw DimError("encode: raster must be [1,H,W]");
  NoGrad ng;
  Rng rng(spec.seed);
  const int mid = 8;
  // The stack response decomposes into a scene-dependent common-mode field
  // (the encoder's private structure, coupled into every channel) and a
  // per-channel signed occupancy code. Two seeds give two incompatible
  // codes; matching seeds share one.
  const float tex_amp = 0.8f;
  Var w1 = constant(kaiming_uniform({mid, 1, 3, 3}, rng));
  Var b1 = constant(rand_uniform({mid}, rng, -0.1f, 0.1f));
  Var w2 = constant(kaiming_uniform({1, mid, 1, 1}, rng));
  Var b2 = constant(rand_uniform({1}, rng, -0.05f, 0.05f));
  Tensor tau_c = rand_uniform({spec.out_channels}, rng, 0.7f, 1.3f);
  Tensor beta_c({spec.out_channels});
  for (auto& b : beta_c.v) {
    float mag = rng.uniform(0.8f, 1.6f);
    b = rng.next_double() < 0.7 ? mag : -mag;
  }

  Var h1 = leaky_relu(conv2d(constant(raster), w1, b1), 0.1f);
  Var t = leaky_relu(conv2d(h1, w2, b2), 0.1f);  // 1x1 mix keeps it sharp
  Var tex = bilinear_resize(t, spec.out_h, spec.out_w);
  Var occ = bilinear_resize(constant(raster), spec.out_h, spec.out_w);

  Tensor out({spec.out_channels, spec.out_h, spec.out_w});
  size_t plane = static_cast<size_t>(spec.out_h) * spec.out_w;
  const float* occ_p = occ->value.data();
  const float* tex_p = tex->value.data();
  float sg = static_cast<float>(spec.sign) * spec.gain;
  for (int c = 0; c < spec.out_channels; ++c) {
    float tc = tex_amp * tau_c.v[static_cast<size_t>(c)];
    float bc = beta_c.v[static_cast<size_t>(c)];
    float* op_ = out.data() + static_cast<size_t>(c) * plane;
    for (size_t i = 0; i < plane; ++i) {
      float h = tc * tex_p[i] + bc * occ_p[i];
      op_[i] = sg * h + spec.bias;
    }
  }
  return out;
}

Tensor project_to_ego(const Tensor& f, const Extent& ext, const Pose2D& xi_j,
                      const Pose2D& xi_i) {
  if (f.rank() != 3) throw DimError("project_to_ego: feature must be [C,H,W]");
  int c = f.dim(0), h = f.dim(1), w = f.dim(2);
  float dx = ext.width() / static_cast<float>(w);
  float dy = ext.height() / static_cast<float>(h);
  Tensor out({c, h, w});
  size_t plane = static_cast<size_t>(h) * w;
  for (int row = 0; row < h; ++row) {
    float py = ext.ymin + (static_cast<float>(row) + 0.5f) * dy;
    for (int col = 0; col < w; ++col) {
      float px = ext.xmin + (static_cast<float>(col) + 0.5f) * dx;
      Vec2 g = from_frame(xi_i, px, py);
      Vec2 pj = to_frame(xi_j, g.x, g.y);
      // continuous source cell coordinates
      float u = (pj.x - ext.xmin) / dx - 0.5f;
      float v = (pj.y - ext.ymin) / dy - 0.5f;
      int x0 = static_cast<int>(std::floor(u));
      int y0 = static_cast<int>(std::floor(v));
      float fx = u - static_cast<float>(x0);
      float fy = v - static_cast<float>(y0);
      float w00 = (1.f - fy) * (1.f - fx), w01 = (1.f - fy) * fx;
      float w10 = fy * (1.f - fx), w11 = fy * fx;
      auto valid = [&](int yy, int xx) {
        return yy >= 0 && yy < h && xx >= 0 && xx < w;
      };
      for (int ch = 0; ch < c; ++ch) {
        const float* src = f.data() + static_cast<size_t>(ch) * plane;
        float acc = 0.f;
        if (valid(y0, x0)) acc += w00 * src[static_cast<size_t>(y0) * w + x0];
        if (valid(y0, x0 + 1)) acc += w01 * src[static_cast<size_t>(y0) * w + x0 + 1];
        if (valid(y0 + 1, x0)) acc += w10 * src[static_cast<size_t>(y0 + 1) * w + x0];
        if (valid(y0 + 1, x0 + 1))
          acc += w11 * src[static_cast<size_t>(y0 + 1) * w + x0 + 1];
        out.v[static_cast<size_t>(ch) * plane + static_cast<size_t>(row) * w + col] = acc;
      }
    }
  }
  return out;
}

Pose2D perturb_pose(const Pose2D& pose, const PoseNoiseConfig& cfg,
                    uint64_t draw_index) {
  if (cfg.sigma_p < 0.f || cfg.sigma_r < 0.f)
    throw ConfigError("pose noise: sigmas must be non-negative");
  if (cfg.sigma_p == 0.f && cfg.sigma_r == 0.f) return pose;
  Rng rng(mix_seed(cfg.seed, draw_index));
  Pose2D out = pose;
  out.x += rng.normal(0.f, cfg.sigma_p);
  out.y += rng.normal(0.f, cfg.sigma_p);
  out.yaw = normalize_angle(out.yaw + rng.normal(0.f, cfg.sigma_r));
  return out;
}

SceneSample generate_scene(const WorldConfig& cfg, uint64_t rng_seed,
                           const std::string& ego_encoder_id,
                           const std::string& nei_encoder_id) {
  const EncoderSpec& ego_spec = cfg.encoder(ego_encoder_id);
  const EncoderSpec& nei_spec = cfg.encoder(nei_encoder_id);
  SceneSample s;
  s.scene_id = rng_seed;
  s.geometry = generate_geometry(cfg, rng_seed);
  s.poses = s.geometry.poses;
  s.gt_boxes = s.geometry.objects;
  s.n_nei = s.geometry.n_agents - 1;
  s.ego_feature = encode(ego_spec, rasterize(cfg, s.geometry, 0));
  for (int a = 1; a < s.geometry.n_agents; ++a)
    s.neighbor_features.push_back(encode(nei_spec, rasterize(cfg, s.geometry, a)));
  return s;
}

void export_scene_bundle(const std::string& dir, const SceneSample& scene) {
  std::filesystem::create_directories(dir);
  save_ctns(dir + "/ego.ctns", scene.ego_feature);
  for (size_t k = 0; k < scene.neighbor_features.size(); ++k)
    save_ctns(dir + "/nei_" + std::to_string(k) + ".ctns",
              scene.neighbor_features[k]);
  json j;
  j["scene_id"] = scene.scene_id;
  j["n_nei"] = scene.n_nei;
  json poses = json::array();
  for (const auto& p : scene.poses) poses.push_back({p.x, p.y, p.yaw});
  j["poses"] = poses;
  json boxes = json::array();
  for (const auto& b : scene.gt_boxes)
    boxes.push_back({b.cx, b.cy, b.w, b.l, b.yaw});
  j["gt_boxes"] = boxes;
  std::ofstream out(dir + "/manifest.json");
  if (!out) throw IoError("export_scene_bundle: cannot write manifest");
  out << j.dump(2) << "\n";
}

}  // namespace cods::world
