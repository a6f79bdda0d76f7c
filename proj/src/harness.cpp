#include "cods/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <thread>

#include <json.hpp>

#include "cods/metrics.hpp"

namespace cods::harness {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// config

void RunConfig::validate() const {
  world.validate();
  world.encoder(ego_encoder);
  world.encoder(nei_encoder);
  if (optim.lr <= 0.f || optim.steps < 0 || optim.batch_scenes < 1)
    throw ConfigError("run: bad optimizer settings");
  if (train_scenes < 1 || eval_scenes < 1)
    throw ConfigError("run: scene counts must be positive");
  if (adapter.use_dami && !homogeneous_oracle) {
    if (optim.batch_scenes < 2)
      throw ConfigError(
          "run: use_dami requires batch_scenes >= 2 (cross-scene negatives)");
    if (world.n_agents_min < 2)
      throw ConfigError("run: use_dami requires every scene to have a neighbor");
  }
  if (adapter.use_dads)
    adapter::DadsConfig::from_names(adapter.dads_stack, adapter.share_ea);
  if (adapter.score_aggregation != "mean" &&
      adapter.score_aggregation != "per_pixel")
    throw ConfigError("run: unknown score_aggregation");
  if (two_phase && phase1_steps < 1)
    throw ConfigError("run: two_phase needs phase1_steps >= 1");
  if (phase2_head_init != "warm" && phase2_head_init != "reinit")
    throw ConfigError("run: phase2_head_init must be warm or reinit");
  if (!(score_thresh > 0.f && score_thresh < 1.f))
    throw ConfigError("run: score_thresh must be in (0,1)");
}

RunConfig standard_benchmark() {
  RunConfig cfg;
  cfg.world = world::WorldConfig::desk_default();
  cfg.world.world_seed = 42;
  cfg.ego_encoder = "p0d";
  cfg.nei_encoder = "s1d";
  cfg.train_scenes = 2000;
  cfg.eval_scenes = 400;
  cfg.optim.steps = 5000;
  cfg.seed = 1;
  return cfg;
}

std::string run_config_to_json(const RunConfig& cfg) {
  ordered_json j;
  j["world"] = json::parse(world::world_config_to_json(cfg.world));
  j["pairing"] = {{"ego", cfg.ego_encoder}, {"neighbor", cfg.nei_encoder}};
  j["homogeneous_oracle"] = cfg.homogeneous_oracle;
  j["adapter"] = {{"use_lscr", cfg.adapter.use_lscr},
                  {"use_dads", cfg.adapter.use_dads},
                  {"dads_stack", cfg.adapter.dads_stack},
                  {"share_ea", cfg.adapter.share_ea},
                  {"use_dami", cfg.adapter.use_dami},
                  {"score_aggregation", cfg.adapter.score_aggregation}};
  j["optim"] = {{"lr", cfg.optim.lr},
                {"batch_scenes", cfg.optim.batch_scenes},
                {"steps", cfg.optim.steps},
                {"beta1", cfg.optim.beta1},
                {"beta2", cfg.optim.beta2},
                {"eps", cfg.optim.eps}};
  j["loss"] = {{"beta_dami", cfg.loss.beta_dami},
               {"alpha_cls", cfg.loss.alpha_cls},
               {"alpha_reg", cfg.loss.alpha_reg},
               {"alpha_dir", cfg.loss.alpha_dir}};
  j["noise"] = {{"sigma_p", cfg.noise.sigma_p},
                {"sigma_r", cfg.noise.sigma_r},
                {"seed", cfg.noise.seed}};
  j["data"] = {{"train_scenes", cfg.train_scenes},
               {"eval_scenes", cfg.eval_scenes}};
  j["detect"] = {{"score_thresh", cfg.score_thresh}, {"nms_iou", cfg.nms_iou}};
  j["two_phase"] = {{"enabled", cfg.two_phase},
                    {"phase1_steps", cfg.phase1_steps},
                    {"head_init", cfg.phase2_head_init}};
  j["seed"] = cfg.seed;
  return j.dump(2);
}

RunConfig run_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("run config: invalid json: ") + e.what());
  }
  RunConfig cfg;
  try {
    cfg.world = world::world_config_from_json(j.at("world").dump());
    cfg.ego_encoder = j.at("pairing").at("ego").get<std::string>();
    cfg.nei_encoder = j.at("pairing").at("neighbor").get<std::string>();
    cfg.homogeneous_oracle = j.value("homogeneous_oracle", false);
    if (j.contains("adapter")) {
      const auto& a = j["adapter"];
      cfg.adapter.use_lscr = a.value("use_lscr", true);
      cfg.adapter.use_dads = a.value("use_dads", true);
      if (a.contains("dads_stack"))
        cfg.adapter.dads_stack = a["dads_stack"].get<std::vector<std::string>>();
      cfg.adapter.share_ea = a.value("share_ea", true);
      cfg.adapter.use_dami = a.value("use_dami", true);
      cfg.adapter.score_aggregation = a.value("score_aggregation", "mean");
    }
    if (j.contains("optim")) {
      const auto& o = j["optim"];
      cfg.optim.lr = o.value("lr", 0.002f);
      cfg.optim.batch_scenes = o.value("batch_scenes", 4);
      cfg.optim.steps = o.value("steps", 5000);
      cfg.optim.beta1 = o.value("beta1", 0.9f);
      cfg.optim.beta2 = o.value("beta2", 0.999f);
      cfg.optim.eps = o.value("eps", 1e-8f);
    }
    if (j.contains("loss")) {
      const auto& l = j["loss"];
      cfg.loss.beta_dami = l.value("beta_dami", 1.f);
      cfg.loss.alpha_cls = l.value("alpha_cls", 1.f);
      cfg.loss.alpha_reg = l.value("alpha_reg", 2.f);
      cfg.loss.alpha_dir = l.value("alpha_dir", 0.2f);
    }
    if (j.contains("noise")) {
      const auto& n = j["noise"];
      cfg.noise.sigma_p = n.value("sigma_p", 0.f);
      cfg.noise.sigma_r = n.value("sigma_r", 0.f);
      cfg.noise.seed = n.value("seed", 0ull);
    }
    if (j.contains("data")) {
      cfg.train_scenes = j["data"].value("train_scenes", 2000);
      cfg.eval_scenes = j["data"].value("eval_scenes", 400);
    }
    if (j.contains("detect")) {
      cfg.score_thresh = j["detect"].value("score_thresh", 0.10f);
      cfg.nms_iou = j["detect"].value("nms_iou", 0.15f);
    }
    if (j.contains("two_phase")) {
      cfg.two_phase = j["two_phase"].value("enabled", false);
      cfg.phase1_steps = j["two_phase"].value("phase1_steps", 1000);
      cfg.phase2_head_init = j["two_phase"].value("head_init", "warm");
    }
    cfg.seed = j.value("seed", 1ull);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("run config: missing/invalid field: ") +
                      e.what());
  }
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// model

Model build_model(const RunConfig& cfg) {
  const auto& ego_spec = cfg.world.encoder(cfg.ego_encoder);
  const auto& nei_spec = cfg.world.encoder(cfg.effective_nei_encoder());
  Model m;
  m.channels = ego_spec.out_channels;
  m.out_h = ego_spec.out_h;
  m.out_w = ego_spec.out_w;
  m.bypass_adapter = cfg.homogeneous_oracle;
  if (!m.bypass_adapter) {
    m.use_lscr = cfg.adapter.use_lscr;
    m.use_dads = cfg.adapter.use_dads;
    m.use_dami = cfg.adapter.use_dami;
    if (m.use_lscr)
      m.lscr = adapter::build_lscr(nei_spec.out_channels, m.channels, m.out_h,
                                   m.out_w, mix_seed(cfg.seed, 101));
    if (m.use_dads)
      m.dads = adapter::build_dads(
          adapter::DadsConfig::from_names(cfg.adapter.dads_stack,
                                          cfg.adapter.share_ea),
          m.channels, mix_seed(cfg.seed, 102));
    if (m.use_dami)
      m.disc = dami::build_discriminator(m.channels, mix_seed(cfg.seed, 103));
  }
  m.head = det::build_head(m.channels, mix_seed(cfg.seed, 104));
  return m;
}

std::vector<Var> trainable_params(const Model& m) {
  std::vector<Var> out;
  if (m.lscr) {
    out.push_back(m.lscr->weight);
    out.push_back(m.lscr->bias);
  }
  if (m.dads) {
    auto d = adapter::dads_trainable_params(*m.dads);
    out.insert(out.end(), d.begin(), d.end());
  }
  if (m.disc) {
    auto d = dami::discriminator_params(*m.disc);
    out.insert(out.end(), d.begin(), d.end());
  }
  auto h = det::head_params(m.head);
  out.insert(out.end(), h.begin(), h.end());
  return out;
}

namespace {

void add_block(NamedTensors& nt, const std::string& prefix,
               adapter::SepBlockParams& b, adapter::SepBlockStats& st) {
  nt.params.emplace_back(prefix + ".conv1_w", b.conv1_w);
  nt.params.emplace_back(prefix + ".conv1_b", b.conv1_b);
  nt.params.emplace_back(prefix + ".bn1_gamma", b.bn1_gamma);
  nt.params.emplace_back(prefix + ".bn1_beta", b.bn1_beta);
  nt.params.emplace_back(prefix + ".conv2_w", b.conv2_w);
  nt.params.emplace_back(prefix + ".conv2_b", b.conv2_b);
  nt.params.emplace_back(prefix + ".bn2_gamma", b.bn2_gamma);
  nt.params.emplace_back(prefix + ".bn2_beta", b.bn2_beta);
  nt.stats.emplace_back(prefix + ".bn1.rmean", &st.bn1.running_mean);
  nt.stats.emplace_back(prefix + ".bn1.rvar", &st.bn1.running_var);
  nt.stats.emplace_back(prefix + ".bn2.rmean", &st.bn2.running_mean);
  nt.stats.emplace_back(prefix + ".bn2.rvar", &st.bn2.running_var);
}

}  // namespace

NamedTensors named_tensors(Model& m) {
  NamedTensors nt;
  if (m.lscr) {
    nt.params.emplace_back("lscr.weight", m.lscr->weight);
    nt.params.emplace_back("lscr.bias", m.lscr->bias);
  }
  if (m.dads) {
    auto& d = *m.dads;
    for (size_t i = 0; i < d.ego_es.size(); ++i)
      add_block(nt, "dads.ego_es." + std::to_string(i), d.ego_es[i],
                d.ego_es_stats[i]);
    for (size_t i = 0; i < d.nei_es.size(); ++i)
      add_block(nt, "dads.nei_es." + std::to_string(i), d.nei_es[i],
                d.nei_es_stats[i]);
    for (size_t i = 0; i < d.shared_ea.size(); ++i) {
      add_block(nt, "dads.shared_ea." + std::to_string(i), d.shared_ea[i],
                d.ego_ea_stats[i]);
      // the shared stage keeps a second stats set for the neighbor branch
      nt.stats.emplace_back("dads.shared_ea." + std::to_string(i) + ".nei_bn1.rmean",
                            &d.nei_ea_stats[i].bn1.running_mean);
      nt.stats.emplace_back("dads.shared_ea." + std::to_string(i) + ".nei_bn1.rvar",
                            &d.nei_ea_stats[i].bn1.running_var);
      nt.stats.emplace_back("dads.shared_ea." + std::to_string(i) + ".nei_bn2.rmean",
                            &d.nei_ea_stats[i].bn2.running_mean);
      nt.stats.emplace_back("dads.shared_ea." + std::to_string(i) + ".nei_bn2.rvar",
                            &d.nei_ea_stats[i].bn2.running_var);
    }
    for (size_t i = 0; i < d.nei_ea_unshared.size(); ++i)
      add_block(nt, "dads.nei_ea." + std::to_string(i), d.nei_ea_unshared[i],
                d.nei_ea_stats[i]);
  }
  if (m.disc) {
    auto& dc = *m.disc;
    nt.params.emplace_back("disc.w1", dc.w1);
    nt.params.emplace_back("disc.b1", dc.b1);
    nt.params.emplace_back("disc.bn1_gamma", dc.bn1_gamma);
    nt.params.emplace_back("disc.bn1_beta", dc.bn1_beta);
    nt.params.emplace_back("disc.w2", dc.w2);
    nt.params.emplace_back("disc.b2", dc.b2);
    nt.params.emplace_back("disc.bn2_gamma", dc.bn2_gamma);
    nt.params.emplace_back("disc.bn2_beta", dc.bn2_beta);
    nt.params.emplace_back("disc.w3", dc.w3);
    nt.params.emplace_back("disc.b3", dc.b3);
    nt.stats.emplace_back("disc.bn1.rmean", &dc.bn1_stats.running_mean);
    nt.stats.emplace_back("disc.bn1.rvar", &dc.bn1_stats.running_var);
    nt.stats.emplace_back("disc.bn2.rmean", &dc.bn2_stats.running_mean);
    nt.stats.emplace_back("disc.bn2.rvar", &dc.bn2_stats.running_var);
  }
  nt.params.emplace_back("head.conv_w", m.head.conv_w);
  nt.params.emplace_back("head.conv_b", m.head.conv_b);
  nt.params.emplace_back("head.cls_w", m.head.cls_w);
  nt.params.emplace_back("head.cls_b", m.head.cls_b);
  nt.params.emplace_back("head.reg_w", m.head.reg_w);
  nt.params.emplace_back("head.reg_b", m.head.reg_b);
  nt.params.emplace_back("head.dir_w", m.head.dir_w);
  nt.params.emplace_back("head.dir_b", m.head.dir_b);
  return nt;
}

void save_checkpoint(const std::string& ckpt_dir, Model& m, int step) {
  fs::create_directories(ckpt_dir);
  NamedTensors nt = named_tensors(m);
  ordered_json manifest;
  manifest["format"] = "cods-ckpt";
  manifest["version"] = 1;
  manifest["step"] = step;
  std::vector<std::string> names, stat_names;
  for (auto& [name, var] : nt.params) {
    save_ctns(ckpt_dir + "/" + name + ".ctns", var->value);
    names.push_back(name);
  }
  for (auto& [name, vec] : nt.stats) {
    Tensor t({static_cast<int>(vec->size())});
    t.v = *vec;
    save_ctns(ckpt_dir + "/" + name + ".ctns", t);
    stat_names.push_back(name);
  }
  manifest["tensors"] = names;
  manifest["stats"] = stat_names;
  write_text_file(ckpt_dir + "/manifest.json", manifest.dump(2) + "\n");
}

void load_checkpoint(const std::string& ckpt_dir, Model& m, int* step) {
  json manifest = json::parse(read_text_file(ckpt_dir + "/manifest.json"));
  if (manifest.value("format", "") != "cods-ckpt")
    throw IoError("checkpoint: bad manifest in " + ckpt_dir);
  if (step) *step = manifest.value("step", 0);
  NamedTensors nt = named_tensors(m);
  for (auto& [name, var] : nt.params) {
    Tensor t = load_ctns(ckpt_dir + "/" + name + ".ctns");
    if (t.dims != var->value.dims)
      throw IoError("checkpoint: shape mismatch for " + name);
    var->value = std::move(t);
  }
  for (auto& [name, vec] : nt.stats) {
    Tensor t = load_ctns(ckpt_dir + "/" + name + ".ctns");
    if (vec->empty()) vec->assign(t.v.begin(), t.v.end());
    else if (t.numel() != vec->size())
      throw IoError("checkpoint: stat size mismatch for " + name);
    else
      *vec = t.v;
  }
}

// ---------------------------------------------------------------------------
// forward pass

namespace {

struct StageTimes {
  double adapter_ms = 0;  // projection + alignment + neighbor separation
  double fuse_head_ms = 0;
};

struct SceneForward {
  Var ego_aligned;
  std::vector<Var> nei_aligned;
  det::DetectionOutput out;
};

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

SceneForward forward_scene(Model& m, const RunConfig& cfg,
                           const world::SceneSample& scene, bool training,
                           const world::PoseNoiseConfig& noise, uint64_t salt,
                           StageTimes* times = nullptr) {
  const auto& ext = cfg.world.extent;
  auto noisy_pose = [&](int agent) {
    return world::perturb_pose(
        scene.poses[static_cast<size_t>(agent)], noise,
        mix_seed(scene.scene_id, mix_seed(static_cast<uint64_t>(agent), salt)));
  };
  world::Pose2D ego_pose = noisy_pose(0);

  auto t0 = Clock::now();
  std::vector<Var> nei_aligned;
  for (int k = 0; k < scene.n_nei; ++k) {
    Tensor proj = world::project_to_ego(
        scene.neighbor_features[static_cast<size_t>(k)], ext, noisy_pose(k + 1),
        ego_pose);
    Var nf;
    if (m.bypass_adapter) {
      nf = constant(std::move(proj));
    } else if (m.use_lscr) {
      nf = adapter::lscr_forward(*m.lscr, constant(std::move(proj)));
    } else {
      nf = constant(adapter::hete_resize(proj, m.channels, m.out_h, m.out_w));
    }
    if (!m.bypass_adapter && m.use_dads)
      nf = adapter::dads_branch(*m.dads, nf, false, training);
    nei_aligned.push_back(nf);
  }
  if (times) times->adapter_ms += ms_since(t0);

  auto t1 = Clock::now();
  Var ego = constant(scene.ego_feature);
  Var ego_aligned = !m.bypass_adapter && m.use_dads
                        ? adapter::dads_branch(*m.dads, ego, true, training)
                        : ego;
  std::vector<Var> all = {ego_aligned};
  all.insert(all.end(), nei_aligned.begin(), nei_aligned.end());
  Var fused = attention_fuse(all);
  SceneForward f;
  f.ego_aligned = ego_aligned;
  f.nei_aligned = std::move(nei_aligned);
  f.out = det::detect(m.head, fused);
  if (times) times->fuse_head_ms += ms_since(t1);
  return f;
}

}  // namespace

// ---------------------------------------------------------------------------
// training

void train(const RunConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  fs::create_directories(out_dir);
  write_text_file(out_dir + "/config.lock.json", run_config_to_json(cfg) + "\n");
  JsonlWriter metrics(out_dir + "/metrics.jsonl");

  Model model = build_model(cfg);
  std::vector<Var> params = trainable_params(model);
  AdamState adam = make_adam(params, cfg.optim.lr, cfg.optim.beta1,
                             cfg.optim.beta2, cfg.optim.eps);

  // frozen-encoder guarantee: specs are value copies used read-only here
  const std::string ego_id = cfg.ego_encoder;
  const std::string nei_id = cfg.effective_nei_encoder();

  Rng batch_rng = Rng(cfg.seed).child(7);
  Rng pair_root = Rng(cfg.seed).child(8);

  struct Phase {
    int phase = 1;
    int steps = 0;
    bool homo = false;
  };
  std::vector<Phase> phases;
  if (cfg.two_phase) {
    phases.push_back({1, cfg.phase1_steps, true});
    phases.push_back({2, cfg.optim.steps, false});
  } else {
    phases.push_back({1, cfg.optim.steps, false});
  }

  int global_step = 0;
  for (const auto& phase : phases) {
    if (phase.phase == 2 && cfg.phase2_head_init == "reinit") {
      Model fresh = build_model(cfg);
      auto src = det::head_params(fresh.head);
      auto dst = det::head_params(model.head);
      for (size_t i = 0; i < dst.size(); ++i) dst[i]->value = src[i]->value;
      adam = make_adam(params, cfg.optim.lr, cfg.optim.beta1, cfg.optim.beta2,
                       cfg.optim.eps);
    }
    bool homo_now = phase.homo || cfg.homogeneous_oracle;
    bool dami_now = model.use_dami && !homo_now;
    model.bypass_adapter = homo_now;  // restored at the next phase boundary

    for (int step_in_phase = 1; step_in_phase <= phase.steps; ++step_in_phase) {
      ++global_step;
      std::vector<world::SceneSample> scenes;
      for (int b = 0; b < cfg.optim.batch_scenes; ++b) {
        int id = batch_rng.uniform_int(0, cfg.train_scenes - 1);
        scenes.push_back(world::generate_scene(
            cfg.world,
            world::scene_seed(cfg.world.world_seed, static_cast<uint64_t>(id)),
            ego_id, homo_now ? ego_id : nei_id));
      }

      try {
        std::vector<Var> ego_al, det_losses;
        std::vector<std::vector<Var>> nei_al;
        for (const auto& scene : scenes) {
          SceneForward f = forward_scene(model, cfg, scene, true, cfg.noise,
                                         static_cast<uint64_t>(global_step));
          det::Targets t = det::build_targets(scene.gt_boxes, cfg.world.extent,
                                              model.out_h, model.out_w);
          det_losses.push_back(det::detection_loss(f.out, t, cfg.loss));
          ego_al.push_back(f.ego_aligned);
          nei_al.push_back(f.nei_aligned);
        }
        Var det_sum = det_losses[0];
        for (size_t i = 1; i < det_losses.size(); ++i)
          det_sum = add(det_sum, det_losses[i]);
        Var det_mean = scale(det_sum, 1.f / static_cast<float>(det_losses.size()));

        Var total = det_mean;
        std::optional<dami::DamiReport> rep;
        if (dami_now) {
          Rng pair_rng = pair_root.child(static_cast<uint64_t>(global_step));
          dami::PairBatch pairs = dami::build_pairs(ego_al, nei_al, pair_rng);
          auto agg = cfg.adapter.score_aggregation == "mean"
                         ? dami::ScoreAgg::Mean
                         : dami::ScoreAgg::PerPixel;
          auto [dami_var, dami_rep] = dami::contrast_loss(*model.disc, pairs,
                                                          true, agg);
          total = add(total, scale(dami_var, cfg.loss.beta_dami));
          rep = dami_rep;
        }

        zero_grad(params);
        backward(total);
        adam_step(params, adam);

        ordered_json row;
        row["event"] = "train";
        row["phase"] = phase.phase;
        row["step"] = global_step;
        row["loss"] = total->value.v[0];
        row["det"] = det_mean->value.v[0];
        if (rep) row["dami"] = rep->l_contrast;
        metrics.write(row);
        if (rep) {
          ordered_json dr;
          dr["event"] = "dami";
          dr["step"] = global_step;
          dr["l_contrast"] = rep->l_contrast;
          dr["k"] = rep->k;
          dr["i_hat"] = rep->i_hat;
          dr["s_pos_mean"] = rep->s_pos_mean;
          dr["s_neg_mean"] = rep->s_neg_mean;
          metrics.write(dr);
        }
      } catch (const NumericError& e) {
        ordered_json row;
        row["event"] = "error";
        row["step"] = global_step;
        row["what"] = e.what();
        metrics.write(row);
        throw;
      }
    }
  }

  model.bypass_adapter = cfg.homogeneous_oracle;
  save_checkpoint(out_dir + "/ckpt", model, global_step);
}

// ---------------------------------------------------------------------------
// evaluation

namespace {

struct LoadedRun {
  RunConfig cfg;
  Model model;
  int step = 0;
};

LoadedRun load_run(const std::string& run_dir) {
  LoadedRun r;
  r.cfg = run_config_from_json(read_text_file(run_dir + "/config.lock.json"));
  r.model = build_model(r.cfg);
  load_checkpoint(run_dir + "/ckpt", r.model, &r.step);
  return r;
}

MetricsRecord eval_model(Model& model, const RunConfig& cfg,
                         const world::PoseNoiseConfig& noise) {
  NoGrad ng;
  const uint64_t eval_salt = 0xE7A1;
  std::vector<std::vector<det::DetectionBox>> dets, dets_ego;
  std::vector<std::vector<world::GroundTruthBox>> gts;
  for (int i = 0; i < cfg.eval_scenes; ++i) {
    uint64_t id = static_cast<uint64_t>(cfg.train_scenes + i);
    world::SceneSample scene = world::generate_scene(
        cfg.world, world::scene_seed(cfg.world.world_seed, id), cfg.ego_encoder,
        cfg.effective_nei_encoder());
    SceneForward f = forward_scene(model, cfg, scene, false, noise, eval_salt);
    dets.push_back(det::decode(f.out, cfg.world.extent, cfg.score_thresh,
                               cfg.nms_iou));
    // ego-only reference: the same head on the ego branch alone
    det::DetectionOutput solo =
        det::detect(model.head, attention_fuse({f.ego_aligned}));
    dets_ego.push_back(det::decode(solo, cfg.world.extent, cfg.score_thresh,
                                   cfg.nms_iou));
    gts.push_back(scene.gt_boxes);
  }
  MetricsRecord rec;
  rec.eval_scenes = cfg.eval_scenes;
  rec.ap50 = det::evaluate_ap(dets, gts, 0.5f);
  rec.ap70 = det::evaluate_ap(dets, gts, 0.7f);
  rec.ego_only_ap50 = det::evaluate_ap(dets_ego, gts, 0.5f);
  rec.ego_only_ap70 = det::evaluate_ap(dets_ego, gts, 0.7f);
  return rec;
}

}  // namespace

MetricsRecord evaluate(const std::string& run_dir) {
  LoadedRun r = load_run(run_dir);
  return evaluate(run_dir, r.cfg.noise, true);
}

MetricsRecord evaluate(const std::string& run_dir,
                       const world::PoseNoiseConfig& noise_override,
                       bool log_event) {
  LoadedRun r = load_run(run_dir);
  MetricsRecord rec = eval_model(r.model, r.cfg, noise_override);
  if (log_event) {
    JsonlWriter metrics(run_dir + "/metrics.jsonl", /*append=*/true);
    ordered_json row;
    row["event"] = "eval";
    row["step"] = r.step;
    row["ap50"] = rec.ap50;
    row["ap70"] = rec.ap70;
    row["ego_only_ap50"] = rec.ego_only_ap50;
    row["ego_only_ap70"] = rec.ego_only_ap70;
    row["eval_scenes"] = rec.eval_scenes;
    row["sigma_p"] = noise_override.sigma_p;
    row["sigma_r"] = noise_override.sigma_r;
    metrics.write(row);
  }
  return rec;
}

// ---------------------------------------------------------------------------
// throughput

std::vector<BenchResult> bench(const std::string& run_dir,
                               const std::vector<int>& agent_counts,
                               int warmup, int iters) {
  LoadedRun r = load_run(run_dir);
  NoGrad ng;
  std::vector<BenchResult> results;
  for (int agents : agent_counts) {
    if (agents < 2) throw ConfigError("bench: agent count must be >= 2");
    world::WorldConfig wcfg = r.cfg.world;
    wcfg.n_agents_min = wcfg.n_agents_max = agents;
    const int n_scenes = 16;
    std::vector<world::SceneSample> scenes;
    for (int i = 0; i < n_scenes; ++i)
      scenes.push_back(world::generate_scene(
          wcfg, world::scene_seed(wcfg.world_seed ^ 0xbe9cull,
                                  static_cast<uint64_t>(i)),
          r.cfg.ego_encoder, r.cfg.effective_nei_encoder()));

    world::PoseNoiseConfig no_noise;
    std::vector<double> lat_ms;
    double adapter_total = 0, fuse_total = 0;
    size_t nei_evals = 0;
    for (int it = 0; it < warmup + iters; ++it) {
      const auto& scene = scenes[static_cast<size_t>(it % n_scenes)];
      StageTimes times;
      auto t0 = Clock::now();
      forward_scene(r.model, r.cfg, scene, false, no_noise, 0, &times);
      double total = ms_since(t0);
      if (it >= warmup) {
        lat_ms.push_back(total);
        adapter_total += times.adapter_ms;
        fuse_total += times.fuse_head_ms;
        nei_evals += static_cast<size_t>(scene.n_nei);
      }
    }
    std::sort(lat_ms.begin(), lat_ms.end());
    double mean = 0;
    for (double v : lat_ms) mean += v;
    mean /= static_cast<double>(lat_ms.size());
    BenchResult b;
    b.agents = agents;
    b.fps = 1000.0 / mean;
    b.p50_ms = lat_ms[lat_ms.size() / 2];
    b.p95_ms = lat_ms[static_cast<size_t>(static_cast<double>(lat_ms.size()) * 0.95)];
    b.adapter_ms_per_neighbor =
        nei_evals ? adapter_total / static_cast<double>(nei_evals) : 0.0;
    b.fuse_head_ms = fuse_total / static_cast<double>(lat_ms.size());
    results.push_back(b);
  }
  return results;
}

// ---------------------------------------------------------------------------
// grids

void run_parallel(const std::vector<std::function<void()>>& jobs,
                  int max_workers) {
  int hw = static_cast<int>(std::thread::hardware_concurrency());
  int workers = max_workers > 0 ? max_workers : std::max(1, hw);
  workers = std::min<int>(workers, static_cast<int>(jobs.size()));
  std::atomic<size_t> next{0};
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (;;) {
        size_t i = next.fetch_add(1);
        if (i >= jobs.size()) return;
        try {
          jobs[i]();
        } catch (...) {
          errors[static_cast<size_t>(w)] = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

namespace {

struct AblationRow {
  std::string table, name;
  RunConfig cfg;
};

std::vector<AblationRow> ablation_rows(const RunConfig& base) {
  std::vector<AblationRow> rows;
  auto with = [&](const std::string& table, const std::string& name, bool lscr,
                  bool dads, bool dami, std::vector<std::string> stack) {
    RunConfig cfg = base;
    cfg.adapter.use_lscr = lscr;
    cfg.adapter.use_dads = dads;
    cfg.adapter.use_dami = dami;
    if (!stack.empty()) cfg.adapter.dads_stack = std::move(stack);
    rows.push_back({table, name, cfg});
  };
  // component grid (HETE baseline upward)
  with("components", "hete", false, false, false, {});
  with("components", "lscr", true, false, false, {});
  with("components", "lscr_dads", true, true, false, {});
  with("components", "lscr_dami", true, false, true, {});
  with("components", "lscr_dads_dami", true, true, true, {});
  // separation-stack grid, full pipeline otherwise
  with("dads_stack", "ea", true, true, true, {"EA"});
  with("dads_stack", "es", true, true, true, {"ES"});
  with("dads_stack", "es_es", true, true, true, {"ES", "ES"});
  with("dads_stack", "es_ea", true, true, true, {"ES", "EA"});
  with("dads_stack", "es_es_ea", true, true, true, {"ES", "ES", "EA"});
  with("dads_stack", "es_ea_ea", true, true, true, {"ES", "EA", "EA"});
  return rows;
}

std::string fmt4(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", x);
  return buf;
}

}  // namespace

void ablate(const RunConfig& base, const std::string& out_dir) {
  base.validate();
  fs::create_directories(out_dir);
  auto rows = ablation_rows(base);
  std::vector<MetricsRecord> recs(rows.size());
  std::vector<std::function<void()>> jobs;
  for (size_t i = 0; i < rows.size(); ++i) {
    jobs.push_back([&, i] {
      std::string dir = out_dir + "/" + rows[i].table + "_" + rows[i].name;
      train(rows[i].cfg, dir);
      recs[i] = evaluate(dir);
    });
  }
  run_parallel(jobs);

  std::vector<std::vector<std::string>> csv;
  for (size_t i = 0; i < rows.size(); ++i)
    csv.push_back({rows[i].table, rows[i].name, fmt4(recs[i].ap50),
                   fmt4(recs[i].ap70), fmt4(recs[i].ego_only_ap50)});
  write_csv(out_dir + "/results.csv",
            {"table", "row", "ap50", "ap70", "ego_only_ap50"}, csv);
}

void noise_sweep(const std::string& run_dir, const std::vector<float>& sigma_p,
                 const std::vector<float>& sigma_r, const std::string& out_csv) {
  LoadedRun r = load_run(run_dir);
  std::vector<std::vector<std::string>> csv;
  for (float sp : sigma_p)
    for (float sr : sigma_r) {
      world::PoseNoiseConfig noise = r.cfg.noise;
      noise.sigma_p = sp;
      noise.sigma_r = sr;
      MetricsRecord rec = evaluate(run_dir, noise, false);
      csv.push_back({fmt4(sp), fmt4(sr), fmt4(rec.ap50), fmt4(rec.ap70),
                     fmt4(rec.ego_only_ap50)});
    }
  write_csv(out_csv, {"sigma_p", "sigma_r", "ap50", "ap70", "ego_only_ap50"},
            csv);
}

}  // namespace cods::harness
