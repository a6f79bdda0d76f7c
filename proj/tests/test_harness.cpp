#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "cods/harness.hpp"
#include "cods/metrics.hpp"
#include "testutil.hpp"

using namespace cods;
using namespace cods::harness;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// desk-scale shrunk again for unit tests
RunConfig tiny_config() {
  RunConfig cfg;
  cfg.world = world::WorldConfig::desk_default();
  cfg.world.raster_h = 12;
  cfg.world.raster_w = 44;
  cfg.world.encoders = {
      {"tiny_ego", 8, 6, 22, 11, 1.0f, 0.1f, +1},
      {"tiny_nei", 12, 7, 16, 22, 1.5f, -0.2f, -1},
  };
  cfg.world.n_objects_min = 2;
  cfg.world.n_objects_max = 5;
  cfg.world.world_seed = 9;
  cfg.ego_encoder = "tiny_ego";
  cfg.nei_encoder = "tiny_nei";
  cfg.optim.steps = 6;
  cfg.optim.batch_scenes = 2;
  cfg.train_scenes = 24;
  cfg.eval_scenes = 8;
  cfg.seed = 5;
  return cfg;
}

std::string fresh_dir(const std::string& name) {
  std::string dir = "/tmp/cods_harness_" + name;
  fs::remove_all(dir);
  return dir;
}

std::vector<json> read_jsonl(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  std::vector<json> rows;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) rows.push_back(json::parse(line));
  return rows;
}

bool same_file_bytes(const std::string& a, const std::string& b) {
  std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
  REQUIRE(fa.good());
  REQUIRE(fb.good());
  std::string sa((std::istreambuf_iterator<char>(fa)), {});
  std::string sb((std::istreambuf_iterator<char>(fb)), {});
  return sa == sb;
}

}  // namespace

TEST_CASE("run config json round-trip and validation") {
  RunConfig cfg = standard_benchmark();
  std::string text = run_config_to_json(cfg);
  RunConfig back = run_config_from_json(text);
  CHECK(back.world.world_seed == 42);
  CHECK(back.train_scenes == 2000);
  CHECK(back.eval_scenes == 400);
  CHECK(back.optim.steps == 5000);
  CHECK(back.optim.lr == doctest::Approx(0.002f));
  CHECK(back.loss.alpha_reg == 2.f);
  CHECK(back.nei_encoder == "s1d");

  RunConfig bad = tiny_config();
  bad.optim.batch_scenes = 1;  // DAMI needs cross-scene negatives
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = tiny_config();
  bad.adapter.score_aggregation = "median";
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = tiny_config();
  bad.adapter.dads_stack = {"EA", "ES"};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("shipped benchmark config matches the built-in standard benchmark") {
  RunConfig file_cfg = run_config_from_json(
      read_text_file(std::string(CODS_SOURCE_DIR) + "/configs/benchmark.json"));
  CHECK(run_config_to_json(file_cfg) == run_config_to_json(standard_benchmark()));
}

TEST_CASE("steps=0 checkpoint equals initialization") {
  RunConfig cfg = tiny_config();
  cfg.optim.steps = 0;
  std::string dir = fresh_dir("init");
  train(cfg, dir);
  Model fresh = build_model(cfg);
  Model loaded = build_model(cfg);
  int step = -1;
  load_checkpoint(dir + "/ckpt", loaded, &step);
  CHECK(step == 0);
  auto a = trainable_params(fresh);
  auto b = trainable_params(loaded);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i]->value.v == b[i]->value.v);
}

TEST_CASE("same seed twice gives bit-identical checkpoints and metrics") {
  RunConfig cfg = tiny_config();
  std::string d1 = fresh_dir("det1"), d2 = fresh_dir("det2");
  train(cfg, d1);
  train(cfg, d2);
  CHECK(same_file_bytes(d1 + "/metrics.jsonl", d2 + "/metrics.jsonl"));
  Model m1 = build_model(cfg), m2 = build_model(cfg);
  load_checkpoint(d1 + "/ckpt", m1);
  load_checkpoint(d2 + "/ckpt", m2);
  auto p1 = trainable_params(m1), p2 = trainable_params(m2);
  for (size_t i = 0; i < p1.size(); ++i) CHECK(p1[i]->value.v == p2[i]->value.v);

  // different seed diverges
  RunConfig other = cfg;
  other.seed = 6;
  std::string d3 = fresh_dir("det3");
  train(other, d3);
  CHECK_FALSE(same_file_bytes(d1 + "/metrics.jsonl", d3 + "/metrics.jsonl"));
}

TEST_CASE("evaluate is pure: same checkpoint, same record") {
  RunConfig cfg = tiny_config();
  std::string dir = fresh_dir("eval");
  train(cfg, dir);
  MetricsRecord r1 = evaluate(dir, cfg.noise, false);
  MetricsRecord r2 = evaluate(dir, cfg.noise, false);
  CHECK(r1.ap50 == r2.ap50);
  CHECK(r1.ap70 == r2.ap70);
  CHECK(r1.ego_only_ap50 == r2.ego_only_ap50);
}

TEST_CASE("checkpoint save/load/save round-trips evaluation") {
  RunConfig cfg = tiny_config();
  std::string dir = fresh_dir("rt");
  train(cfg, dir);
  MetricsRecord before = evaluate(dir, cfg.noise, false);

  Model m = build_model(cfg);
  int step = 0;
  load_checkpoint(dir + "/ckpt", m, &step);
  std::string dir2 = fresh_dir("rt2");
  fs::create_directories(dir2);
  write_text_file(dir2 + "/config.lock.json", run_config_to_json(cfg) + "\n");
  save_checkpoint(dir2 + "/ckpt", m, step);
  MetricsRecord after = evaluate(dir2, cfg.noise, false);
  CHECK(before.ap50 == after.ap50);
  CHECK(before.ap70 == after.ap70);
  CHECK(before.ego_only_ap50 == after.ego_only_ap50);
}

TEST_CASE("frozen encoders: features for a fixed scene unchanged by training") {
  RunConfig cfg = tiny_config();
  uint64_t sid = world::scene_seed(cfg.world.world_seed, 3);
  world::SceneSample before =
      world::generate_scene(cfg.world, sid, cfg.ego_encoder, cfg.nei_encoder);
  std::string dir = fresh_dir("frozen");
  train(cfg, dir);
  world::SceneSample after =
      world::generate_scene(cfg.world, sid, cfg.ego_encoder, cfg.nei_encoder);
  CHECK(before.ego_feature.v == after.ego_feature.v);
  REQUIRE(before.neighbor_features.size() == after.neighbor_features.size());
  for (size_t i = 0; i < before.neighbor_features.size(); ++i)
    CHECK(before.neighbor_features[i].v == after.neighbor_features[i].v);
}

TEST_CASE("metrics stream carries dami rows iff dami is enabled") {
  RunConfig cfg = tiny_config();
  std::string with = fresh_dir("dami_on");
  train(cfg, with);
  auto rows = read_jsonl(with + "/metrics.jsonl");
  int dami_rows = 0;
  for (const auto& r : rows) {
    if (r.at("event") == "dami") {
      ++dami_rows;
      // Eq. (7) identity must hold exactly on every logged step
      double l = r.at("l_contrast").get<double>();
      double ih = r.at("i_hat").get<double>();
      int k = r.at("k").get<int>();
      CHECK(ih == std::log(static_cast<double>(k)) - l);
      CHECK(r.contains("s_pos_mean"));
      CHECK(r.contains("s_neg_mean"));
    }
  }
  CHECK(dami_rows == cfg.optim.steps);

  RunConfig off = cfg;
  off.adapter.use_dami = false;
  std::string without = fresh_dir("dami_off");
  train(off, without);
  for (const auto& r : read_jsonl(without + "/metrics.jsonl")) {
    CHECK(r.at("event") != "dami");
    CHECK_FALSE(r.contains("l_contrast"));
    CHECK_FALSE(r.contains("dami"));
  }
}

TEST_CASE("train rejects invalid configs and records numeric failures") {
  RunConfig cfg = tiny_config();
  cfg.ego_encoder = "nope";
  CHECK_THROWS_AS(train(cfg, fresh_dir("bad")), ConfigError);
}

TEST_CASE("homogeneous oracle bypasses the adapter") {
  RunConfig cfg = tiny_config();
  cfg.homogeneous_oracle = true;
  Model m = build_model(cfg);
  CHECK(m.bypass_adapter);
  CHECK_FALSE(m.lscr.has_value());
  CHECK_FALSE(m.dads.has_value());
  CHECK_FALSE(m.disc.has_value());
  std::string dir = fresh_dir("homo");
  train(cfg, dir);
  MetricsRecord rec = evaluate(dir, cfg.noise, false);
  CHECK(rec.eval_scenes == cfg.eval_scenes);
}

TEST_CASE("two-phase training runs both phases, warm or reinit") {
  RunConfig cfg = tiny_config();
  cfg.two_phase = true;
  cfg.phase1_steps = 3;
  cfg.optim.steps = 3;
  std::string dir = fresh_dir("phase");
  train(cfg, dir);
  auto rows = read_jsonl(dir + "/metrics.jsonl");
  int p1 = 0, p2 = 0;
  for (const auto& r : rows)
    if (r.at("event") == "train") {
      if (r.at("phase") == 1) ++p1;
      if (r.at("phase") == 2) ++p2;
    }
  CHECK(p1 == 3);
  CHECK(p2 == 3);

  cfg.phase2_head_init = "reinit";
  std::string dir2 = fresh_dir("phase_reinit");
  train(cfg, dir2);
  CHECK(fs::exists(dir2 + "/ckpt/manifest.json"));
}

TEST_CASE("noise sweep: sigma 0 equals plain evaluation") {
  RunConfig cfg = tiny_config();
  std::string dir = fresh_dir("sweep");
  train(cfg, dir);
  MetricsRecord plain = evaluate(dir, cfg.noise, false);
  world::PoseNoiseConfig zero = cfg.noise;
  zero.sigma_p = 0.f;
  zero.sigma_r = 0.f;
  MetricsRecord at_zero = evaluate(dir, zero, false);
  CHECK(plain.ap50 == at_zero.ap50);
  CHECK(plain.ego_only_ap50 == at_zero.ego_only_ap50);

  noise_sweep(dir, {0.f, 0.3f}, {0.f}, dir + "/noise_sweep.csv");
  std::ifstream csv(dir + "/noise_sweep.csv");
  REQUIRE(csv.good());
  std::string header;
  std::getline(csv, header);
  CHECK(header == "sigma_p,sigma_r,ap50,ap70,ego_only_ap50");
  int data_rows = 0;
  std::string line;
  while (std::getline(csv, line))
    if (!line.empty()) ++data_rows;
  CHECK(data_rows == 2);

  // the ego-only reference never sees projection noise
  world::PoseNoiseConfig big = zero;
  big.sigma_p = 0.5f;
  MetricsRecord noisy = evaluate(dir, big, false);
  CHECK(noisy.ego_only_ap50 == plain.ego_only_ap50);
}

TEST_CASE("bench reports sane latency statistics") {
  RunConfig cfg = tiny_config();
  std::string dir = fresh_dir("bench");
  train(cfg, dir);
  auto results = bench(dir, {2, 3}, 3, 20);
  REQUIRE(results.size() == 2);
  for (const auto& b : results) {
    CHECK(b.fps > 0);
    CHECK(b.p50_ms > 0);
    CHECK(b.p50_ms <= b.p95_ms + 1e-9);
    CHECK(b.adapter_ms_per_neighbor > 0);
  }
  CHECK_THROWS_AS(bench(dir, {1}, 1, 2), ConfigError);
}

TEST_CASE("ablation grid produces both tables with the full row present once") {
  RunConfig cfg = tiny_config();
  cfg.optim.steps = 2;
  cfg.eval_scenes = 4;
  std::string dir = fresh_dir("ablate");
  ablate(cfg, dir);
  std::ifstream csv(dir + "/results.csv");
  REQUIRE(csv.good());
  std::string line;
  std::getline(csv, line);
  CHECK(line == "table,row,ap50,ap70,ego_only_ap50");
  int components = 0, stacks = 0, full_rows = 0, es_ea_rows = 0;
  while (std::getline(csv, line)) {
    if (line.rfind("components,", 0) == 0) ++components;
    if (line.rfind("dads_stack,", 0) == 0) ++stacks;
    if (line.rfind("components,lscr_dads_dami,", 0) == 0) ++full_rows;
    if (line.rfind("dads_stack,es_ea,", 0) == 0) ++es_ea_rows;
  }
  CHECK(components == 5);
  CHECK(stacks == 6);
  CHECK(full_rows == 1);
  CHECK(es_ea_rows == 1);
}

TEST_CASE("standard benchmark: smoothed loss at step 500 is below step 50") {
  RunConfig cfg = standard_benchmark();
  cfg.optim.steps = 500;
  std::string dir = fresh_dir("bench500");
  train(cfg, dir);
  auto rows = read_jsonl(dir + "/metrics.jsonl");
  std::vector<double> losses;
  for (const auto& r : rows)
    if (r.at("event") == "train") losses.push_back(r.at("loss").get<double>());
  REQUIRE(losses.size() == 500);
  auto smoothed = [&](size_t center) {
    size_t lo = center >= 10 ? center - 10 : 0;
    size_t hi = std::min(losses.size(), center + 10);
    double acc = 0;
    for (size_t i = lo; i < hi; ++i) acc += losses[i];
    return acc / static_cast<double>(hi - lo);
  };
  CHECK(smoothed(499) < smoothed(49));
}

TEST_CASE("training loss trends down on the tiny task") {
  RunConfig cfg = tiny_config();
  cfg.optim.steps = 120;
  std::string dir = fresh_dir("trend");
  train(cfg, dir);
  auto rows = read_jsonl(dir + "/metrics.jsonl");
  std::vector<double> losses;
  for (const auto& r : rows)
    if (r.at("event") == "train") losses.push_back(r.at("loss").get<double>());
  REQUIRE(losses.size() == 120);
  auto avg = [&](size_t lo, size_t hi) {
    double acc = 0;
    for (size_t i = lo; i < hi; ++i) acc += losses[i];
    return acc / static_cast<double>(hi - lo);
  };
  CHECK(avg(100, 120) < avg(0, 20));
}
