#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cods/dads.hpp"
#include "cods/dami.hpp"
#include "cods/detection.hpp"
#include "cods/lscr.hpp"
#include "cods/world.hpp"

namespace cods::harness {

struct OptimConfig {
  float lr = 0.002f;
  int batch_scenes = 4;
  int steps = 5000;
  float beta1 = 0.9f, beta2 = 0.999f, eps = 1e-8f;
};

struct AdapterConfig {
  bool use_lscr = true;
  bool use_dads = true;
  std::vector<std::string> dads_stack = {"ES", "EA"};
  bool share_ea = true;
  bool use_dami = true;
  std::string score_aggregation = "mean";  // or "per_pixel"
};

struct RunConfig {
  world::WorldConfig world = world::WorldConfig::desk_default();
  std::string ego_encoder = "p0d";
  std::string nei_encoder = "s1d";
  bool homogeneous_oracle = false;  // neighbors share the ego encoder, no adapter
  AdapterConfig adapter;
  OptimConfig optim;
  det::LossWeights loss;
  world::PoseNoiseConfig noise;
  int train_scenes = 2000;
  int eval_scenes = 400;
  uint64_t seed = 1;
  float score_thresh = 0.10f;
  float nms_iou = 0.15f;
  bool two_phase = false;
  int phase1_steps = 1000;
  std::string phase2_head_init = "warm";  // or "reinit"

  void validate() const;
  std::string effective_nei_encoder() const {
    return homogeneous_oracle ? ego_encoder : nei_encoder;
  }
};

// world seed 42, 2000 train / 400 eval scenes, default hetero pairing,
// 5000 steps
RunConfig standard_benchmark();

std::string run_config_to_json(const RunConfig& cfg);
RunConfig run_config_from_json(const std::string& text);

// ---------------------------------------------------------------------------

struct Model {
  bool use_lscr = false, use_dads = false, use_dami = false;
  bool bypass_adapter = false;
  int channels = 0, out_h = 0, out_w = 0;
  std::optional<adapter::LscrParams> lscr;
  std::optional<adapter::DadsParams> dads;
  std::optional<dami::DiscriminatorParams> disc;
  det::HeadParams head;
};

Model build_model(const RunConfig& cfg);
std::vector<Var> trainable_params(const Model& m);

// named parameter tensors plus BN running statistics, in a fixed order
struct NamedTensors {
  std::vector<std::pair<std::string, Var>> params;
  std::vector<std::pair<std::string, std::vector<float>*>> stats;
};
NamedTensors named_tensors(Model& m);

void save_checkpoint(const std::string& ckpt_dir, Model& m, int step);
void load_checkpoint(const std::string& ckpt_dir, Model& m, int* step = nullptr);

// ---------------------------------------------------------------------------

struct MetricsRecord {
  double ap50 = 0, ap70 = 0;
  double ego_only_ap50 = 0, ego_only_ap70 = 0;
  int eval_scenes = 0;
};

// Runs the full protocol into out_dir: config.lock.json, metrics.jsonl and
// ckpt/. Frozen encoders, Adam on adapter + discriminator + head.
void train(const RunConfig& cfg, const std::string& out_dir);

MetricsRecord evaluate(const std::string& run_dir);
MetricsRecord evaluate(const std::string& run_dir,
                       const world::PoseNoiseConfig& noise_override,
                       bool log_event);

struct BenchResult {
  int agents = 0;
  double fps = 0;
  double p50_ms = 0, p95_ms = 0;
  double adapter_ms_per_neighbor = 0;
  double fuse_head_ms = 0;
};

std::vector<BenchResult> bench(const std::string& run_dir,
                               const std::vector<int>& agent_counts,
                               int warmup = 20, int iters = 200);

// component grid {none, LSCR, LSCR+DADS, LSCR+DAMI, full} and separation
// grid {EA, ES, ES+ES, ES+EA, 2ES+EA, ES+2EA}; shared seeds, results.csv
void ablate(const RunConfig& base, const std::string& out_dir);

void noise_sweep(const std::string& run_dir, const std::vector<float>& sigma_p,
                 const std::vector<float>& sigma_r, const std::string& out_csv);

// run independent jobs on a small thread pool; each job owns its state
void run_parallel(const std::vector<std::function<void()>>& jobs,
                  int max_workers = 0);

}  // namespace cods::harness
