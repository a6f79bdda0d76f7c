#pragma once

#include <vector>

#include "cods/tensor.hpp"

namespace cods::adapter {

// conv3x3 -> BN -> LeakyReLU, twice; channel-preserving
struct SepBlockParams {
  Var conv1_w, conv1_b, bn1_gamma, bn1_beta;
  Var conv2_w, conv2_b, bn2_gamma, bn2_beta;
  float slope = 0.1f;
};

// BN running statistics live outside the parameters: the shared EA stage
// shares weights across branches but keeps per-branch stats, so one domain's
// activation statistics never leak into the other at eval time.
struct SepBlockStats {
  BatchNormState bn1, bn2;
};

enum class SepKind { ES, EA };

struct DadsConfig {
  std::vector<SepKind> stack = {SepKind::ES, SepKind::EA};
  bool share_ea = true;

  int es_count() const;
  int ea_count() const;
  void validate() const;  // throws ConfigError outside the supported grid
  std::vector<std::string> stack_names() const;
  static DadsConfig from_names(const std::vector<std::string>& names,
                               bool share_ea = true);
};

struct DadsParams {
  DadsConfig cfg;
  std::vector<SepBlockParams> ego_es, nei_es;  // independent per domain
  // shared storage: both branches evaluate the same Vars when share_ea
  std::vector<SepBlockParams> shared_ea;
  std::vector<SepBlockParams> nei_ea_unshared;  // only when !share_ea
  std::vector<SepBlockStats> ego_es_stats, nei_es_stats;
  std::vector<SepBlockStats> ego_ea_stats, nei_ea_stats;
};

DadsParams build_dads(const DadsConfig& cfg, int channels, uint64_t seed);

Var sep_block_forward(const SepBlockParams& p, SepBlockStats& stats,
                      const Var& x, bool training);

// one branch of the separation stack (M_ego or M_nei) on a single map
Var dads_branch(DadsParams& params, const Var& x, bool is_ego, bool training);

// M_ego on the ego map, M_nei on every neighbor map; geometry preserved
std::pair<Var, std::vector<Var>> dads_forward(DadsParams& params,
                                              const Var& f_ego,
                                              const std::vector<Var>& f_nei,
                                              bool training);

std::vector<Var> dads_trainable_params(const DadsParams& p);

}  // namespace cods::adapter
