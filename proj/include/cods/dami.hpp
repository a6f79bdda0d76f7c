#pragma once

#include <vector>

#include "cods/tensor.hpp"

namespace cods::dami {

// Score-map discriminator over channel-concatenated [anchor; sample] pairs:
// 2C -> C (3x3), BN, LeakyReLU, C -> C/2 (3x3), BN, LeakyReLU, C/2 -> 1 (1x1)
struct DiscriminatorParams {
  int channels = 0;  // aligned feature channel count C
  Var w1, b1, bn1_gamma, bn1_beta;
  Var w2, b2, bn2_gamma, bn2_beta;
  Var w3, b3;
  BatchNormState bn1_stats, bn2_stats;
};

DiscriminatorParams build_discriminator(int feature_channels, uint64_t seed);
std::vector<Var> discriminator_params(const DiscriminatorParams& d);

Var discriminate(DiscriminatorParams& d, const Var& anchor, const Var& sample,
                 bool training);

// One pair from the batch pairing pass. rank is 1-based (the k-th neighbor).
struct PairPlan {
  int scene = 0;
  int rank = 0;
  int neg_scene = 0;
  bool neg_is_ego = false;  // true: fallback to another scene's ego feature
};

// Pure pairing combinatorics: for each neighbor rank, scenes with at least
// that many neighbors contribute (anchor, positive); the negative is the
// next qualifying scene's positive, cyclically, or a random other scene's
// ego feature when the rank has a single qualifying scene.
std::vector<PairPlan> plan_pairs(const std::vector<int>& n_nei, Rng& rng);

struct PairBatch {
  std::vector<Var> anchors, positives, negatives;
  int k = 0;  // number of negative pairs == list length
  std::vector<PairPlan> provenance;
};

PairBatch build_pairs(const std::vector<Var>& ego_aligned,
                      const std::vector<std::vector<Var>>& nei_aligned,
                      Rng& rng);

enum class ScoreAgg { Mean, PerPixel };

// binary logistic term for one pair given scalar scores
Var pair_term(const Var& s_pos, const Var& s_neg);

struct DamiReport {
  double l_contrast = 0.0;
  int k = 0;
  double i_hat = 0.0;  // log(k) - l_contrast, by construction
  double s_pos_mean = 0.0, s_neg_mean = 0.0;
  std::vector<double> per_pair_terms;
  std::vector<int> pair_scene;  // anchor scene per pair, for per-ego grouping
};

std::pair<Var, DamiReport> contrast_loss(DiscriminatorParams& d,
                                         const PairBatch& pairs, bool training,
                                         ScoreAgg agg = ScoreAgg::Mean);

// mean of one ego's per-pair contrastive terms
double dami_loss(const std::vector<double>& per_pair_terms);

}  // namespace cods::dami
