#include "cods/dami.hpp"

#include <algorithm>
#include <cmath>

namespace cods::dami {

DiscriminatorParams build_discriminator(int feature_channels, uint64_t seed) {
  if (feature_channels < 2 || feature_channels % 2 != 0)
    throw ConfigError("discriminator: channel count must be even and >= 2");
  int c = feature_channels;
  Rng rng(seed);
  DiscriminatorParams d;
  d.channels = c;
  d.w1 = leaf(kaiming_uniform({c, 2 * c, 3, 3}, rng), true);
  d.b1 = leaf(Tensor({c}), true);
  d.bn1_gamma = leaf(Tensor::full({c}, 1.f), true);
  d.bn1_beta = leaf(Tensor({c}), true);
  d.w2 = leaf(kaiming_uniform({c / 2, c, 3, 3}, rng), true);
  d.b2 = leaf(Tensor({c / 2}), true);
  d.bn2_gamma = leaf(Tensor::full({c / 2}, 1.f), true);
  d.bn2_beta = leaf(Tensor({c / 2}), true);
  d.w3 = leaf(kaiming_uniform({1, c / 2, 1, 1}, rng), true);
  d.b3 = leaf(Tensor({1}), true);
  d.bn1_stats.init(c);
  d.bn2_stats.init(c / 2);
  return d;
}

std::vector<Var> discriminator_params(const DiscriminatorParams& d) {
  return {d.w1, d.b1, d.bn1_gamma, d.bn1_beta, d.w2,
          d.b2, d.bn2_gamma, d.bn2_beta, d.w3, d.b3};
}

Var discriminate(DiscriminatorParams& d, const Var& anchor, const Var& sample,
                 bool training) {
  if (anchor->value.rank() != 3 || sample->value.rank() != 3 ||
      anchor->value.dims != sample->value.dims)
    throw DimError("discriminate: anchor/sample geometry mismatch");
  if (anchor->value.dim(0) != d.channels)
    throw DimError("discriminate: expected " + std::to_string(d.channels) +
                   " channels, got " + std::to_string(anchor->value.dim(0)));
  Var h = concat_channels({anchor, sample});  // anchor first
  h = conv2d(h, d.w1, d.b1);
  h = batchnorm2d(h, d.bn1_gamma, d.bn1_beta, d.bn1_stats, training);
  h = leaky_relu(h, 0.1f);
  h = conv2d(h, d.w2, d.b2);
  h = batchnorm2d(h, d.bn2_gamma, d.bn2_beta, d.bn2_stats, training);
  h = leaky_relu(h, 0.1f);
  return conv2d(h, d.w3, d.b3);
}

std::vector<PairPlan> plan_pairs(const std::vector<int>& n_nei, Rng& rng) {
  int scenes = static_cast<int>(n_nei.size());
  if (scenes < 2)
    throw PairingError("pairing needs at least 2 scenes for cross-scene negatives");
  int max_nei = 0;
  for (int v = 0; v < scenes; ++v) {
    if (n_nei[static_cast<size_t>(v)] < 1)
      throw PairingError("pairing: scene " + std::to_string(v) +
                         " has no neighbors");
    max_nei = std::max(max_nei, n_nei[static_cast<size_t>(v)]);
  }

  std::vector<PairPlan> out;
  for (int rank = 1; rank <= max_nei; ++rank) {
    std::vector<int> qualifying;
    for (int v = 0; v < scenes; ++v)
      if (n_nei[static_cast<size_t>(v)] >= rank) qualifying.push_back(v);
    if (qualifying.empty()) continue;
    if (qualifying.size() >= 2) {
      for (size_t qi = 0; qi < qualifying.size(); ++qi) {
        PairPlan p;
        p.scene = qualifying[qi];
        p.rank = rank;
        p.neg_scene = qualifying[(qi + 1) % qualifying.size()];
        p.neg_is_ego = false;
        out.push_back(p);
      }
    } else {
      int v = qualifying[0];
      int q = v;
      while (q == v) q = rng.uniform_int(0, scenes - 1);
      PairPlan p;
      p.scene = v;
      p.rank = rank;
      p.neg_scene = q;
      p.neg_is_ego = true;
      out.push_back(p);
    }
  }
  return out;
}

PairBatch build_pairs(const std::vector<Var>& ego_aligned,
                      const std::vector<std::vector<Var>>& nei_aligned,
                      Rng& rng) {
  if (ego_aligned.size() != nei_aligned.size())
    throw PairingError("build_pairs: ego/neighbor list size mismatch");
  std::vector<int> n_nei;
  n_nei.reserve(nei_aligned.size());
  for (const auto& ns : nei_aligned) n_nei.push_back(static_cast<int>(ns.size()));

  PairBatch batch;
  batch.provenance = plan_pairs(n_nei, rng);
  for (const auto& p : batch.provenance) {
    batch.anchors.push_back(ego_aligned[static_cast<size_t>(p.scene)]);
    batch.positives.push_back(
        nei_aligned[static_cast<size_t>(p.scene)][static_cast<size_t>(p.rank - 1)]);
    batch.negatives.push_back(
        p.neg_is_ego
            ? ego_aligned[static_cast<size_t>(p.neg_scene)]
            : nei_aligned[static_cast<size_t>(p.neg_scene)]
                         [static_cast<size_t>(p.rank - 1)]);
  }
  batch.k = static_cast<int>(batch.provenance.size());
  return batch;
}

Var pair_term(const Var& s_pos, const Var& s_neg) {
  return add(softplus(scale(s_pos, -1.f)), softplus(s_neg));
}

std::pair<Var, DamiReport> contrast_loss(DiscriminatorParams& d,
                                         const PairBatch& pairs, bool training,
                                         ScoreAgg agg) {
  if (pairs.k == 0 || pairs.anchors.empty())
    throw PairingError("contrast_loss: empty pair batch");

  DamiReport rep;
  rep.k = pairs.k;
  Var total;
  double spos_acc = 0.0, sneg_acc = 0.0, term_acc = 0.0;
  for (int i = 0; i < pairs.k; ++i) {
    Var smap_pos = discriminate(d, pairs.anchors[static_cast<size_t>(i)],
                                pairs.positives[static_cast<size_t>(i)], training);
    Var smap_neg = discriminate(d, pairs.anchors[static_cast<size_t>(i)],
                                pairs.negatives[static_cast<size_t>(i)], training);
    Var s_pos = mean(smap_pos);
    Var s_neg = mean(smap_neg);
    Var term;
    if (agg == ScoreAgg::Mean) {
      term = pair_term(s_pos, s_neg);
    } else {
      term = add(mean(softplus(scale(smap_pos, -1.f))), mean(softplus(smap_neg)));
    }
    total = total ? add(total, term) : term;
    double t = term->value.v[0];
    rep.per_pair_terms.push_back(t);
    rep.pair_scene.push_back(pairs.provenance[static_cast<size_t>(i)].scene);
    term_acc += t;
    spos_acc += s_pos->value.v[0];
    sneg_acc += s_neg->value.v[0];
  }
  Var loss = scale(total, 1.f / static_cast<float>(pairs.k));
  rep.l_contrast = term_acc / pairs.k;
  rep.i_hat = std::log(static_cast<double>(pairs.k)) - rep.l_contrast;
  rep.s_pos_mean = spos_acc / pairs.k;
  rep.s_neg_mean = sneg_acc / pairs.k;
  return {loss, rep};
}

double dami_loss(const std::vector<double>& per_pair_terms) {
  if (per_pair_terms.empty()) throw PairingError("dami_loss: no pairs");
  double acc = 0.0;
  for (double t : per_pair_terms) acc += t;
  return acc / static_cast<double>(per_pair_terms.size());
}

}  // namespace cods::dami
