#include "cods/dads.hpp"

#include <algorithm>

namespace cods::adapter {

int DadsConfig::es_count() const {
  return static_cast<int>(std::count(stack.begin(), stack.end(), SepKind::ES));
}

int DadsConfig::ea_count() const {
  return static_cast<int>(std::count(stack.begin(), stack.end(), SepKind::EA));
}

void DadsConfig::validate() const {
  // supported grid: [EA], [ES], [ES,ES], [ES,EA], [ES,ES,EA], [ES,EA,EA]
  static const std::vector<std::vector<SepKind>> grid = {
      {SepKind::EA},
      {SepKind::ES},
      {SepKind::ES, SepKind::ES},
      {SepKind::ES, SepKind::EA},
      {SepKind::ES, SepKind::ES, SepKind::EA},
      {SepKind::ES, SepKind::EA, SepKind::EA},
  };
  for (const auto& g : grid)
    if (g == stack) return;
  throw ConfigError("dads: stack outside the supported ablation grid");
}

std::vector<std::string> DadsConfig::stack_names() const {
  std::vector<std::string> out;
  for (auto k : stack) out.push_back(k == SepKind::ES ? "ES" : "EA");
  return out;
}

DadsConfig DadsConfig::from_names(const std::vector<std::string>& names,
                                  bool share_ea) {
  DadsConfig cfg;
  cfg.stack.clear();
  cfg.share_ea = share_ea;
  for (const auto& n : names) {
    if (n == "ES")
      cfg.stack.push_back(SepKind::ES);
    else if (n == "EA")
      cfg.stack.push_back(SepKind::EA);
    else
      throw ConfigError("dads: unknown block kind '" + n + "'");
  }
  cfg.validate();
  return cfg;
}

namespace {

SepBlockStats make_block_stats(int channels) {
  SepBlockStats st;
  st.bn1.init(channels);
  st.bn2.init(channels);
  return st;
}

SepBlockParams make_block(int channels, Rng& rng, float slope) {
  SepBlockParams b;
  b.conv1_w = leaf(kaiming_uniform({channels, channels, 3, 3}, rng, slope), true);
  b.conv1_b = leaf(Tensor({channels}), true);
  b.bn1_gamma = leaf(Tensor::full({channels}, 1.f), true);
  b.bn1_beta = leaf(Tensor({channels}), true);
  b.conv2_w = leaf(kaiming_uniform({channels, channels, 3, 3}, rng, slope), true);
  b.conv2_b = leaf(Tensor({channels}), true);
  b.bn2_gamma = leaf(Tensor::full({channels}, 1.f), true);
  b.bn2_beta = leaf(Tensor({channels}), true);
  b.slope = slope;
  return b;
}

void push_block_params(const SepBlockParams& b, std::vector<Var>& out) {
  out.insert(out.end(), {b.conv1_w, b.conv1_b, b.bn1_gamma, b.bn1_beta,
                         b.conv2_w, b.conv2_b, b.bn2_gamma, b.bn2_beta});
}

}  // namespace

DadsParams build_dads(const DadsConfig& cfg, int channels, uint64_t seed) {
  cfg.validate();
  if (channels < 1) throw ConfigError("dads: channels must be positive");
  const float slope = 0.1f;
  Rng rng(seed);
  DadsParams p;
  p.cfg = cfg;
  int n_es = cfg.es_count(), n_ea = cfg.ea_count();
  for (int i = 0; i < n_es; ++i) {
    p.ego_es.push_back(make_block(channels, rng, slope));
    p.ego_es_stats.push_back(make_block_stats(channels));
  }
  for (int i = 0; i < n_es; ++i) {
    p.nei_es.push_back(make_block(channels, rng, slope));
    p.nei_es_stats.push_back(make_block_stats(channels));
  }
  for (int i = 0; i < n_ea; ++i) {
    p.shared_ea.push_back(make_block(channels, rng, slope));
    p.ego_ea_stats.push_back(make_block_stats(channels));
    p.nei_ea_stats.push_back(make_block_stats(channels));
  }
  if (!cfg.share_ea)
    for (int i = 0; i < n_ea; ++i)
      p.nei_ea_unshared.push_back(make_block(channels, rng, slope));
  return p;
}

Var sep_block_forward(const SepBlockParams& p, SepBlockStats& stats,
                      const Var& x, bool training) {
  Var h = conv2d(x, p.conv1_w, p.conv1_b);
  h = batchnorm2d(h, p.bn1_gamma, p.bn1_beta, stats.bn1, training);
  h = leaky_relu(h, p.slope);
  h = conv2d(h, p.conv2_w, p.conv2_b);
  h = batchnorm2d(h, p.bn2_gamma, p.bn2_beta, stats.bn2, training);
  return leaky_relu(h, p.slope);
}

std::pair<Var, std::vector<Var>> dads_forward(DadsParams& params,
                                              const Var& f_ego,
                                              const std::vector<Var>& f_nei,
                                              bool training) {
  const auto& dims = f_ego->value.dims;
  if (f_ego->value.rank() != 3) throw DimError("dads_forward: expected [C,H,W]");
  for (const auto& f : f_nei)
    if (f->value.dims != dims)
      throw DimError("dads_forward: neighbor geometry mismatch " +
                     dims_str(f->value.dims) + " vs ego " + dims_str(dims));

  Var ego_out = dads_branch(params, f_ego, true, training);
  std::vector<Var> nei_out;
  nei_out.reserve(f_nei.size());
  for (const auto& f : f_nei)
    nei_out.push_back(dads_branch(params, f, false, training));
  return {ego_out, nei_out};
}

Var dads_branch(DadsParams& params, const Var& x, bool is_ego, bool training) {
  Var h = x;
  size_t es_i = 0, ea_i = 0;
  for (auto kind : params.cfg.stack) {
    if (kind == SepKind::ES) {
      auto& blocks = is_ego ? params.ego_es : params.nei_es;
      auto& stats = is_ego ? params.ego_es_stats : params.nei_es_stats;
      h = sep_block_forward(blocks[es_i], stats[es_i], h, training);
      ++es_i;
    } else {
      auto& blocks = is_ego || params.cfg.share_ea ? params.shared_ea
                                                   : params.nei_ea_unshared;
      auto& stats = is_ego ? params.ego_ea_stats : params.nei_ea_stats;
      h = sep_block_forward(blocks[ea_i], stats[ea_i], h, training);
      ++ea_i;
    }
  }
  return h;
}

std::vector<Var> dads_trainable_params(const DadsParams& p) {
  std::vector<Var> out;
  for (const auto& b : p.ego_es) push_block_params(b, out);
  for (const auto& b : p.nei_es) push_block_params(b, out);
  for (const auto& b : p.shared_ea) push_block_params(b, out);
  for (const auto& b : p.nei_ea_unshared) push_block_params(b, out);
  return out;
}

}  // namespace cods::adapter
