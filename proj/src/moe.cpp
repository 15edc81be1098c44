#include "jambatalk/moe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

namespace jambatalk {

Routing route_logits(std::span<const double> logits, std::size_t k, bool renormalize) {
  const std::size_t n = logits.size();
  if (k < 1 || k > n) throw ConfigError(fmt::format("top_k = {} must lie in [1, {}]", k, n));
  double mx = -INFINITY;
  for (double v : logits) {
    if (std::isnan(v)) throw NumericError("router logits contain NaN");
    mx = std::max(mx, v);
  }
  std::vector<double> p(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += (p[i] = std::exp(logits[i] - mx));
  for (auto& v : p) v /= total;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });

  Routing r;
  r.indices.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  for (auto i : r.indices) r.gates.push_back(p[i]);
  if (renormalize) {
    const double s = std::accumulate(r.gates.begin(), r.gates.end(), 0.0);
    for (auto& g : r.gates) g /= s;
  }
  return r;
}

MoeLayer::MoeLayer(const MoeConfig& cfg, std::uint64_t seed, const std::string& path) : cfg_(cfg) {
  if (cfg.n_experts == 0) throw ConfigError("moe: n_experts must be positive");
  if (cfg.top_k < 1 || cfg.top_k > cfg.n_experts) {
    throw ConfigError(fmt::format("moe: top_k = {} must lie in [1, n_experts = {}]", cfg.top_k,
                                  cfg.n_experts));
  }
  Rng r_router = Rng::derive(seed, path + ".router");
  router = Linear(cfg.d_model, cfg.n_experts, false, r_router);
  for (std::size_t i = 0; i < cfg.n_experts; ++i) {
    Rng r = Rng::derive(seed, fmt::format("{}.expert{}", path, i));
    experts.emplace_back(cfg.d_model, cfg.d_ff, r);
  }
}

Routing MoeLayer::route(const Tensor& x) const {
  if (x.numel() != cfg_.d_model) throw DimensionError("moe route expects one d_model vector");
  NoGradGuard no_grad;
  Tensor logits = router(reshape(x, {1, cfg_.d_model}));
  return route_logits(logits.data(), cfg_.top_k, cfg_.renormalize);
}

Tensor MoeLayer::forward(const Tensor& x, RoutingStats* stats) const {
  const std::size_t d = cfg_.d_model;
  const std::size_t n_exp = cfg_.n_experts;
  const std::size_t k = cfg_.top_k;
  if (x.dim(-1) != d) throw DimensionError("moe forward: last dim must be d_model, got " + shape_str(x.shape()));
  const std::size_t tokens = x.numel() / d;
  Tensor flat = reshape(x, {tokens, d});
  Tensor logits = router(flat);
  Tensor probs = softmax(logits, -1);

  std::vector<std::size_t> selected(tokens * k);
  std::vector<std::vector<std::size_t>> rows(n_exp);
  std::vector<std::vector<std::size_t>> slots(n_exp);
  auto lv = logits.data();
  for (std::size_t m = 0; m < tokens; ++m) {
    const Routing r = route_logits(lv.subspan(m * n_exp, n_exp), k, false);
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t e = r.indices[j];
      selected[m * k + j] = m * n_exp + e;
      rows[e].push_back(m);
      slots[e].push_back(m * k + j);
    }
  }
  if (stats) {
    stats->counts.resize(n_exp, 0);
    stats->tokens += tokens;
    for (std::size_t e = 0; e < n_exp; ++e) stats->counts[e] += rows[e].size();
  }

  Tensor gates = reshape(take(probs, selected), {tokens, k});
  if (cfg_.renormalize) gates = div(gates, sum(gates, -1, true));
  gates = reshape(gates, {tokens * k});

  Tensor out;
  for (std::size_t e = 0; e < n_exp; ++e) {
    if (rows[e].empty()) continue;
    Tensor xe = gather_rows(flat, rows[e]);
    Tensor ge = reshape(take(gates, slots[e]), {rows[e].size(), 1});
    Tensor ye = scatter_add_rows(mul(experts[e](xe), ge), rows[e], tokens);
    out = out.defined() ? add(out, ye) : ye;
  }
  return reshape(out, x.shape());
}

void MoeLayer::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".router", router.weight});
  for (std::size_t i = 0; i < experts.size(); ++i) {
    experts[i].collect(fmt::format("{}.expert{}", prefix, i), out);
  }
}

std::size_t MoeLayer::total_param_count() const {
  return router_param_count() + experts.size() * expert_param_count();
}

std::size_t MoeLayer::active_param_count() const {
  return router_param_count() + cfg_.top_k * expert_param_count();
}

const char* layer_kind_label(LayerKind kind) {
  switch (kind) {
    case LayerKind::kMamba:
      return "Mamba";
    case LayerKind::kMoeMamba:
      return "MoE_Mamba";
    case LayerKind::kTransformer:
      return "Transformer";
  }
  return "?";
}

MambaLayer::MambaLayer(LayerKind kind, const MambaConfig& mamba, const MoeConfig& moe_cfg,
                       std::uint64_t seed, const std::string& path)
    : mixer(mamba, seed, path + ".ssm"), ffn_norm(mamba.d_model), kind_(kind) {
  if (moe_cfg.d_model != mamba.d_model) throw ConfigError("moe d_model must equal mamba d_model");
  switch (kind) {
    case LayerKind::kMamba: {
      Rng r = Rng::derive(seed, path + ".ffn");
      mlp.emplace(mamba.d_model, moe_cfg.d_ff, r);
      break;
    }
    case LayerKind::kMoeMamba:
      moe.emplace(moe_cfg, seed, path + ".moe");
      break;
    case LayerKind::kTransformer:
      throw ConfigError("MambaLayer cannot be built as a Transformer layer");
  }
}

Tensor MambaLayer::forward(const Tensor& x, MambaState* state, RoutingStats* stats) const {
  Tensor h = mixer.forward(x, state);
  Tensor z = ffn_norm(h);
  return add(h, moe ? moe->forward(z, stats) : (*mlp)(z));
}

void MambaLayer::collect(const std::string& prefix, ParamList& out) const {
  mixer.collect(prefix + ".ssm", out);
  ffn_norm.collect(prefix + ".ffn_norm", out);
  if (moe) {
    moe->collect(prefix + ".moe", out);
  } else {
    mlp->collect(prefix + ".ffn", out);
  }
}

std::size_t MambaLayer::param_count() const {
  ParamList p;
  collect("", p);
  return count_params(p);
}

std::size_t MambaLayer::active_param_count() const {
  const std::size_t total = param_count();
  return moe ? total - moe->total_param_count() + moe->active_param_count() : total;
}

}  // namespace jambatalk
