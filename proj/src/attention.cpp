#include "jambatalk/attention.hpp"

#include <cmath>

#include <fmt/format.h>

namespace jambatalk {

void AttentionConfig::validate() const {
  if (d_model == 0 || n_query_heads == 0 || n_kv_groups == 0) {
    throw ConfigError("attention: d_model, heads and groups must be positive");
  }
  if (d_model % n_query_heads != 0) {
    throw ConfigError(fmt::format("attention: d_model {} not divisible by {} heads", d_model, n_query_heads));
  }
  if (n_query_heads % n_kv_groups != 0) {
    throw ConfigError(fmt::format("attention: {} query heads not divisible by {} kv groups",
                                  n_query_heads, n_kv_groups));
  }
  if (head_dim() % 2 != 0) {
    throw ConfigError(fmt::format("attention: head_dim {} must be even for RoPE", head_dim()));
  }
}

std::vector<double> rope_thetas(std::size_t head_dim, double base) {
  if (head_dim % 2 != 0) throw ConfigError(fmt::format("RoPE needs an even head_dim, got {}", head_dim));
  std::vector<double> thetas(head_dim / 2);
  for (std::size_t i = 0; i < thetas.size(); ++i) {
    thetas[i] = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
  }
  return thetas;
}

Tensor rope_rotate(const Tensor& x, std::span<const std::size_t> positions, double base) {
  if (x.rank() < 2) throw DimensionError("rope_rotate expects [..., T, head_dim]");
  const std::size_t hd = x.dim(-1);
  const std::size_t steps = x.dim(-2);
  if (positions.size() != steps) {
    throw DimensionError(fmt::format("rope_rotate: {} positions for {} steps", positions.size(), steps));
  }
  const auto thetas = rope_thetas(hd, base);
  const std::size_t half = hd / 2;
  auto cs = std::make_shared<std::vector<double>>(steps * half);
  auto sn = std::make_shared<std::vector<double>>(steps * half);
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t i = 0; i < half; ++i) {
      const double angle = static_cast<double>(positions[t]) * thetas[i];
      (*cs)[t * half + i] = std::cos(angle);
      (*sn)[t * half + i] = std::sin(angle);
    }
  }
  const std::size_t rows = x.numel() / hd;
  auto xv = x.data();
  std::vector<double> values(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t t = r % steps;
    for (std::size_t i = 0; i < half; ++i) {
      const double c = (*cs)[t * half + i];
      const double s = (*sn)[t * half + i];
      const double x0 = xv[r * hd + 2 * i];
      const double x1 = xv[r * hd + 2 * i + 1];
      values[r * hd + 2 * i] = x0 * c - x1 * s;
      values[r * hd + 2 * i + 1] = x0 * s + x1 * c;
    }
  }
  return make_op(x.shape(), std::move(values), {x},
                 [x, cs, sn, rows, steps, half, hd](std::span<const double> g) mutable {
                   auto gx = x.grad_buffer();
                   for (std::size_t r = 0; r < rows; ++r) {
                     const std::size_t t = r % steps;
                     for (std::size_t i = 0; i < half; ++i) {
                       const double c = (*cs)[t * half + i];
                       const double s = (*sn)[t * half + i];
                       const double g0 = g[r * hd + 2 * i];
                       const double g1 = g[r * hd + 2 * i + 1];
                       gx[r * hd + 2 * i] += g0 * c + g1 * s;
                       gx[r * hd + 2 * i + 1] += -g0 * s + g1 * c;
                     }
                   }
                 });
}

Tensor rope_rotate(const Tensor& x, std::size_t position, double base) {
  const std::size_t hd = x.dim(-1);
  const std::size_t rows = x.numel() / hd;
  const std::vector<std::size_t> positions(rows, position);
  return reshape(rope_rotate(reshape(x, {rows, hd}), positions, base), x.shape());
}

bool rope_relative_property_check(std::span<const double> q, std::span<const double> k,
                                  std::size_t m, std::size_t n, std::size_t s, double tol,
                                  double base) {
  if (q.size() != k.size()) throw DimensionError("rope_relative_property_check: q and k differ in size");
  NoGradGuard no_grad;
  const std::size_t hd = q.size();
  const Tensor tq = Tensor::from({hd}, {q.begin(), q.end()});
  const Tensor tk = Tensor::from({hd}, {k.begin(), k.end()});
  auto dot = [](const Tensor& a, const Tensor& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) acc += a.data()[i] * b.data()[i];
    return acc;
  };
  const double lhs = dot(rope_rotate(tq, m, base), rope_rotate(tk, n, base));
  const double rhs = dot(rope_rotate(tq, m + s, base), rope_rotate(tk, n + s, base));
  return std::abs(lhs - rhs) <= tol;
}

Tensor mha_to_gqa_pool(const Tensor& kv_heads, std::size_t n_groups) {
  if (kv_heads.rank() != 2) throw DimensionError("mha_to_gqa_pool expects [n_heads, head_params]");
  const std::size_t heads = kv_heads.dim(0);
  const std::size_t width = kv_heads.dim(1);
  if (n_groups == 0 || heads % n_groups != 0) {
    throw ConfigError(fmt::format("cannot pool {} heads into {} groups", heads, n_groups));
  }
  const std::size_t per_group = heads / n_groups;
  auto src = kv_heads.data();
  std::vector<double> pooled(n_groups * width, 0.0);
  for (std::size_t g = 0; g < n_groups; ++g) {
    for (std::size_t j = 0; j < width; ++j) {
      double acc = 0.0;
      for (std::size_t h = g * per_group; h < (g + 1) * per_group; ++h) acc += src[h * width + j];
      pooled[g * width + j] = acc / static_cast<double>(per_group);
    }
  }
  return Tensor::from({n_groups, width}, std::move(pooled));
}

// ---------------------------------------------------------------------------

KvCache::KvCache(std::size_t batch, std::size_t groups, std::size_t head_dim, std::size_t capacity)
    : batch_(batch), groups_(groups), head_dim_(head_dim), capacity_(capacity) {}

void KvCache::append(const Tensor& k, const Tensor& v) {
  if (k.rank() != 4 || k.dim(0) != batch_ || k.dim(1) != groups_ || k.dim(3) != head_dim_ ||
      v.shape() != k.shape()) {
    throw ContractError(fmt::format("kv cache append: k {} v {} for cache [{}, {}, *, {}]",
                                    shape_str(k.shape()), shape_str(v.shape()), batch_, groups_,
                                    head_dim_));
  }
  const std::size_t steps = k.dim(2);
  if (length_ + steps > capacity_) {
    throw ContractError(fmt::format("kv cache position overflow: {} + {} > capacity {}", length_,
                                    steps, capacity_));
  }
  auto kv = k.data();
  auto vv = v.data();
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t b = 0; b < batch_; ++b) {
      for (std::size_t g = 0; g < groups_; ++g) {
        const std::size_t src = ((b * groups_ + g) * steps + t) * head_dim_;
        keys_.insert(keys_.end(), kv.begin() + static_cast<std::ptrdiff_t>(src),
                     kv.begin() + static_cast<std::ptrdiff_t>(src + head_dim_));
        values_.insert(values_.end(), vv.begin() + static_cast<std::ptrdiff_t>(src),
                       vv.begin() + static_cast<std::ptrdiff_t>(src + head_dim_));
      }
    }
  }
  length_ += steps;
}

Tensor KvCache::gather(const std::vector<double>& store) const {
  std::vector<double> out(store.size());
  for (std::size_t t = 0; t < length_; ++t) {
    for (std::size_t b = 0; b < batch_; ++b) {
      for (std::size_t g = 0; g < groups_; ++g) {
        const std::size_t src = ((t * batch_ + b) * groups_ + g) * head_dim_;
        const std::size_t dst = ((b * groups_ + g) * length_ + t) * head_dim_;
        std::copy_n(store.begin() + static_cast<std::ptrdiff_t>(src), head_dim_,
                    out.begin() + static_cast<std::ptrdiff_t>(dst));
      }
    }
  }
  return Tensor::from({batch_, groups_, length_, head_dim_}, std::move(out));
}

Tensor KvCache::keys() const { return gather(keys_); }
Tensor KvCache::values() const { return gather(values_); }

// ---------------------------------------------------------------------------

TransformerBlock::TransformerBlock(const AttentionConfig& cfg, std::uint64_t seed,
                                   const std::string& path)
    : cfg_(cfg) {
  cfg.validate();
  const std::size_t d = cfg.d_model;
  const std::size_t hd = cfg.head_dim();
  attn_norm = RmsNorm(d);
  Rng rq = Rng::derive(seed, path + ".attn.q");
  wq = Linear(d, cfg.n_query_heads * hd, false, rq);
  Rng rk = Rng::derive(seed, path + ".attn.k");
  wk = Linear(d, cfg.n_kv_groups * hd, false, rk);
  Rng rv = Rng::derive(seed, path + ".attn.v");
  wv = Linear(d, cfg.n_kv_groups * hd, false, rv);
  Rng ro = Rng::derive(seed, path + ".attn.o");
  wo = Linear(cfg.n_query_heads * hd, d, false, ro);
  ffn_norm = RmsNorm(d);
  Rng rf = Rng::derive(seed, path + ".ffn");
  ffn = FeedForward(d, cfg.d_ff, rf);
}

Tensor TransformerBlock::forward(const Tensor& x, KvCache* cache, AttentionTrace* trace) const {
  if (x.rank() != 3 || x.dim(2) != cfg_.d_model) {
    throw DimensionError("transformer forward expects [batch, T, d_model], got " + shape_str(x.shape()));
  }
  const std::size_t batch = x.dim(0);
  const std::size_t steps = x.dim(1);
  const std::size_t heads = cfg_.n_query_heads;
  const std::size_t groups = cfg_.n_kv_groups;
  const std::size_t hd = cfg_.head_dim();
  const std::size_t offset = cache ? cache->length() : 0;
  if (cache && cache->length() + steps > cache->capacity()) {
    throw ContractError(fmt::format("kv cache position overflow: {} + {} > capacity {}",
                                    cache->length(), steps, cache->capacity()));
  }

  Tensor h = attn_norm(x);
  Tensor q = transpose(reshape(wq(h), {batch, steps, heads, hd}), 1, 2);
  Tensor k = transpose(reshape(wk(h), {batch, steps, groups, hd}), 1, 2);
  Tensor v = transpose(reshape(wv(h), {batch, steps, groups, hd}), 1, 2);
  if (cfg_.use_rope) {
    std::vector<std::size_t> positions(steps);
    for (std::size_t t = 0; t < steps; ++t) positions[t] = offset + t;
    q = rope_rotate(q, positions, cfg_.rope_base);
    k = rope_rotate(k, positions, cfg_.rope_base);
  }

  Tensor keys = k;
  Tensor vals = v;
  if (cache) {
    if (cache->length() > 0) {
      keys = concat({cache->keys(), k}, 2);
      vals = concat({cache->values(), v}, 2);
    }
    cache->append(k, v);
  }
  const std::size_t span = offset + steps;
  const std::size_t share = heads / groups;
  Tensor kr = repeat_interleave(keys, 1, share);
  Tensor vr = repeat_interleave(vals, 1, share);

  Tensor scores = mul_scalar(matmul(q, transpose(kr, -1, -2)), 1.0 / std::sqrt(static_cast<double>(hd)));
  if (cfg_.causal && steps > 1) {
    std::vector<double> mask(steps * span, 0.0);
    for (std::size_t i = 0; i < steps; ++i) {
      for (std::size_t j = offset + i + 1; j < span; ++j) mask[i * span + j] = -INFINITY;
    }
    scores = add(scores, Tensor::from({steps, span}, std::move(mask)));
  }
  Tensor weights = softmax(scores, -1);
  if (trace) trace->weights = weights;
  Tensor attended = reshape(transpose(matmul(weights, vr), 1, 2), {batch, steps, heads * hd});
  Tensor a = add(x, wo(attended));
  return add(a, ffn(ffn_norm(a)));
}

TransformerBlock TransformerBlock::with_pooled_kv(std::size_t n_groups) const {
  AttentionConfig cfg = cfg_;
  cfg.n_kv_groups = n_groups;
  cfg.validate();
  if (n_groups > cfg_.n_kv_groups || cfg_.n_kv_groups % n_groups != 0) {
    throw ConfigError(fmt::format("cannot pool {} kv heads into {} groups", cfg_.n_kv_groups, n_groups));
  }
  TransformerBlock out = *this;
  out.cfg_ = cfg;
  const std::size_t d = cfg_.d_model;
  const std::size_t hd = cfg_.head_dim();
  const std::size_t src_heads = cfg_.n_kv_groups;
  auto pool = [&](const Linear& src) {
    // [d, heads * hd] -> per-head rows [heads, d * hd]
    auto w = src.weight.data();
    std::vector<double> per_head(src_heads * d * hd);
    for (std::size_t h = 0; h < src_heads; ++h) {
      for (std::size_t r = 0; r < d; ++r) {
        for (std::size_t j = 0; j < hd; ++j) {
          per_head[(h * d + r) * hd + j] = w[r * src_heads * hd + h * hd + j];
        }
      }
    }
    Tensor pooled = mha_to_gqa_pool(Tensor::from({src_heads, d * hd}, std::move(per_head)), n_groups);
    auto p = pooled.data();
    std::vector<double> merged(d * n_groups * hd);
    for (std::size_t g = 0; g < n_groups; ++g) {
      for (std::size_t r = 0; r < d; ++r) {
        for (std::size_t j = 0; j < hd; ++j) merged[r * n_groups * hd + g * hd + j] = p[(g * d + r) * hd + j];
      }
    }
    Linear result;
    result.weight = Tensor::from({d, n_groups * hd}, std::move(merged), true);
    return result;
  };
  out.wk = pool(wk);
  out.wv = pool(wv);
  return out;
}

KvCache TransformerBlock::make_cache(std::size_t batch, std::size_t capacity) const {
  return KvCache(batch, cfg_.n_kv_groups, cfg_.head_dim(), capacity);
}

void TransformerBlock::collect(const std::string& prefix, ParamList& out) const {
  attn_norm.collect(prefix + ".attn.norm", out);
  wq.collect(prefix + ".attn.q", out);
  wk.collect(prefix + ".attn.k", out);
  wv.collect(prefix + ".attn.v", out);
  wo.collect(prefix + ".attn.o", out);
  ffn_norm.collect(prefix + ".ffn.norm", out);
  ffn.collect(prefix + ".ffn", out);
}

}  // namespace jambatalk
