#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "jambatalk/nn.hpp"
#include "jambatalk/tensor.hpp"

namespace jambatalk {

struct AttentionConfig {
  std::size_t d_model = 64;
  std::size_t n_query_heads = 4;
  std::size_t n_kv_groups = 2;
  std::size_t d_ff = 256;
  double rope_base = 10000.0;
  bool use_rope = true;
  bool causal = true;

  std::size_t head_dim() const { return d_model / n_query_heads; }
  // Throws ConfigError unless heads divide d_model, groups divide heads and
  // head_dim is even.
  void validate() const;
};

// theta_i = base^(-2(i-1)/head_dim), i = 1..head_dim/2.
std::vector<double> rope_thetas(std::size_t head_dim, double base = 10000.0);

// Rotates consecutive pairs (x[2i], x[2i+1]) by position * theta_i.
// x: [..., T, head_dim] with positions.size() == T.
Tensor rope_rotate(const Tensor& x, std::span<const std::size_t> positions, double base = 10000.0);
// Every head_dim-sized row of x rotated to the same position.
Tensor rope_rotate(const Tensor& x, std::size_t position, double base = 10000.0);

// <rope(q, m), rope(k, n)> == <rope(q, m + s), rope(k, n + s)> within tol.
bool rope_relative_property_check(std::span<const double> q, std::span<const double> k,
                                  std::size_t m, std::size_t n, std::size_t s,
                                  double tol = 1e-9, double base = 10000.0);

// Mean of each group's member heads: [n_heads, P] -> [n_groups, P]. Group g
// holds heads g*r .. g*r + r - 1 with r = n_heads / n_groups.
Tensor mha_to_gqa_pool(const Tensor& kv_heads, std::size_t n_groups);

// Keys/values of past positions for one decode session (RoPE already applied).
class KvCache {
 public:
  KvCache() = default;
  KvCache(std::size_t batch, std::size_t groups, std::size_t head_dim, std::size_t capacity);

  std::size_t length() const { return length_; }
  std::size_t capacity() const { return capacity_; }
  std::size_t bytes() const { return (keys_.size() + values_.size()) * sizeof(double); }

  // k, v: [batch, groups, T, head_dim]. Throws ContractError past capacity.
  void append(const Tensor& k, const Tensor& v);
  // [batch, groups, length, head_dim]
  Tensor keys() const;
  Tensor values() const;

 private:
  Tensor gather(const std::vector<double>& store) const;

  std::size_t batch_ = 0;
  std::size_t groups_ = 0;
  std::size_t head_dim_ = 0;
  std::size_t capacity_ = 0;
  std::size_t length_ = 0;
  // Position-major: [length, batch, groups, head_dim].
  std::vector<double> keys_;
  std::vector<double> values_;
};

struct AttentionTrace {
  Tensor weights;  // [batch, heads, T, S]
};

// Pre-norm block: x + attn(norm x), then + ffn(norm .). Grouped-query
// attention with RoPE on q and k and a causal mask.
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(const AttentionConfig& cfg, std::uint64_t seed, const std::string& path);

  // x: [batch, T, d_model]. With a cache, positions continue from
  // cache->length() and the new keys/values are appended.
  Tensor forward(const Tensor& x, KvCache* cache = nullptr, AttentionTrace* trace = nullptr) const;

  // Same block with k/v projections mean-pooled into n_groups groups. The
  // other parameters are shared with this block, not copied.
  TransformerBlock with_pooled_kv(std::size_t n_groups) const;

  KvCache make_cache(std::size_t batch, std::size_t capacity) const;
  void collect(const std::string& prefix, ParamList& out) const;
  std::size_t kv_param_count() const { return wk.param_count() + wv.param_count(); }
  const AttentionConfig& config() const { return cfg_; }

  RmsNorm attn_norm;
  Linear wq;  // [d_model, heads * head_dim]
  Linear wk;  // [d_model, groups * head_dim]
  Linear wv;
  Linear wo;
  RmsNorm ffn_norm;
  FeedForward ffn;

 private:
  AttentionConfig cfg_;
};

}  // namespace jambatalk
