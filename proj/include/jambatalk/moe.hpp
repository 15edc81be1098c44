#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "jambatalk/mamba.hpp"
#include "jambatalk/nn.hpp"

namespace jambatalk {

struct MoeConfig {
  std::size_t d_model = 64;
  std::size_t n_experts = 4;
  std::size_t top_k = 2;
  std::size_t d_ff = 256;
  // Off: gates are the full-softmax probabilities of the selected experts.
  // On: the selected gates are rescaled to sum to one.
  bool renormalize = false;
};

struct Routing {
  std::vector<std::size_t> indices;  // descending gate, ties to the lower index
  std::vector<double> gates;
};

// Top-k selection over router logits for one token.
Routing route_logits(std::span<const double> logits, std::size_t k, bool renormalize = false);

// Per-expert selection counts accumulated across forward calls.
struct RoutingStats {
  std::vector<std::size_t> counts;
  std::size_t tokens = 0;
};

class MoeLayer {
 public:
  MoeLayer() = default;
  MoeLayer(const MoeConfig& cfg, std::uint64_t seed, const std::string& path);

  Routing route(const Tensor& x) const;  // x: [d_model]
  // x: [..., d_model]; every position is routed on its own.
  Tensor forward(const Tensor& x, RoutingStats* stats = nullptr) const;

  void collect(const std::string& prefix, ParamList& out) const;
  std::size_t router_param_count() const { return router.param_count(); }
  std::size_t expert_param_count() const { return experts.front().param_count(); }
  std::size_t total_param_count() const;
  // Parameters touched per token: router plus k experts.
  std::size_t active_param_count() const;
  const MoeConfig& config() const { return cfg_; }

  Linear router;  // [d_model, n_experts], no bias
  std::vector<FeedForward> experts;

 private:
  MoeConfig cfg_;
};

enum class LayerKind { kMamba, kMoeMamba, kTransformer };

const char* layer_kind_label(LayerKind kind);

// A Mamba block followed by a pre-normed channel mixer with a residual: a dense
// MLP for kMamba, or a mixture-of-experts layer for kMoeMamba.
class MambaLayer {
 public:
  MambaLayer() = default;
  MambaLayer(LayerKind kind, const MambaConfig& mamba, const MoeConfig& moe, std::uint64_t seed,
             const std::string& path);

  Tensor forward(const Tensor& x, MambaState* state = nullptr, RoutingStats* stats = nullptr) const;

  LayerKind kind() const { return kind_; }
  void collect(const std::string& prefix, ParamList& out) const;
  std::size_t param_count() const;
  std::size_t active_param_count() const;

  MambaBlock mixer;
  RmsNorm ffn_norm;
  std::optional<FeedForward> mlp;
  std::optional<MoeLayer> moe;

 private:
  LayerKind kind_ = LayerKind::kMamba;
};

}  // namespace jambatalk
