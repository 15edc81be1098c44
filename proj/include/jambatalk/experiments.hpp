#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "jambatalk/config.hpp"
#include "jambatalk/gradcheck.hpp"

namespace jambatalk {

struct AblationRow {
  std::string label;  // arrangement
  std::vector<std::string> layer_kinds;
  double lve = 0.0;            // mm, test split, autoregressive
  double fdd = 0.0;            // mm
  double epoch_seconds = 0.0;  // mean wall-clock per training epoch
  std::size_t ppe_period = 0;
  std::size_t params = 0;
  bool ok = true;
  std::string error;
};

using LogFn = std::function<void(const std::string&)>;

// Trains and evaluates every arrangement from the same seed and data; only the
// arrangement differs between rows. A failing row is kept with its error.
std::vector<AblationRow> ablate(const RunConfig& base, const Dataset& data, const LogFn& log = {});
std::string ablation_table(const std::vector<AblationRow>& rows);
std::string ablation_json(const std::vector<AblationRow>& rows);

struct BenchmarkRow {
  std::size_t length = 0;
  double tokens_per_second = 0.0;
  std::size_t ssm_state_bytes = 0;
  std::size_t kv_cache_bytes = 0;
};

struct BenchmarkReport {
  std::vector<BenchmarkRow> rows;
  std::size_t total_params = 0;
  std::size_t active_params = 0;
  std::size_t moe_router_params = 0;  // per MoE layer
  std::size_t expert_params = 0;      // per expert
  std::size_t top_k = 0;
  std::size_t n_experts = 0;
  std::size_t moe_layer_total = 0;   // per MoE layer
  std::size_t moe_layer_active = 0;  // per MoE layer
  // head_dim * kv_groups * 2 (k and v) * bytes per element
  std::size_t kv_bytes_per_token = 0;
};

// Incremental decoding over synthetic audio tokens for each length (>= 2 lengths).
BenchmarkReport benchmark(const Model& model, std::span<const std::size_t> lengths);
std::string benchmark_table(const BenchmarkReport& report);
std::string benchmark_json(const BenchmarkReport& report);

// Toy decoder for full-model gradient checks: V = 12, d_model = 16.
ModelConfig toy_model_config(Arrangement arrangement = Arrangement::kMambaMoe);

// Finite-difference check of the teacher-forced loss of `model` on one
// generated sequence. Fills the zero-initialised output head with small random
// values first (a zero head hides every upstream gradient). Checks
// every trainable parameter.
GradCheckResult gradcheck_model(Model& model, std::size_t frames, std::uint64_t seed,
                                std::size_t max_coords_per_tensor = 0);

}  // namespace jambatalk
