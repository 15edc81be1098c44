#include "jambatalk/experiments.hpp"

#include <chrono>

#include <fmt/format.h>
#include <json.hpp>

namespace jambatalk {

std::vector<AblationRow> ablate(const RunConfig& base, const Dataset& data, const LogFn& log) {
  std::vector<AblationRow> rows;
  for (auto arrangement : all_arrangements()) {
    AblationRow row;
    row.label = arrangement_label(arrangement);
    RunConfig cfg = base;
    cfg.model.decoder.arrangement = arrangement;
    row.ppe_period = cfg.model.decoder.ppe_period;
    try {
      cfg.sync();
      Model model(fit_model_to_data(cfg.model, data), cfg.seed);
      for (auto k : model.decoder.layer_kinds()) row.layer_kinds.emplace_back(layer_kind_label(k));
      row.params = model.decoder.param_count();
      TrainConfig tc = cfg.train;
      tc.loss_csv.clear();
      const TrainResult result = train(model, data, tc);
      double total = 0.0;
      for (const auto& e : result.epochs) total += e.seconds;
      row.epoch_seconds = total / static_cast<double>(result.epochs.size());
      const EvalReport report = evaluate(model, data, Split::kTest, data.mask);
      row.lve = report.mean_lve;
      row.fdd = report.mean_fdd;
    } catch (const std::exception& e) {
      row.ok = false;
      row.error = e.what();
    }
    if (log) {
      log(row.ok ? fmt::format("{}: LVE {:.4f} FDD {:.4f} ({:.3f} s/epoch)", row.label, row.lve * kLveScale,
                               row.fdd * kFddScale, row.epoch_seconds)
                 : fmt::format("{}: failed: {}", row.label, row.error));
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string ablation_table(const std::vector<AblationRow>& rows) {
  std::string out = fmt::format("{:<10}  {:>14}  {:>14}  {:>26}  {:>3}\n", "Decoder", "LVE (x1e-3 mm)",
                                "FDD (x1e-5 mm)", "Training Time (per epoch)", "p");
  for (const auto& r : rows) {
    if (!r.ok) {
      out += fmt::format("{:<10}  FAILED: {}\n", r.label, r.error);
      continue;
    }
    out += fmt::format("{:<10}  {:>14.4f}  {:>14.4f}  {:>24.3f} s  {:>3}\n", r.label, r.lve * kLveScale,
                       r.fdd * kFddScale, r.epoch_seconds, r.ppe_period);
  }
  return out;
}

std::string ablation_json(const std::vector<AblationRow>& rows) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json j = {{"arrangement", r.label},
                        {"layers", r.layer_kinds},
                        {"LVE", r.lve * kLveScale},
                        {"LVE_units", "1e-3 mm"},
                        {"FDD", r.fdd * kFddScale},
                        {"FDD_units", "1e-5 mm"},
                        {"training_time_per_epoch_s", r.epoch_seconds},
                        {"ppe_period", r.ppe_period},
                        {"params", r.params},
                        {"ok", r.ok}};
    if (!r.ok) j["error"] = r.error;
    arr.push_back(j);
  }
  return arr.dump(2);
}

BenchmarkReport benchmark(const Model& model, std::span<const std::size_t> lengths) {
  if (lengths.size() < 2) throw ConfigError("benchmark needs at least two sequence lengths");
  const Decoder& dec = model.decoder;
  const auto& cfg = dec.config();
  BenchmarkReport rep;
  rep.total_params = dec.param_count();
  rep.active_params = dec.active_param_count();
  rep.top_k = cfg.moe.top_k;
  rep.n_experts = cfg.moe.n_experts;
  for (const auto* side : {&dec.left, &dec.right}) {
    for (const auto& layer : *side) {
      if (layer.moe) {
        rep.moe_router_params = layer.moe->router_param_count();
        rep.expert_params = layer.moe->expert_param_count();
        rep.moe_layer_total = layer.moe->total_param_count();
        rep.moe_layer_active = layer.moe->active_param_count();
      }
    }
  }
  rep.kv_bytes_per_token = cfg.attention.head_dim() * cfg.attention.n_kv_groups * 2 * sizeof(double);

  for (std::size_t len : lengths) {
    if (len == 0) throw ConfigError("benchmark lengths must be positive");
    if (len > cfg.max_frames) {
      throw ConfigError(fmt::format("benchmark length {} exceeds model.max_frames = {}", len, cfg.max_frames));
    }
    Rng rng = Rng::derive(0, fmt::format("benchmark.audio.{}", len));
    std::vector<double> audio(len * cfg.d_model);
    for (auto& v : audio) v = rng.normal(0.0, 0.5);
    DecodeSession session = dec.start_session(Tensor::from({len, cfg.d_model}, std::move(audio)), 0);
    const auto start = std::chrono::steady_clock::now();
    while (dec.decode_step(session)) {
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    rep.rows.push_back({len, static_cast<double>(len) / secs, session.ssm_state_bytes(), session.kv_cache_bytes()});
  }
  return rep;
}

std::string benchmark_table(const BenchmarkReport& r) {
  std::string out = fmt::format("{:>8}  {:>12}  {:>16}  {:>16}\n", "length", "tokens/s", "ssm state bytes",
                                "kv cache bytes");
  for (const auto& row : r.rows) {
    out += fmt::format("{:>8}  {:>12.1f}  {:>16}  {:>16}\n", row.length, row.tokens_per_second,
                       row.ssm_state_bytes, row.kv_cache_bytes);
  }
  out += fmt::format("parameters: {} total, {} active per token\n", r.total_params, r.active_params);
  if (r.moe_layer_total) {
    out += fmt::format("MoE layer: {} total, {} active (router {} + {} x expert {})\n", r.moe_layer_total,
                       r.moe_layer_active, r.moe_router_params, r.top_k, r.expert_params);
  }
  return out;
}

std::string benchmark_json(const BenchmarkReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) {
    rows.push_back({{"length", row.length},
                    {"tokens_per_second", row.tokens_per_second},
                    {"ssm_state_bytes", row.ssm_state_bytes},
                    {"kv_cache_bytes", row.kv_cache_bytes}});
  }
  nlohmann::json j = {{"rows", rows},
                      {"total_params", r.total_params},
                      {"active_params", r.active_params},
                      {"moe_layer_total_params", r.moe_layer_total},
                      {"moe_layer_active_params", r.moe_layer_active},
                      {"moe_router_params", r.moe_router_params},
                      {"expert_params", r.expert_params},
                      {"top_k", r.top_k},
                      {"kv_bytes_per_token", r.kv_bytes_per_token}};
  return j.dump(2);
}

ModelConfig toy_model_config(Arrangement arrangement) {
  ModelConfig mc;
  mc.decoder.arrangement = arrangement;
  mc.decoder.d_model = 16;
  mc.decoder.vertex_count = 12;
  mc.decoder.n_subjects = 2;
  mc.decoder.mamba.state_dim = 4;
  mc.decoder.moe.n_experts = 4;
  mc.decoder.moe.top_k = 2;
  mc.decoder.moe.d_ff = 16;
  mc.decoder.attention.n_query_heads = 4;
  mc.decoder.attention.n_kv_groups = 2;
  mc.decoder.attention.d_ff = 16;
  mc.decoder.max_frames = 64;
  mc.audio.feature_dim = 8;
  mc.sync();
  return mc;
}

GradCheckResult gradcheck_model(Model& model, std::size_t frames, std::uint64_t seed,
                                std::size_t max_coords_per_tensor) {
  const auto& dc = model.decoder.config();
  SynthConfig sc;
  sc.n_subjects = 1;
  sc.n_sentences = 1;
  sc.frames = frames;
  sc.vertices = dc.vertex_count;
  sc.feature_dim = model.config().audio.feature_dim;
  sc.latent_dim = 3;
  sc.seed = seed;
  const Dataset data = synth_dataset(sc);
  const DatasetRecord& rec = data.records.front();
  ParamList params;
  model.collect_trainable(params);
  Rng rng = Rng::derive(seed, "gradcheck.head");
  for (auto& w : model.decoder.head.weight.mutable_data()) w = rng.uniform(-0.3, 0.3);
  return finite_diff_check_params([&] { return record_loss(model, rec); }, params, 1e-5, max_coords_per_tensor);
}

}  // namespace jambatalk
