#include "jambatalk/decoder.hpp"

#include <cmath>

#include <fmt/format.h>

namespace jambatalk {

Arrangement parse_arrangement(const std::string& label) {
  for (auto a : all_arrangements()) {
    if (label == arrangement_label(a)) return a;
  }
  throw ConfigError(fmt::format("unknown arrangement '{}' (expected M-MoE, MoE-MoE, M-M or MoE-M)", label));
}

const char* arrangement_label(Arrangement a) {
  switch (a) {
    case Arrangement::kMambaMoe:
      return "M-MoE";
    case Arrangement::kMoeMoe:
      return "MoE-MoE";
    case Arrangement::kMambaMamba:
      return "M-M";
    case Arrangement::kMoeMamba:
      return "MoE-M";
  }
  return "?";
}

const std::vector<Arrangement>& all_arrangements() {
  static const std::vector<Arrangement> all{Arrangement::kMambaMoe, Arrangement::kMoeMoe,
                                            Arrangement::kMambaMamba, Arrangement::kMoeMamba};
  return all;
}

std::vector<LayerKind> arrangement_kinds(Arrangement a, std::size_t layers_per_side) {
  const bool left_moe = a == Arrangement::kMoeMoe || a == Arrangement::kMoeMamba;
  const bool right_moe = a == Arrangement::kMambaMoe || a == Arrangement::kMoeMoe;
  auto side = [&](bool first_moe, std::vector<LayerKind>& out) {
    for (std::size_t i = 0; i < layers_per_side; ++i) {
      const bool moe = (i % 2 == 0) ? first_moe : !first_moe;
      out.push_back(moe ? LayerKind::kMoeMamba : LayerKind::kMamba);
    }
  };
  std::vector<LayerKind> kinds;
  side(left_moe, kinds);
  kinds.push_back(LayerKind::kTransformer);
  side(right_moe, kinds);
  return kinds;
}

void DecoderConfig::sync() {
  mamba.d_model = d_model;
  moe.d_model = d_model;
  attention.d_model = d_model;
}

void DecoderConfig::validate() const {
  if (d_model == 0) throw ConfigError("decoder: d_model must be positive");
  if (layers_per_side == 0) throw ConfigError("decoder: layers_per_side must be positive");
  if (ppe_period == 0) throw ConfigError("decoder: ppe_period must be positive");
  if (n_subjects == 0) throw ConfigError("decoder: n_subjects must be positive");
  if (vertex_count == 0) throw ConfigError("decoder: vertex_count must be positive");
  if (max_frames == 0) throw ConfigError("decoder: max_frames must be positive");
  if (mamba.d_model != d_model || moe.d_model != d_model || attention.d_model != d_model) {
    throw ConfigError("decoder: sub-block d_model differs from decoder d_model");
  }
  if (mamba.state_dim == 0 || mamba.expand == 0 || mamba.conv_width == 0) {
    throw ConfigError("mamba: state_dim, expand and conv_width must be positive");
  }
  if (!(mamba.dt_min > 0.0 && mamba.dt_min <= mamba.dt_max)) {
    throw ConfigError("mamba: need 0 < dt_min <= dt_max");
  }
  if (moe.n_experts == 0 || moe.top_k < 1 || moe.top_k > moe.n_experts) {
    throw ConfigError(fmt::format("moe: top_k = {} must lie in [1, n_experts = {}]", moe.top_k, moe.n_experts));
  }
  attention.validate();
}

std::vector<double> periodic_position(std::size_t t, std::size_t period, std::size_t d_model) {
  const double pos = static_cast<double>(t % period);
  std::vector<double> pe(d_model);
  for (std::size_t i = 0; i < d_model; ++i) {
    const double freq = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(d_model));
    pe[i] = (i % 2 == 0) ? std::sin(pos * freq) : std::cos(pos * freq);
  }
  return pe;
}

std::size_t DecodeSession::ssm_state_bytes() const {
  std::size_t total = 0;
  for (const auto& s : states) total += s.bytes();
  return total;
}

Decoder::Decoder(DecoderConfig cfg, std::uint64_t seed, const std::string& path)
    : cfg_(std::move(cfg)), path_(path) {
  cfg_.validate();
  const std::size_t d = cfg_.d_model;
  const std::size_t out = cfg_.vertex_count * 3;
  Rng r_in = Rng::derive(seed, path + ".motion_in");
  motion_in = Linear(out, d, true, r_in);
  Rng r_style = Rng::derive(seed, path + ".style");
  std::vector<double> sv(cfg_.n_subjects * d);
  for (auto& v : sv) v = r_style.uniform(-0.1, 0.1);
  style = Tensor::from({cfg_.n_subjects, d}, std::move(sv), true);

  const auto kinds = layer_kinds();
  const std::size_t L = cfg_.layers_per_side;
  for (std::size_t i = 0; i < kinds.size(); ++i) {
    const std::string lp = fmt::format("{}.layer{}", path, i);
    if (kinds[i] == LayerKind::kTransformer) {
      center = TransformerBlock(cfg_.attention, seed, lp);
    } else {
      (i < L ? left : right).emplace_back(kinds[i], cfg_.mamba, cfg_.moe, seed, lp);
    }
  }
  final_norm = RmsNorm(d);
  Rng r_head = Rng::derive(seed, path + ".head");
  head = Linear(d, out, true, r_head);
  zero_params({{"w", head.weight}, {"b", head.bias}});
}

std::vector<LayerKind> Decoder::layer_kinds() const {
  return arrangement_kinds(cfg_.arrangement, cfg_.layers_per_side);
}

std::vector<std::string> Decoder::layer_labels() const {
  std::vector<std::string> labels;
  for (auto k : layer_kinds()) labels.emplace_back(layer_kind_label(k));
  return labels;
}

void Decoder::check_subject(std::size_t subject) const {
  if (subject >= cfg_.n_subjects) {
    throw ContractError(fmt::format("unknown subject id {} ({} subjects)", subject, cfg_.n_subjects));
  }
}

Tensor Decoder::embed_sequence(const Tensor& prev_frames, std::size_t subject, std::size_t t0) const {
  check_subject(subject);
  const std::size_t vd = cfg_.vertex_count * 3;
  if (prev_frames.numel() % vd != 0 || prev_frames.numel() == 0) {
    throw DimensionError(fmt::format("motion input {} does not hold whole frames of {} values",
                                     shape_str(prev_frames.shape()), vd));
  }
  const std::size_t T = prev_frames.numel() / vd;
  const std::size_t d = cfg_.d_model;
  const std::size_t row[] = {subject};
  Tensor h = add(motion_in(reshape(prev_frames, {T, vd})), gather_rows(style, row));
  if (cfg_.use_ppe) {
    std::vector<double> pe(T * d);
    for (std::size_t i = 0; i < T; ++i) {
      const auto p = periodic_position(t0 + i, cfg_.ppe_period, d);
      std::copy(p.begin(), p.end(), pe.begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    h = add(h, Tensor::from({T, d}, std::move(pe)));
  }
  return h;
}

Tensor Decoder::embed_motion(const Tensor& prev_motion, std::size_t subject, std::size_t t) const {
  return reshape(embed_sequence(prev_motion, subject, t), {cfg_.d_model});
}

Tensor Decoder::fuse_audio(const Tensor& motion_tokens, const Tensor& audio_tokens) {
  if (motion_tokens.shape() != audio_tokens.shape()) {
    throw ContractError(fmt::format("fuse_audio: motion tokens {} vs audio tokens {}",
                                    shape_str(motion_tokens.shape()), shape_str(audio_tokens.shape())));
  }
  return add(motion_tokens, audio_tokens);
}

Tensor Decoder::forward_tokens(const Tensor& tokens, DecodeSession* session,
                               std::vector<RoutingStats>* stats) const {
  const std::size_t d = cfg_.d_model;
  if (tokens.rank() != 2 || tokens.dim(1) != d) {
    throw DimensionError(fmt::format("decoder tokens must be [T, {}], got {}", d, shape_str(tokens.shape())));
  }
  const std::size_t T = tokens.dim(0);
  const std::size_t L = cfg_.layers_per_side;
  if (stats) stats->resize(2 * L + 1);
  Tensor h = reshape(tokens, {1, T, d});
  for (std::size_t i = 0; i < L; ++i) {
    h = left[i].forward(h, session ? &session->states[i] : nullptr, stats ? &(*stats)[i] : nullptr);
  }
  h = center.forward(h, session ? &session->cache : nullptr);
  for (std::size_t i = 0; i < L; ++i) {
    h = right[i].forward(h, session ? &session->states[L + i] : nullptr,
                         stats ? &(*stats)[L + 1 + i] : nullptr);
  }
  return reshape(head(final_norm(h)), {T, cfg_.vertex_count * 3});
}

Tensor Decoder::teacher_forced(const Tensor& gt, const Tensor& audio, std::size_t subject,
                               std::vector<RoutingStats>* stats) const {
  const std::size_t vd = cfg_.vertex_count * 3;
  if (gt.rank() != 2 || gt.dim(1) != vd) {
    throw DimensionError(fmt::format("ground truth must be [T, {}], got {}", vd, shape_str(gt.shape())));
  }
  const std::size_t T = gt.dim(0);
  if (T == 0) throw ContractError("teacher_forced: empty sequence");
  Tensor prev = Tensor::zeros({1, vd});
  if (T > 1) prev = concat({prev, slice(gt, 0, 0, T - 1)}, 0);
  return forward_tokens(fuse_audio(embed_sequence(prev, subject), audio), nullptr, stats);
}

DecodeSession Decoder::start_session(const Tensor& audio, std::size_t subject) const {
  check_subject(subject);
  if (audio.rank() != 2 || audio.dim(1) != cfg_.d_model) {
    throw DimensionError(fmt::format("session audio must be [T, {}], got {}", cfg_.d_model,
                                     shape_str(audio.shape())));
  }
  DecodeSession s;
  s.subject = subject;
  s.audio = audio.detach();
  s.prev.assign(cfg_.vertex_count * 3, 0.0);
  for (std::size_t i = 0; i < 2 * cfg_.layers_per_side; ++i) s.states.push_back(MambaState::zeros(cfg_.mamba, 1));
  s.cache = center.make_cache(1, cfg_.max_frames);
  return s;
}

std::optional<std::vector<double>> Decoder::decode_step(DecodeSession& session) const {
  if (session.t >= session.audio.dim(0)) return std::nullopt;
  NoGradGuard no_grad;
  const Tensor prev = Tensor::from({1, cfg_.vertex_count * 3}, session.prev);
  const Tensor token = fuse_audio(embed_sequence(prev, session.subject, session.t),
                                  slice(session.audio, 0, session.t, 1));
  std::vector<double> frame = forward_tokens(token, &session).to_vector();
  session.prev = frame;
  ++session.t;
  return frame;
}

MotionSequence Decoder::generate(const Tensor& audio, std::size_t subject, std::size_t frames,
                                 double fps) const {
  if (frames == 0) throw ContractError("generate: frame count must be positive");
  if (audio.rank() != 2 || audio.dim(0) < frames) {
    throw ContractError(fmt::format("generate: {} frames requested but audio has shape {}", frames,
                                    shape_str(audio.shape())));
  }
  DecodeSession session = start_session(slice(audio, 0, 0, frames).detach(), subject);
  MotionSequence out = MotionSequence::zeros(frames, cfg_.vertex_count, fps);
  for (std::size_t t = 0; t < frames; ++t) {
    auto frame = decode_step(session);
    std::copy(frame->begin(), frame->end(), out.frame(t).begin());
  }
  return out;
}

void Decoder::collect(const std::string& prefix, ParamList& out) const {
  motion_in.collect(prefix + ".motion_in", out);
  out.push_back({prefix + ".style", style});
  const std::size_t L = cfg_.layers_per_side;
  for (std::size_t i = 0; i < L; ++i) left[i].collect(fmt::format("{}.layer{}", prefix, i), out);
  center.collect(fmt::format("{}.layer{}", prefix, L), out);
  for (std::size_t i = 0; i < L; ++i) right[i].collect(fmt::format("{}.layer{}", prefix, L + 1 + i), out);
  final_norm.collect(prefix + ".final_norm", out);
  head.collect(prefix + ".head", out);
}

std::size_t Decoder::param_count() const {
  ParamList p;
  collect(p);
  return count_params(p);
}

std::size_t Decoder::active_param_count() const {
  std::size_t inactive = 0;
  for (const auto* side : {&left, &right}) {
    for (const auto& layer : *side) inactive += layer.param_count() - layer.active_param_count();
  }
  return param_count() - inactive;
}

// ---------------------------------------------------------------------------

void ModelConfig::sync() {
  decoder.sync();
  audio.d_model = decoder.d_model;
}

void ModelConfig::validate() const {
  decoder.validate();
  if (audio.d_model != decoder.d_model) throw ConfigError("audio d_model differs from decoder d_model");
  if (!(fps > 0.0)) throw ConfigError("fps must be positive");
}

Model::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  frontend = AudioFrontend(cfg_.audio, seed, "audio");
  decoder = Decoder(cfg_.decoder, seed, "decoder");
}

Tensor Model::audio_tokens(const SpeechFeatures& feats, std::size_t frames) const {
  return frontend.encode(feats, frames);
}

SpeechFeatures Model::features_from_waveform(const Waveform& wave) const {
  return frontend.extract_features(std::span<const double>(wave.samples), wave.sample_rate);
}

Tensor Model::teacher_forced(const Tensor& gt, const SpeechFeatures& feats, std::size_t subject,
                             std::vector<RoutingStats>* stats) const {
  return decoder.teacher_forced(gt, audio_tokens(feats, gt.dim(0)), subject, stats);
}

MotionSequence Model::generate(const SpeechFeatures& feats, std::size_t subject, std::size_t frames) const {
  if (frames == 0) throw ContractError("generate: frame count must be positive");
  NoGradGuard no_grad;
  return decoder.generate(audio_tokens(feats, frames), subject, frames, cfg_.fps);
}

void Model::collect(ParamList& out) const {
  frontend.collect("audio", out);
  decoder.collect(out);
}

void Model::collect_trainable(ParamList& out) const {
  frontend.collect_trainable("audio", out);
  decoder.collect(out);
}

}  // namespace jambatalk
