#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "jambatalk/attention.hpp"
#include "jambatalk/audio.hpp"
#include "jambatalk/mamba.hpp"
#include "jambatalk/moe.hpp"
#include "jambatalk/motion.hpp"
#include "jambatalk/nn.hpp"

namespace jambatalk {

// Which kind opens each side of the central Transformer layer.
enum class Arrangement { kMambaMoe, kMoeMoe, kMambaMamba, kMoeMamba };

// "M-MoE", "MoE-MoE", "M-M", "MoE-M"; anything else is a ConfigError.
Arrangement parse_arrangement(const std::string& label);
const char* arrangement_label(Arrangement a);
const std::vector<Arrangement>& all_arrangements();

// Layer kinds in processing order: left side, Transformer, right side. Each
// side starts with the kind named by the arrangement and then alternates.
std::vector<LayerKind> arrangement_kinds(Arrangement a, std::size_t layers_per_side);

struct DecoderConfig {
  Arrangement arrangement = Arrangement::kMambaMoe;
  std::size_t d_model = 64;
  std::size_t layers_per_side = 3;
  std::size_t ppe_period = 30;
  bool use_ppe = true;
  std::size_t n_subjects = 2;
  std::size_t vertex_count = 240;
  std::size_t max_frames = 8192;  // KV cache capacity for one decode session
  MambaConfig mamba;
  MoeConfig moe;
  AttentionConfig attention;

  // Copies d_model into the sub-block configs.
  void sync();
  // Throws ConfigError.
  void validate() const;
};

// Sinusoidal encoding of (t mod period): [d_model].
std::vector<double> periodic_position(std::size_t t, std::size_t period, std::size_t d_model);

struct DecodeSession {
  std::size_t subject = 0;
  std::size_t t = 0;
  Tensor audio;              // [T, d_model], already projected
  std::vector<double> prev;  // last emitted frame, [V * 3]
  std::vector<MambaState> states;  // one per Mamba-family layer, stack order
  KvCache cache;

  std::size_t ssm_state_bytes() const;
  std::size_t kv_cache_bytes() const { return cache.bytes(); }
};

class Decoder {
 public:
  Decoder() = default;
  Decoder(DecoderConfig cfg, std::uint64_t seed, const std::string& path = "decoder");

  // prev_motion: [V * 3] (or [V, 3]); returns [d_model].
  Tensor embed_motion(const Tensor& prev_motion, std::size_t subject, std::size_t t) const;
  // prev_frames: [T, V * 3], frame i sits at time t0 + i. Returns [T, d_model].
  Tensor embed_sequence(const Tensor& prev_frames, std::size_t subject, std::size_t t0 = 0) const;
  // Frame-aligned addition; ContractError on a length mismatch.
  static Tensor fuse_audio(const Tensor& motion_tokens, const Tensor& audio_tokens);

  // tokens: [T, d_model] -> vertex offsets [T, V * 3]. Without a session the
  // whole sequence is processed from empty states.
  Tensor forward_tokens(const Tensor& tokens, DecodeSession* session = nullptr,
                        std::vector<RoutingStats>* stats = nullptr) const;

  // Next-frame prediction from ground-truth history (zero seed for frame 0).
  // gt: [T, V * 3], audio: [T, d_model]. Returns [T, V * 3].
  Tensor teacher_forced(const Tensor& gt, const Tensor& audio, std::size_t subject,
                        std::vector<RoutingStats>* stats = nullptr) const;

  DecodeSession start_session(const Tensor& audio, std::size_t subject) const;
  // One frame [V * 3], or nullopt once the session's audio is used up.
  std::optional<std::vector<double>> decode_step(DecodeSession& session) const;
  // Autoregressive rollout of `frames` frames; deterministic.
  MotionSequence generate(const Tensor& audio, std::size_t subject, std::size_t frames,
                          double fps = 60.0) const;

  std::vector<LayerKind> layer_kinds() const;
  std::vector<std::string> layer_labels() const;
  void collect(const std::string& prefix, ParamList& out) const;
  void collect(ParamList& out) const { collect(path_, out); }
  std::size_t param_count() const;
  std::size_t active_param_count() const;
  const DecoderConfig& config() const { return cfg_; }

  Linear motion_in;  // V * 3 -> d_model
  Tensor style;      // [n_subjects, d_model]
  std::vector<MambaLayer> left;
  TransformerBlock center;
  std::vector<MambaLayer> right;
  RmsNorm final_norm;
  Linear head;  // d_model -> V * 3, zero-initialised

 private:
  void check_subject(std::size_t subject) const;

  DecoderConfig cfg_;
  std::string path_;
};

struct ModelConfig {
  DecoderConfig decoder;
  AudioConfig audio;
  double fps = 60.0;

  void sync();
  void validate() const;
};

// Audio frontend and decoder trained together.
class Model {
 public:
  Model() = default;
  Model(ModelConfig cfg, std::uint64_t seed);

  // Raw features [T', D] resampled to `frames` and projected.
  Tensor audio_tokens(const SpeechFeatures& feats, std::size_t frames) const;
  SpeechFeatures features_from_waveform(const Waveform& wave) const;

  Tensor teacher_forced(const Tensor& gt, const SpeechFeatures& feats, std::size_t subject,
                        std::vector<RoutingStats>* stats = nullptr) const;
  MotionSequence generate(const SpeechFeatures& feats, std::size_t subject, std::size_t frames) const;

  void collect(ParamList& out) const;
  void collect_trainable(ParamList& out) const;
  const ModelConfig& config() const { return cfg_; }

  AudioFrontend frontend;
  Decoder decoder;

 private:
  ModelConfig cfg_;
};

}  // namespace jambatalk
