#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "jambatalk/nn.hpp"
#include "jambatalk/tensor.hpp"

namespace jambatalk {

struct SpeechFeatures {
  Tensor frames;             // [T', D]
  double source_rate = 0.0;  // frames per second

  std::size_t length() const { return frames.dim(0); }
  std::size_t dim() const { return frames.dim(1); }
};

struct Waveform {
  std::vector<double> samples;  // mono, nominally in [-1, 1]
  double sample_rate = 16000.0;
};

// Mono 16-bit PCM or 32-bit float WAV at 16 kHz; anything else is a LoadError.
Waveform read_wav(const std::filesystem::path& path);
// Writes 16-bit PCM.
void write_wav(const std::filesystem::path& path, const Waveform& wave);

struct ConvLayerSpec {
  std::size_t kernel = 0;
  std::size_t stride = 0;
};

struct AudioConfig {
  std::size_t feature_dim = 64;  // D
  std::size_t d_model = 64;
  std::vector<ConvLayerSpec> convs{{10, 5}, {4, 4}, {4, 4}};
  double sample_rate = 16000.0;
  bool freeze_tcn = false;

  std::size_t total_stride() const;
  std::size_t receptive_field() const;
};

// Output frame j reads source position j (T' - 1) / (T_target - 1): endpoints
// map exactly, each column is interpolated linearly. Returns [T_target, T'].
Tensor interpolation_matrix(std::size_t source_frames, std::size_t target_frames);
// feats [T', D] -> [T_target, D]; needs T' >= 2.
Tensor resample_linear(const Tensor& feats, std::size_t target_frames);
SpeechFeatures resample_linear(const SpeechFeatures& feats, std::size_t target_frames);

// Trainable stand-in for a pretrained speech encoder: strided temporal
// convolutions (SiLU between layers) -> linear resampling -> linear projection.
// Each conv pads its input on the right with k - s copies of the last sample,
// so T' = floor(samples / total_stride).
class AudioFrontend {
 public:
  AudioFrontend() = default;
  AudioFrontend(const AudioConfig& cfg, std::uint64_t seed, const std::string& path);

  // Throws ContractError when the waveform is shorter than the receptive field.
  SpeechFeatures extract_features(const Tensor& waveform, double sample_rate) const;
  SpeechFeatures extract_features(std::span<const double> waveform, double sample_rate) const;

  // [T, D] -> [T, d_model]
  Tensor project(const Tensor& feats) const { return projection(feats); }
  // resample to `frames` and project: [frames, d_model]
  Tensor encode(const SpeechFeatures& feats, std::size_t frames) const;

  // All parameters (for checkpoints).
  void collect(const std::string& prefix, ParamList& out) const;
  // Parameters the optimizer should update (skips the conv stack when frozen).
  void collect_trainable(const std::string& prefix, ParamList& out) const;
  const AudioConfig& config() const { return cfg_; }

  struct Conv {
    Tensor weight;  // [Cout, Cin, K]
    Tensor bias;    // [Cout]
    std::size_t stride = 1;
  };
  std::vector<Conv> convs;
  Linear projection;

 private:
  AudioConfig cfg_;
};

}  // namespace jambatalk
