#include "jambatalk/audio.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <fmt/format.h>

#include "jambatalk/binary_io.hpp"

namespace jambatalk {

// ---------------------------------------------------------------------------
// WAV

Waveform read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open WAV file: " + path.string());
  char tag[4];
  auto read_tag = [&](const char* expect) {
    in.read(tag, 4);
    if (!in || std::memcmp(tag, expect, 4) != 0) {
      throw LoadError(fmt::format("{}: not a RIFF/WAVE file (expected '{}')", path.string(), expect));
    }
  };
  read_tag("RIFF");
  io::read_u32(in);
  read_tag("WAVE");

  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  bool have_fmt = false;
  while (true) {
    in.read(tag, 4);
    if (!in) throw LoadError(path.string() + ": no data chunk");
    const std::uint32_t size = io::read_u32(in);
    if (std::memcmp(tag, "fmt ", 4) == 0) {
      format = io::read_u16(in);
      channels = io::read_u16(in);
      rate = io::read_u32(in);
      io::read_u32(in);  // byte rate
      io::read_u16(in);  // block align
      bits = io::read_u16(in);
      std::uint32_t consumed = 16;
      if (format == 0xFFFE && size >= 26) {
        io::read_u16(in);  // cb size
        io::read_u16(in);  // valid bits
        io::read_u32(in);  // channel mask
        format = io::read_u16(in);
        consumed = 26;
      }
      in.ignore(size - consumed + (size & 1));
      have_fmt = true;
      continue;
    }
    if (std::memcmp(tag, "data", 4) != 0) {
      in.ignore(size + (size & 1));
      continue;
    }
    if (!have_fmt) throw LoadError(path.string() + ": data chunk before fmt chunk");
    if (channels != 1) throw LoadError(fmt::format("{}: expected mono audio, got {} channels", path.string(), channels));
    if (rate != 16000) {
      throw LoadError(fmt::format("{}: sample rate {} Hz is not supported (need 16000 Hz)", path.string(), rate));
    }
    Waveform wave;
    wave.sample_rate = rate;
    if (format == 1 && bits == 16) {
      wave.samples.resize(size / 2);
      for (auto& s : wave.samples) s = static_cast<std::int16_t>(io::read_u16(in)) / 32768.0;
    } else if (format == 3 && bits == 32) {
      wave.samples.resize(size / 4);
      for (auto& s : wave.samples) s = io::read_f32(in);
    } else {
      throw LoadError(fmt::format("{}: unsupported encoding (format {}, {} bits); need 16-bit PCM or float32",
                                  path.string(), format, bits));
    }
    return wave;
  }
}

void write_wav(const std::filesystem::path& path, const Waveform& wave) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw LoadError("cannot write WAV file: " + path.string());
  const auto data_bytes = static_cast<std::uint32_t>(wave.samples.size() * 2);
  const auto rate = static_cast<std::uint32_t>(wave.sample_rate);
  out.write("RIFF", 4);
  io::write_u32(out, 36 + data_bytes);
  out.write("WAVE", 4);
  out.write("fmt ", 4);
  io::write_u32(out, 16);
  io::write_u16(out, 1);
  io::write_u16(out, 1);
  io::write_u32(out, rate);
  io::write_u32(out, rate * 2);
  io::write_u16(out, 2);
  io::write_u16(out, 16);
  out.write("data", 4);
  io::write_u32(out, data_bytes);
  for (double s : wave.samples) {
    const double clipped = std::clamp(s, -1.0, 32767.0 / 32768.0);
    io::write_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(std::lround(clipped * 32768.0))));
  }
}

// ---------------------------------------------------------------------------
// resampling

std::size_t AudioConfig::total_stride() const {
  std::size_t s = 1;
  for (const auto& c : convs) s *= c.stride;
  return s;
}

std::size_t AudioConfig::receptive_field() const {
  std::size_t field = 1;
  std::size_t jump = 1;
  for (const auto& c : convs) {
    field += (c.kernel - 1) * jump;
    jump *= c.stride;
  }
  return field;
}

Tensor interpolation_matrix(std::size_t source_frames, std::size_t target_frames) {
  if (source_frames < 2) {
    throw ContractError(fmt::format("resample_linear needs at least 2 source frames, got {}", source_frames));
  }
  if (target_frames < 1) throw ContractError("resample_linear needs at least 1 target frame");
  std::vector<double> w(target_frames * source_frames, 0.0);
  if (target_frames == 1) {
    w[0] = 1.0;
  } else {
    const std::size_t span = target_frames - 1;
    for (std::size_t j = 0; j < target_frames; ++j) {
      const std::size_t num = j * (source_frames - 1);
      std::size_t lo = num / span;
      double frac = static_cast<double>(num % span) / static_cast<double>(span);
      if (lo >= source_frames - 1) {
        lo = source_frames - 2;
        frac = 1.0;
      }
      w[j * source_frames + lo] = 1.0 - frac;
      w[j * source_frames + lo + 1] = frac;
    }
  }
  return Tensor::from({target_frames, source_frames}, std::move(w));
}

Tensor resample_linear(const Tensor& feats, std::size_t target_frames) {
  if (feats.rank() != 2) throw DimensionError("resample_linear expects [T', D], got " + shape_str(feats.shape()));
  return matmul(interpolation_matrix(feats.dim(0), target_frames), feats);
}

SpeechFeatures resample_linear(const SpeechFeatures& feats, std::size_t target_frames) {
  const double duration = feats.source_rate > 0.0 ? feats.length() / feats.source_rate : 0.0;
  return {resample_linear(feats.frames, target_frames),
          duration > 0.0 ? target_frames / duration : feats.source_rate};
}

// ---------------------------------------------------------------------------
// frontend

AudioFrontend::AudioFrontend(const AudioConfig& cfg, std::uint64_t seed, const std::string& path)
    : cfg_(cfg) {
  if (cfg.feature_dim == 0 || cfg.d_model == 0) throw ConfigError("audio: feature_dim and d_model must be positive");
  std::size_t cin = 1;
  for (std::size_t i = 0; i < cfg.convs.size(); ++i) {
    const auto& spec = cfg.convs[i];
    if (spec.kernel == 0 || spec.stride == 0) throw ConfigError("audio: conv kernel and stride must be positive");
    Rng rng = Rng::derive(seed, fmt::format("{}.tcn{}", path, i));
    const std::size_t cout = cfg.feature_dim;
    const double bound = 1.0 / std::sqrt(static_cast<double>(cin * spec.kernel));
    std::vector<double> w(cout * cin * spec.kernel);
    for (auto& v : w) v = rng.uniform(-bound, bound);
    convs.push_back({Tensor::from({cout, cin, spec.kernel}, std::move(w), true),
                     Tensor::zeros({cout}, true), spec.stride});
    cin = cout;
  }
  Rng rp = Rng::derive(seed, path + ".proj");
  projection = Linear(cfg.feature_dim, cfg.d_model, true, rp);
}

SpeechFeatures AudioFrontend::extract_features(const Tensor& waveform, double sample_rate) const {
  if (waveform.numel() == 0) throw ContractError("extract_features: empty waveform");
  const std::size_t need = cfg_.receptive_field();
  if (waveform.numel() < need) {
    throw ContractError(fmt::format("extract_features: waveform has {} samples, needs at least {}",
                                    waveform.numel(), need));
  }
  Tensor h = reshape(waveform, {1, 1, waveform.numel()});
  for (std::size_t i = 0; i < convs.size(); ++i) {
    // Repeat the last sample k - s times so each layer yields floor(L / s)
    // frames; constant input stays constant.
    const std::size_t k = convs[i].weight.dim(2);
    const std::size_t s = convs[i].stride;
    if (k > s) h = concat({h, repeat_interleave(slice(h, 2, h.dim(2) - 1, 1), 2, k - s)}, 2);
    h = conv1d(h, convs[i].weight, convs[i].bias, s);
    if (i + 1 < convs.size()) h = silu(h);
  }
  const std::size_t d = h.dim(1);
  const std::size_t frames = h.dim(2);
  return {reshape(transpose(h, 1, 2), {frames, d}), sample_rate / static_cast<double>(cfg_.total_stride())};
}

SpeechFeatures AudioFrontend::extract_features(std::span<const double> waveform, double sample_rate) const {
  if (waveform.empty()) throw ContractError("extract_features: empty waveform");
  return extract_features(Tensor::from({waveform.size()}, {waveform.begin(), waveform.end()}), sample_rate);
}

Tensor AudioFrontend::encode(const SpeechFeatures& feats, std::size_t frames) const {
  if (feats.dim() != cfg_.feature_dim) {
    throw DimensionError(fmt::format("audio features have D = {}, frontend expects {}", feats.dim(), cfg_.feature_dim));
  }
  return project(resample_linear(feats.frames, frames));
}

void AudioFrontend::collect(const std::string& prefix, ParamList& out) const {
  for (std::size_t i = 0; i < convs.size(); ++i) {
    out.push_back({fmt::format("{}.tcn{}.weight", prefix, i), convs[i].weight});
    out.push_back({fmt::format("{}.tcn{}.bias", prefix, i), convs[i].bias});
  }
  projection.collect(prefix + ".proj", out);
}

void AudioFrontend::collect_trainable(const std::string& prefix, ParamList& out) const {
  if (cfg_.freeze_tcn) {
    projection.collect(prefix + ".proj", out);
  } else {
    collect(prefix, out);
  }
}

}  // namespace jambatalk
