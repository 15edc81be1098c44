#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "jambatalk/checkpoint.hpp"
#include "jambatalk/dataset.hpp"
#include "jambatalk/decoder.hpp"
#include "jambatalk/train.hpp"

namespace jambatalk {

struct DataConfig {
  std::string source = "synthetic";  // "synthetic", or a dataset directory
  bool vocaset = false;              // enforce V = 5023 when loading a directory
  SynthConfig synth;
};

// Everything one run needs. Desk-scale defaults.
struct RunConfig {
  std::uint64_t seed = 0;
  ModelConfig model;
  TrainConfig train;
  DataConfig data;

  // Propagates shared values (seed, d_model, feature_dim, V) into sub-configs.
  void sync();
  void validate() const;
};

RunConfig default_run_config();

// INI text with [sections]; unknown keys are a ConfigError.
void apply_ini(RunConfig& cfg, const std::filesystem::path& path);
// "section.key=value"
void apply_override(RunConfig& cfg, const std::string& assignment);
std::string to_ini(const RunConfig& cfg);

// Dataset named by the config (generated or loaded).
Dataset load_data(const RunConfig& cfg);
// Model sized for the data (V, subject count, feature dim).
ModelConfig fit_model_to_data(ModelConfig model, const Dataset& data);

// Checkpoints hold the parameters plus "meta.*" entries describing the model.
void save_model(const std::filesystem::path& path, const Model& model, std::uint64_t seed);
Model load_model(const std::filesystem::path& path);

}  // namespace jambatalk
