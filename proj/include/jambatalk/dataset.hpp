#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "jambatalk/audio.hpp"
#include "jambatalk/metrics.hpp"
#include "jambatalk/motion.hpp"

namespace jambatalk {

enum class Split { kTrain, kVal, kTest };

Split parse_split(const std::string& name);  // "train", "val", "test"
const char* split_name(Split s);

struct DatasetRecord {
  std::string sentence_id;
  std::size_t subject_id = 0;
  Split split = Split::kTrain;
  std::optional<Waveform> waveform;  // set when the audio is raw samples
  SpeechFeatures features;           // set when the audio is precomputed features
  MotionSequence motion;             // offsets from the template
};

struct Dataset {
  std::vector<DatasetRecord> records;
  std::vector<std::string> subjects;  // subject_id -> name
  Mesh neutral;
  VertexMask mask;

  std::size_t vertex_count() const { return neutral.vertex_count(); }
  std::vector<const DatasetRecord*> split(Split s) const;
};

struct SynthConfig {
  std::size_t n_subjects = 2;
  std::size_t n_sentences = 8;  // per subject; 6 train, 1 val, 1 test when >= 3
  std::size_t frames = 60;
  std::size_t vertices = 240;
  std::size_t feature_dim = 64;
  std::size_t latent_dim = 6;
  double fps = 60.0;
  double amplitude = 0.5;  // mm, typical lip offset scale
  std::uint64_t seed = 0;
};

// Procedural stand-in for a 4D face-scan corpus: each sentence gets smooth
// feature tracks; the motion at frame t is a fixed function of the features
// at frame t and the subject, mapped through smooth displacement fields on a
// synthetic face grid. Lip and upper-face masks come with the mesh.
Dataset synth_dataset(const SynthConfig& cfg);

// Directory layout:
//   manifest.txt   lines "<split> <subject> <sentence> <motion file> <audio file>", '#' comments
//   template.obj   neutral mesh
//   lip_indices.txt, upper_indices.txt  vertex masks (optional)
// Motion files are JTMS offset sequences; audio is .wav (16 kHz mono) or
// .feat (JTFT feature matrix). Paths are relative to the directory.
Dataset load_dataset_layout(const std::filesystem::path& dir, std::optional<std::size_t> expected_vertices = {});
// Same layout with V fixed at 5023.
Dataset load_vocaset_layout(const std::filesystem::path& dir);
void save_dataset_layout(const std::filesystem::path& dir, const Dataset& data);

// Binary layout (little-endian): "JTFT", u32 version (1), u32 T', u32 D,
// f64 frame rate, T'*D f32 values.
void save_features(const std::filesystem::path& path, const SpeechFeatures& feats);
SpeechFeatures load_features(const std::filesystem::path& path);

}  // namespace jambatalk
