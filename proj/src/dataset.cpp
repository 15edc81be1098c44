#include "jambatalk/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include <fmt/format.h>

#include "jambatalk/binary_io.hpp"
#include "jambatalk/nn.hpp"

namespace jambatalk {

Split parse_split(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "val") return Split::kVal;
  if (name == "test") return Split::kTest;
  throw ConfigError(fmt::format("unknown split '{}' (expected train, val or test)", name));
}

const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain:
      return "train";
    case Split::kVal:
      return "val";
    case Split::kTest:
      return "test";
  }
  return "?";
}

std::vector<const DatasetRecord*> Dataset::split(Split s) const {
  std::vector<const DatasetRecord*> out;
  for (const auto& r : records) {
    if (r.split == s) out.push_back(&r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// synthetic corpus

namespace {

struct FaceGrid {
  Mesh mesh;
  std::vector<double> u, w;  // normalised horizontal / vertical coordinate in [-0.5, 0.5]
};

FaceGrid make_face_grid(std::size_t n) {
  FaceGrid g;
  const auto cols = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n))));
  const std::size_t rows = (n + cols - 1) / cols;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t r = i / cols;
    const std::size_t c = i % cols;
    const double u = cols > 1 ? static_cast<double>(c) / static_cast<double>(cols - 1) - 0.5 : 0.0;
    const double w = rows > 1 ? static_cast<double>(r) / static_cast<double>(rows - 1) - 0.5 : 0.0;
    g.u.push_back(u);
    g.w.push_back(w);
    g.mesh.vertices.insert(g.mesh.vertices.end(), {u * 100.0, w * 120.0, 30.0 * (1.0 - 2.0 * u * u - w * w)});
  }
  for (std::size_t r = 0; r + 1 < rows; ++r) {
    for (std::size_t c = 0; c + 1 < cols; ++c) {
      const std::size_t a = r * cols + c, b = a + 1, d = a + cols, e = d + 1;
      if (e < n) {
        g.mesh.faces.push_back({a, b, e});
        g.mesh.faces.push_back({a, e, d});
      }
    }
  }
  return g;
}

}  // namespace

Dataset synth_dataset(const SynthConfig& cfg) {
  if (cfg.n_subjects < 1 || cfg.n_sentences < 1 || cfg.frames < 1 || cfg.vertices < 1 || cfg.feature_dim < 1 ||
      cfg.latent_dim < 1) {
    throw ConfigError("synth_dataset: all counts must be at least 1");
  }
  const std::size_t V = cfg.vertices;
  const std::size_t K = cfg.latent_dim;
  const std::size_t D = cfg.feature_dim;
  const std::size_t T = cfg.frames;
  const std::size_t src_frames = std::max<std::size_t>(2 * T, 2);

  Dataset data;
  FaceGrid grid = make_face_grid(V);
  data.neutral = grid.mesh;
  for (std::size_t v = 0; v < V; ++v) {
    if (grid.w[v] < -0.12 && grid.w[v] > -0.4 && std::abs(grid.u[v]) < 0.3) data.mask.lip_indices.push_back(v);
    if (grid.w[v] > 0.15) data.mask.upper_indices.push_back(v);
  }
  if (data.mask.lip_indices.empty()) data.mask.lip_indices.push_back(0);
  if (data.mask.upper_indices.empty() && V > 1) data.mask.upper_indices.push_back(V - 1);

  // Displacement fields: the first half sit on the mouth, the rest anywhere.
  Rng rf = Rng::derive(cfg.seed, "synth.fields");
  std::vector<double> fields(K * V * 3);
  for (std::size_t k = 0; k < K; ++k) {
    const bool mouth = k < (K + 1) / 2;
    const double cu = mouth ? rf.uniform(-0.2, 0.2) : rf.uniform(-0.4, 0.4);
    const double cw = mouth ? rf.uniform(-0.35, -0.15) : rf.uniform(-0.4, 0.4);
    const double radius = rf.uniform(0.15, 0.3);
    double dir[3] = {rf.normal(0.0, 0.4), rf.normal(), rf.normal(0.0, 0.6)};
    const double len = std::hypot(dir[0], dir[1], dir[2]);
    for (double& x : dir) x /= len;
    const double gain = mouth ? 1.0 : 0.4;
    for (std::size_t v = 0; v < V; ++v) {
      const double r2 = (grid.u[v] - cu) * (grid.u[v] - cu) + (grid.w[v] - cw) * (grid.w[v] - cw);
      const double bump = gain * std::exp(-r2 / (2.0 * radius * radius));
      for (std::size_t a = 0; a < 3; ++a) fields[(k * V + v) * 3 + a] = bump * dir[a];
    }
  }

  // features -> latent map, and per-subject linear styles
  Rng rm = Rng::derive(cfg.seed, "synth.latent_map");
  std::vector<double> latent_map(K * D);
  for (auto& x : latent_map) x = rm.normal(0.0, 1.5 / std::sqrt(static_cast<double>(D)));
  Rng rs = Rng::derive(cfg.seed, "synth.styles");
  std::vector<double> styles(cfg.n_subjects * K);
  for (auto& x : styles) x = 1.0 + rs.uniform(-0.4, 0.4);

  const Tensor interp = interpolation_matrix(src_frames, T);
  auto iv = interp.data();

  for (std::size_t s = 0; s < cfg.n_subjects; ++s) data.subjects.push_back(fmt::format("subject{}", s));

  for (std::size_t s = 0; s < cfg.n_subjects; ++s) {
    for (std::size_t n = 0; n < cfg.n_sentences; ++n) {
      Rng rr = Rng::derive(cfg.seed, fmt::format("synth.sentence.{}.{}", s, n));
      DatasetRecord rec;
      rec.sentence_id = fmt::format("{}_sentence{:02d}", data.subjects[s], n);
      rec.subject_id = s;
      if (cfg.n_sentences >= 3 && n == cfg.n_sentences - 2) {
        rec.split = Split::kVal;
      } else if (cfg.n_sentences >= 3 && n == cfg.n_sentences - 1) {
        rec.split = Split::kTest;
      }

      // Smooth feature tracks: a few low-frequency sinusoids per channel.
      const double src_rate = cfg.fps * static_cast<double>(src_frames) / static_cast<double>(T);
      std::vector<double> feats(src_frames * D, 0.0);
      for (std::size_t j = 0; j < D; ++j) {
        for (int m = 0; m < 3; ++m) {
          const double amp = rr.uniform(0.2, 0.6);
          const double freq = rr.uniform(0.5, 4.0);
          const double phase = rr.uniform(0.0, 2.0 * std::numbers::pi);
          for (std::size_t t = 0; t < src_frames; ++t) {
            feats[t * D + j] += amp * std::sin(2.0 * std::numbers::pi * freq * static_cast<double>(t) / src_rate + phase);
          }
        }
      }
      rec.features.frames = Tensor::from({src_frames, D}, feats);
      rec.features.source_rate = src_rate;

      rec.motion = MotionSequence::zeros(T, V, cfg.fps);
      std::vector<double> at_frame(D);
      for (std::size_t t = 0; t < T; ++t) {
        std::fill(at_frame.begin(), at_frame.end(), 0.0);
        for (std::size_t i = 0; i < src_frames; ++i) {
          const double wgt = iv[t * src_frames + i];
          if (wgt == 0.0) continue;
          for (std::size_t j = 0; j < D; ++j) at_frame[j] += wgt * feats[i * D + j];
        }
        auto frame = rec.motion.frame(t);
        for (std::size_t k = 0; k < K; ++k) {
          double z = 0.0;
          for (std::size_t j = 0; j < D; ++j) z += latent_map[k * D + j] * at_frame[j];
          const double coeff = cfg.amplitude * styles[s * K + k] * std::tanh(z);
          for (std::size_t i = 0; i < V * 3; ++i) frame[i] += coeff * fields[k * V * 3 + i];
        }
      }
      data.records.push_back(std::move(rec));
    }
  }
  return data;
}

// ---------------------------------------------------------------------------
// files

void save_features(const std::filesystem::path& path, const SpeechFeatures& feats) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw LoadError("cannot write feature file: " + path.string());
  out.write("JTFT", 4);
  io::write_u32(out, 1);
  io::write_u32(out, static_cast<std::uint32_t>(feats.length()));
  io::write_u32(out, static_cast<std::uint32_t>(feats.dim()));
  io::write_f64(out, feats.source_rate);
  for (double v : feats.frames.data()) io::write_f32(out, static_cast<float>(v));
}

SpeechFeatures load_features(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open feature file: " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "JTFT", 4) != 0) throw LoadError(path.string() + ": not a feature file");
  if (io::read_u32(in) != 1) throw LoadError(path.string() + ": unsupported feature file version");
  const std::size_t T = io::read_u32(in);
  const std::size_t D = io::read_u32(in);
  const double rate = io::read_f64(in);
  if (T == 0 || D == 0) throw LoadError(path.string() + ": empty feature matrix");
  std::vector<double> v(T * D);
  for (auto& x : v) x = io::read_f32(in);
  return {Tensor::from({T, D}, std::move(v)), rate};
}

Dataset load_dataset_layout(const std::filesystem::path& dir, std::optional<std::size_t> expected_vertices) {
  const auto manifest = dir / "manifest.txt";
  const auto template_path = dir / "template.obj";
  if (!std::filesystem::exists(template_path)) {
    throw LoadError(fmt::format("dataset {}: missing template mesh {}", dir.string(), template_path.string()));
  }
  Dataset data;
  data.neutral = load_obj(template_path);
  const std::size_t V = data.neutral.vertex_count();
  if (expected_vertices && V != *expected_vertices) {
    throw LoadError(fmt::format("dataset {}: template has {} vertices, expected {}", dir.string(), V,
                                *expected_vertices));
  }
  if (std::filesystem::exists(dir / "lip_indices.txt")) data.mask.lip_indices = load_index_file(dir / "lip_indices.txt");
  if (std::filesystem::exists(dir / "upper_indices.txt")) {
    data.mask.upper_indices = load_index_file(dir / "upper_indices.txt");
  }

  std::ifstream in(manifest);
  if (!in) throw LoadError(fmt::format("dataset {}: missing manifest.txt", dir.string()));
  std::map<std::string, std::size_t> subject_ids;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = line.substr(0, line.find('#'));
    std::istringstream ss(line);
    std::string split, subject, sentence, motion_file, audio_file;
    if (!(ss >> split)) continue;
    if (!(ss >> subject >> sentence >> motion_file >> audio_file)) {
      throw LoadError(fmt::format("{}:{}: expected '<split> <subject> <sentence> <motion> <audio>'",
                                  manifest.string(), lineno));
    }
    DatasetRecord rec;
    try {
      rec.split = parse_split(split);
    } catch (const ConfigError& e) {
      throw LoadError(fmt::format("{}:{}: {}", manifest.string(), lineno, e.what()));
    }
    auto [it, fresh] = subject_ids.try_emplace(subject, data.subjects.size());
    if (fresh) data.subjects.push_back(subject);
    rec.subject_id = it->second;
    rec.sentence_id = sentence;
    rec.motion = load_motion(dir / motion_file);
    if (rec.motion.vertices != V) {
      throw LoadError(fmt::format("{}: {} vertices, template has {}", motion_file, rec.motion.vertices, V));
    }
    const auto audio_path = dir / audio_file;
    if (audio_path.extension() == ".wav") {
      rec.waveform = read_wav(audio_path);
      const double seconds = rec.waveform->samples.size() / rec.waveform->sample_rate;
      if (std::abs(seconds * rec.motion.fps - static_cast<double>(rec.motion.frames)) > 1.0 + 1e-9) {
        throw LoadError(fmt::format("{}: audio lasts {:.3f} s but motion has {} frames at {} fps", sentence,
                                    seconds, rec.motion.frames, rec.motion.fps));
      }
    } else {
      rec.features = load_features(audio_path);
    }
    data.records.push_back(std::move(rec));
  }
  return data;
}

Dataset load_vocaset_layout(const std::filesystem::path& dir) { return load_dataset_layout(dir, 5023); }

void save_dataset_layout(const std::filesystem::path& dir, const Dataset& data) {
  std::filesystem::create_directories(dir / "motion");
  std::filesystem::create_directories(dir / "audio");
  save_obj(dir / "template.obj", data.neutral);
  save_index_file(dir / "lip_indices.txt", data.mask.lip_indices, "lip vertices");
  save_index_file(dir / "upper_indices.txt", data.mask.upper_indices, "upper-face vertices");
  std::ofstream manifest(dir / "manifest.txt");
  if (!manifest) throw LoadError("cannot write manifest in " + dir.string());
  manifest << "# split subject sentence motion audio\n";
  for (const auto& r : data.records) {
    const std::string motion = fmt::format("motion/{}.jtms", r.sentence_id);
    std::string audio;
    if (r.waveform) {
      audio = fmt::format("audio/{}.wav", r.sentence_id);
      write_wav(dir / audio, *r.waveform);
    } else {
      audio = fmt::format("audio/{}.feat", r.sentence_id);
      save_features(dir / audio, r.features);
    }
    save_motion(dir / motion, r.motion);
    manifest << fmt::format("{} {} {} {} {}\n", split_name(r.split), data.subjects.at(r.subject_id),
                            r.sentence_id, motion, audio);
  }
}

}  // namespace jambatalk
