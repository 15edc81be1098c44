#include "jambatalk/motion.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

#include "jambatalk/binary_io.hpp"

namespace jambatalk {

MotionSequence MotionSequence::zeros(std::size_t frames, std::size_t vertices, double fps) {
  MotionSequence m;
  m.frames = frames;
  m.vertices = vertices;
  m.fps = fps;
  m.values.assign(frames * vertices * 3, 0.0);
  return m;
}

MotionSequence MotionSequence::from_tensor(const Tensor& t, double fps) {
  if (t.rank() == 2 && t.dim(1) % 3 == 0) {
    MotionSequence m;
    m.frames = t.dim(0);
    m.vertices = t.dim(1) / 3;
    m.fps = fps;
    m.values = t.to_vector();
    return m;
  }
  if (t.rank() == 3 && t.dim(2) == 3) {
    MotionSequence m;
    m.frames = t.dim(0);
    m.vertices = t.dim(1);
    m.fps = fps;
    m.values = t.to_vector();
    return m;
  }
  throw DimensionError("motion tensor must be [T, V*3] or [T, V, 3], got " + shape_str(t.shape()));
}

Tensor MotionSequence::as_tensor() const { return Tensor::from({frames, vertices * 3}, values); }

std::span<const double> MotionSequence::frame(std::size_t t) const {
  if (t >= frames) throw ContractError(fmt::format("frame {} out of range ({} frames)", t, frames));
  return std::span<const double>(values).subspan(t * vertices * 3, vertices * 3);
}

std::span<double> MotionSequence::frame(std::size_t t) {
  if (t >= frames) throw ContractError(fmt::format("frame {} out of range ({} frames)", t, frames));
  return std::span<double>(values).subspan(t * vertices * 3, vertices * 3);
}

void MotionSequence::check_finite() const {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NumericError(fmt::format("motion value at frame {} vertex {} is not finite", i / (vertices * 3),
                                     (i / 3) % vertices));
    }
  }
}

void save_motion(const std::filesystem::path& path, const MotionSequence& motion) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw LoadError("cannot write motion file: " + path.string());
  out.write("JTMS", 4);
  io::write_u32(out, 1);
  io::write_u32(out, static_cast<std::uint32_t>(motion.frames));
  io::write_u32(out, static_cast<std::uint32_t>(motion.vertices));
  io::write_f64(out, motion.fps);
  for (double v : motion.values) io::write_f32(out, static_cast<float>(v));
}

MotionSequence load_motion(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open motion file: " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "JTMS", 4) != 0) throw LoadError(path.string() + ": not a motion file");
  const std::uint32_t version = io::read_u32(in);
  if (version != 1) throw LoadError(fmt::format("{}: unsupported motion version {}", path.string(), version));
  MotionSequence m;
  m.frames = io::read_u32(in);
  m.vertices = io::read_u32(in);
  m.fps = io::read_f64(in);
  m.values.resize(m.frames * m.vertices * 3);
  try {
    for (auto& v : m.values) v = io::read_f32(in);
  } catch (const LoadError&) {
    throw LoadError(fmt::format("{}: truncated ({} frames x {} vertices declared)", path.string(), m.frames,
                                m.vertices));
  }
  return m;
}

Mesh load_obj(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open mesh: " + path.string());
  Mesh mesh;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ss(line);
    std::string tag;
    ss >> tag;
    if (tag == "v") {
      double x, y, z;
      if (!(ss >> x >> y >> z)) throw LoadError(fmt::format("{}:{}: bad vertex", path.string(), lineno));
      mesh.vertices.insert(mesh.vertices.end(), {x, y, z});
    } else if (tag == "f") {
      std::vector<std::size_t> idx;
      std::string tok;
      while (ss >> tok) {
        const long i = std::stol(tok.substr(0, tok.find('/')));
        if (i < 1) throw LoadError(fmt::format("{}:{}: unsupported face index", path.string(), lineno));
        idx.push_back(static_cast<std::size_t>(i - 1));
      }
      for (std::size_t k = 2; k < idx.size(); ++k) mesh.faces.push_back({idx[0], idx[k - 1], idx[k]});
    }
  }
  for (const auto& f : mesh.faces) {
    for (auto i : f) {
      if (i >= mesh.vertex_count()) throw LoadError(path.string() + ": face references a missing vertex");
    }
  }
  return mesh;
}

void save_obj(const std::filesystem::path& path, const Mesh& mesh) {
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write mesh: " + path.string());
  for (std::size_t v = 0; v < mesh.vertex_count(); ++v) {
    out << fmt::format("v {:.6f} {:.6f} {:.6f}\n", mesh.vertices[3 * v], mesh.vertices[3 * v + 1],
                       mesh.vertices[3 * v + 2]);
  }
  for (const auto& f : mesh.faces) out << fmt::format("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1);
}

std::size_t export_obj_frames(const std::filesystem::path& dir, const std::string& stem,
                              const MotionSequence& motion, const Mesh& neutral) {
  if (neutral.vertex_count() != motion.vertices) {
    throw ContractError(fmt::format("template has {} vertices, motion has {}", neutral.vertex_count(),
                                    motion.vertices));
  }
  std::filesystem::create_directories(dir);
  Mesh frame = neutral;
  for (std::size_t t = 0; t < motion.frames; ++t) {
    auto off = motion.frame(t);
    for (std::size_t i = 0; i < off.size(); ++i) frame.vertices[i] = neutral.vertices[i] + off[i];
    save_obj(dir / fmt::format("{}_{:04d}.obj", stem, t), frame);
  }
  return motion.frames;
}

}  // namespace jambatalk
