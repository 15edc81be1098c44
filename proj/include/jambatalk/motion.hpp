#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <vector>

#include "jambatalk/tensor.hpp"

namespace jambatalk {

// T frames of per-vertex offsets from a neutral template (mm).
struct MotionSequence {
  std::size_t frames = 0;
  std::size_t vertices = 0;
  double fps = 60.0;
  std::vector<double> values;  // [frames, vertices, 3]

  static MotionSequence zeros(std::size_t frames, std::size_t vertices, double fps = 60.0);
  // t: [T, V * 3] or [T, V, 3]
  static MotionSequence from_tensor(const Tensor& t, double fps = 60.0);

  Tensor as_tensor() const;  // [T, V * 3]
  std::span<const double> frame(std::size_t t) const;
  std::span<double> frame(std::size_t t);
  double at(std::size_t t, std::size_t v, std::size_t axis) const {
    return values[(t * vertices + v) * 3 + axis];
  }
  // Throws NumericError on NaN or infinity.
  void check_finite() const;
};

// Binary layout (little-endian):
//   "JTMS", u32 version (1), u32 T, u32 V, f64 fps, T*V*3 f32 values.
void save_motion(const std::filesystem::path& path, const MotionSequence& motion);
MotionSequence load_motion(const std::filesystem::path& path);

struct Mesh {
  std::vector<double> vertices;               // [V, 3]
  std::vector<std::array<std::size_t, 3>> faces;  // zero-based
  std::size_t vertex_count() const { return vertices.size() / 3; }
};

// Reads `v` and triangular (or fan-triangulated) `f` records.
Mesh load_obj(const std::filesystem::path& path);
void save_obj(const std::filesystem::path& path, const Mesh& mesh);

// One wavefront file per frame (template + offsets), named <stem>_0000.obj, ...
// Returns the number of files written.
std::size_t export_obj_frames(const std::filesystem::path& dir, const std::string& stem,
                              const MotionSequence& motion, const Mesh& neutral);

}  // namespace jambatalk
