#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "jambatalk/motion.hpp"

namespace jambatalk {

struct VertexMask {
  std::vector<std::size_t> lip_indices;
  std::vector<std::size_t> upper_indices;

  // Unique, in range, disjoint; throws ConfigError.
  void validate(std::size_t vertex_count) const;
};

// One vertex index per line; '#' starts a comment; blank lines are skipped.
std::vector<std::size_t> load_index_file(const std::filesystem::path& path);
void save_index_file(const std::filesystem::path& path, std::span<const std::size_t> indices,
                     const std::string& comment = {});

enum class LveMode { kEuclidean, kSquared };

// Mean over frames of the largest lip-vertex distance.
double lve(const MotionSequence& pred, const MotionSequence& gt, const VertexMask& mask,
           LveMode mode = LveMode::kEuclidean);

// Population standard deviation of the per-frame L2 norms; series is [T, 3].
double dyn(std::span<const double> series);

// Mean over upper-face vertices of dyn(gt_v) - dyn(pred_v). Signed.
double fdd(const MotionSequence& pred, const MotionSequence& gt, const VertexMask& mask);

// Report units: LVE in 1e-3 mm, FDD in 1e-5 mm.
inline constexpr double kLveScale = 1e3;
inline constexpr double kFddScale = 1e5;

struct MetricRecord {
  std::string metric;
  double value = 0.0;
  std::string units;
  std::string sequence_id;
};

// {metric, value, units, sequence_id} objects, one per record, as a JSON array.
std::string metric_records_json(const std::vector<MetricRecord>& records);

}  // namespace jambatalk
