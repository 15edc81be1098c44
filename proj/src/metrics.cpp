#include "jambatalk/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <unordered_set>

#include <fmt/format.h>
#include <json.hpp>

namespace jambatalk {

void VertexMask::validate(std::size_t vertex_count) const {
  if (lip_indices.empty()) throw ConfigError("vertex mask: lip set is empty");
  if (upper_indices.empty()) throw ConfigError("vertex mask: upper-face set is empty");
  std::unordered_set<std::size_t> lips;
  for (auto i : lip_indices) {
    if (i >= vertex_count) throw ConfigError(fmt::format("vertex mask: lip index {} >= V = {}", i, vertex_count));
    if (!lips.insert(i).second) throw ConfigError(fmt::format("vertex mask: duplicate lip index {}", i));
  }
  std::unordered_set<std::size_t> upper;
  for (auto i : upper_indices) {
    if (i >= vertex_count) {
      throw ConfigError(fmt::format("vertex mask: upper index {} >= V = {}", i, vertex_count));
    }
    if (!upper.insert(i).second) throw ConfigError(fmt::format("vertex mask: duplicate upper index {}", i));
    if (lips.count(i)) throw ConfigError(fmt::format("vertex mask: index {} is in both sets", i));
  }
}

std::vector<std::size_t> load_index_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open index file: " + path.string());
  std::vector<std::size_t> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = line.substr(0, line.find('#'));
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto last = line.find_last_not_of(" \t\r");
    const std::string tok = line.substr(first, last - first + 1);
    if (tok.find_first_not_of("0123456789") != std::string::npos) {
      throw LoadError(fmt::format("{}:{}: '{}' is not a vertex index", path.string(), lineno, tok));
    }
    out.push_back(std::stoull(tok));
  }
  return out;
}

void save_index_file(const std::filesystem::path& path, std::span<const std::size_t> indices,
                     const std::string& comment) {
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write index file: " + path.string());
  if (!comment.empty()) out << "# " << comment << '\n';
  for (auto i : indices) out << i << '\n';
}

namespace {

void check_pair(const MotionSequence& pred, const MotionSequence& gt) {
  if (pred.frames != gt.frames || pred.vertices != gt.vertices) {
    throw ContractError(fmt::format("metric shape mismatch: pred {}x{} vs gt {}x{}", pred.frames, pred.vertices,
                                    gt.frames, gt.vertices));
  }
  if (gt.frames == 0) throw ContractError("metrics need at least one frame");
}

void check_indices(std::span<const std::size_t> idx, std::size_t vertices, const char* what) {
  if (idx.empty()) throw ConfigError(fmt::format("{} vertex set is empty", what));
  for (auto i : idx) {
    if (i >= vertices) {
      throw ContractError(fmt::format("{} vertex index {} out of range for V = {}", what, i, vertices));
    }
  }
}

}  // namespace

double lve(const MotionSequence& pred, const MotionSequence& gt, const VertexMask& mask, LveMode mode) {
  check_pair(pred, gt);
  check_indices(mask.lip_indices, gt.vertices, "lip");
  double total = 0.0;
  for (std::size_t t = 0; t < gt.frames; ++t) {
    double worst = 0.0;
    for (auto v : mask.lip_indices) {
      double sq = 0.0;
      for (std::size_t a = 0; a < 3; ++a) {
        const double diff = pred.at(t, v, a) - gt.at(t, v, a);
        sq += diff * diff;
      }
      worst = std::max(worst, sq);
    }
    total += mode == LveMode::kSquared ? worst : std::sqrt(worst);
  }
  return total / static_cast<double>(gt.frames);
}

double dyn(std::span<const double> series) {
  if (series.empty() || series.size() % 3 != 0) {
    throw ContractError(fmt::format("dyn expects a non-empty [T, 3] series, got {} values", series.size()));
  }
  const std::size_t T = series.size() / 3;
  // Deviations from the first norm: a constant series gives exactly 0.
  std::vector<double> norms(T);
  const double first = std::hypot(series[0], series[1], series[2]);
  double mean = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    norms[t] = std::hypot(series[3 * t], series[3 * t + 1], series[3 * t + 2]) - first;
    mean += norms[t];
  }
  mean /= static_cast<double>(T);
  double var = 0.0;
  for (double n : norms) var += (n - mean) * (n - mean);
  return std::sqrt(var / static_cast<double>(T));
}

double fdd(const MotionSequence& pred, const MotionSequence& gt, const VertexMask& mask) {
  check_pair(pred, gt);
  check_indices(mask.upper_indices, gt.vertices, "upper-face");
  std::vector<double> gs(gt.frames * 3);
  std::vector<double> ps(gt.frames * 3);
  double total = 0.0;
  for (auto v : mask.upper_indices) {
    for (std::size_t t = 0; t < gt.frames; ++t) {
      for (std::size_t a = 0; a < 3; ++a) {
        gs[3 * t + a] = gt.at(t, v, a);
        ps[3 * t + a] = pred.at(t, v, a);
      }
    }
    total += dyn(gs) - dyn(ps);
  }
  return total / static_cast<double>(mask.upper_indices.size());
}

std::string metric_records_json(const std::vector<MetricRecord>& records) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : records) {
    arr.push_back({{"metric", r.metric}, {"value", r.value}, {"units", r.units}, {"sequence_id", r.sequence_id}});
  }
  return arr.dump(2);
}

}  // namespace jambatalk
