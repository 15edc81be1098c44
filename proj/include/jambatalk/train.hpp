#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "jambatalk/dataset.hpp"
#include "jambatalk/decoder.hpp"
#include "jambatalk/metrics.hpp"

namespace jambatalk {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(ParamList params, AdamConfig cfg);

  // Applies one update from the accumulated gradients, then clears them.
  void step();
  void zero_grad() const;
  std::size_t steps() const { return t_; }

 private:
  ParamList params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

struct TrainConfig {
  AdamConfig adam;
  std::size_t epochs = 200;
  std::size_t max_steps = 0;  // 0: no cap
  std::size_t batch = 1;      // sequences per update
  bool shuffle = true;
  std::uint64_t seed = 0;
  std::filesystem::path loss_csv;  // empty: no CSV

  void validate() const;
};

struct EpochLog {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double train_loss = 0.0;  // mean over the epoch's updates
  double val_loss = 0.0;    // teacher-forced, after the epoch; NaN without a val split
  double seconds = 0.0;
};

struct TrainResult {
  std::vector<EpochLog> epochs;
  std::vector<double> step_losses;
  std::vector<std::size_t> routing_counts;  // per expert, summed over MoE layers
  std::size_t steps = 0;
};

// Speech features for a record: precomputed ones, or the frontend's
// extraction of its waveform.
SpeechFeatures record_features(const Model& model, const DatasetRecord& rec);

// Teacher-forced mean squared vertex error on one record.
Tensor record_loss(const Model& model, const DatasetRecord& rec, std::vector<RoutingStats>* stats = nullptr);
// Mean of record_loss over a split, without gradients.
double split_loss(const Model& model, const Dataset& data, Split split);

using EpochCallback = std::function<void(const EpochLog&)>;

// Teacher-forced next-frame regression with Adam. NaN or infinite losses
// throw NumericError naming the epoch, step and sequence.
TrainResult train(Model& model, const Dataset& data, const TrainConfig& cfg, const EpochCallback& on_epoch = {});

struct SequenceMetrics {
  std::string sequence_id;
  double lve = 0.0;          // mm
  double lve_squared = 0.0;  // mm^2
  double fdd = 0.0;          // mm
};

struct EvalReport {
  std::vector<SequenceMetrics> sequences;
  double mean_lve = 0.0;
  double mean_lve_squared = 0.0;
  double mean_fdd = 0.0;

  std::vector<MetricRecord> records() const;
  std::string table() const;  // aligned columns in table units
};

// Metrics per sequence of a split. Autoregressive uses the model's own
// outputs as history; otherwise predictions are teacher-forced.
EvalReport evaluate(const Model& model, const Dataset& data, Split split, const VertexMask& mask,
                    bool autoregressive = true);
// The same report for a fixed prediction per record (baselines, oracles).
EvalReport evaluate_predictions(const Dataset& data, Split split, const VertexMask& mask,
                                const std::function<MotionSequence(const DatasetRecord&)>& predict);

}  // namespace jambatalk
