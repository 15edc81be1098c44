#include "jambatalk/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include <fmt/format.h>

namespace jambatalk {

Adam::Adam(ParamList params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  if (!(cfg_.lr >= 0.0)) throw ConfigError("adam: lr must be non-negative");
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.numel(), 0.0);
    v_.emplace_back(p.tensor.numel(), 0.0);
  }
}

void Adam::zero_grad() const {
  for (const auto& p : params_) p.tensor.zero_grad();
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor p = params_[i].tensor;
    if (!p.has_grad()) continue;
    auto g = p.grad();
    auto w = p.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
      w[j] -= cfg_.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg_.eps);
    }
  }
  zero_grad();
}

void TrainConfig::validate() const {
  if (!(adam.lr >= 0.0)) throw ConfigError("train: lr must be non-negative");
  if (epochs < 1) throw ConfigError("train: epochs must be at least 1");
  if (batch < 1) throw ConfigError("train: batch must be at least 1");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
    throw ConfigError("train: betas must lie in [0, 1)");
  }
}

SpeechFeatures record_features(const Model& model, const DatasetRecord& rec) {
  if (rec.waveform) return model.features_from_waveform(*rec.waveform);
  return rec.features;
}

Tensor record_loss(const Model& model, const DatasetRecord& rec, std::vector<RoutingStats>* stats) {
  const Tensor gt = rec.motion.as_tensor();
  if (rec.subject_id >= model.decoder.config().n_subjects) {
    throw ContractError(fmt::format("{}: subject {} has no style row ({} subjects in the model)", rec.sentence_id,
                                    rec.subject_id, model.decoder.config().n_subjects));
  }
  return mse_loss(model.teacher_forced(gt, record_features(model, rec), rec.subject_id, stats), gt);
}

double split_loss(const Model& model, const Dataset& data, Split split) {
  NoGradGuard no_grad;
  const auto recs = data.split(split);
  if (recs.empty()) return std::numeric_limits<double>::quiet_NaN();
  double total = 0.0;
  for (const auto* r : recs) total += record_loss(model, *r).item();
  return total / static_cast<double>(recs.size());
}

TrainResult train(Model& model, const Dataset& data, const TrainConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  const auto recs = data.split(Split::kTrain);
  if (recs.empty()) throw ContractError("train: the training split is empty");
  if (data.vertex_count() != model.decoder.config().vertex_count) {
    throw ContractError(fmt::format("train: data has V = {}, model expects {}", data.vertex_count(),
                                    model.decoder.config().vertex_count));
  }

  for (const auto* r : recs) {
    try {
      r->motion.check_finite();
    } catch (const NumericError& e) {
      throw NumericError(fmt::format("train: {}: {}", r->sentence_id, e.what()));
    }
  }

  ParamList params;
  model.collect_trainable(params);
  Adam opt(params, cfg.adam);
  opt.zero_grad();

  std::ofstream csv;
  if (!cfg.loss_csv.empty()) {
    csv.open(cfg.loss_csv);
    if (!csv) throw LoadError("cannot write loss curve: " + cfg.loss_csv.string());
    csv << "step,train_loss,val_loss\n";
  }

  Rng order_rng = Rng::derive(cfg.seed, "train.order");
  std::vector<std::size_t> order(recs.size());
  std::iota(order.begin(), order.end(), 0);

  TrainResult result;
  std::vector<RoutingStats> stats;
  bool done = false;
  for (std::size_t epoch = 1; epoch <= cfg.epochs && !done; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    if (cfg.shuffle) std::shuffle(order.begin(), order.end(), order_rng.engine());
    double epoch_total = 0.0;
    std::size_t epoch_updates = 0;
    for (std::size_t pos = 0; pos < order.size() && !done; pos += cfg.batch) {
      const std::size_t end = std::min(order.size(), pos + cfg.batch);
      const double scale = 1.0 / static_cast<double>(end - pos);
      double batch_loss = 0.0;
      for (std::size_t i = pos; i < end; ++i) {
        const DatasetRecord& rec = *recs[order[i]];
        Tensor loss = record_loss(model, rec, &stats);
        const double value = loss.item();
        if (!std::isfinite(value)) {
          throw NumericError(fmt::format("non-finite training loss ({}) at epoch {}, step {}, sequence {}", value,
                                         epoch, result.steps + 1, rec.sentence_id));
        }
        mul_scalar(loss, scale).backward();
        batch_loss += value * scale;
      }
      opt.step();
      ++result.steps;
      result.step_losses.push_back(batch_loss);
      epoch_total += batch_loss;
      ++epoch_updates;
      if (cfg.max_steps && result.steps >= cfg.max_steps) done = true;
    }
    EpochLog log;
    log.epoch = epoch;
    log.step = result.steps;
    log.train_loss = epoch_total / static_cast<double>(epoch_updates);
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    log.val_loss = split_loss(model, data, Split::kVal);
    if (csv) csv << fmt::format("{},{:.10g},{:.10g}\n", log.step, log.train_loss, log.val_loss);
    result.epochs.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  for (const auto& s : stats) {
    if (result.routing_counts.size() < s.counts.size()) result.routing_counts.resize(s.counts.size(), 0);
    for (std::size_t e = 0; e < s.counts.size(); ++e) result.routing_counts[e] += s.counts[e];
  }
  return result;
}

// ---------------------------------------------------------------------------

std::vector<MetricRecord> EvalReport::records() const {
  std::vector<MetricRecord> out;
  for (const auto& s : sequences) {
    out.push_back({"LVE", s.lve * kLveScale, "1e-3 mm", s.sequence_id});
    out.push_back({"LVE_squared", s.lve_squared * kLveScale, "1e-3 mm^2", s.sequence_id});
    out.push_back({"FDD", s.fdd * kFddScale, "1e-5 mm", s.sequence_id});
  }
  out.push_back({"LVE", mean_lve * kLveScale, "1e-3 mm", "mean"});
  out.push_back({"LVE_squared", mean_lve_squared * kLveScale, "1e-3 mm^2", "mean"});
  out.push_back({"FDD", mean_fdd * kFddScale, "1e-5 mm", "mean"});
  return out;
}

std::string EvalReport::table() const {
  std::size_t width = 8;
  for (const auto& s : sequences) width = std::max(width, s.sequence_id.size());
  std::string out = fmt::format("{:<{}}  {:>14}  {:>14}  {:>16}\n", "sequence", width, "LVE (1e-3 mm)",
                                "FDD (1e-5 mm)", "LVE^2 (1e-3 mm2)");
  for (const auto& s : sequences) {
    out += fmt::format("{:<{}}  {:>14.4f}  {:>14.4f}  {:>16.4f}\n", s.sequence_id, width, s.lve * kLveScale,
                       s.fdd * kFddScale, s.lve_squared * kLveScale);
  }
  out += fmt::format("{:<{}}  {:>14.4f}  {:>14.4f}  {:>16.4f}\n", "mean", width, mean_lve * kLveScale,
                     mean_fdd * kFddScale, mean_lve_squared * kLveScale);
  return out;
}

EvalReport evaluate_predictions(const Dataset& data, Split split, const VertexMask& mask,
                                const std::function<MotionSequence(const DatasetRecord&)>& predict) {
  mask.validate(data.vertex_count());
  EvalReport report;
  for (const auto* rec : data.split(split)) {
    const MotionSequence pred = predict(*rec);
    SequenceMetrics m;
    m.sequence_id = rec->sentence_id;
    m.lve = lve(pred, rec->motion, mask);
    m.lve_squared = lve(pred, rec->motion, mask, LveMode::kSquared);
    m.fdd = fdd(pred, rec->motion, mask);
    report.sequences.push_back(m);
  }
  if (!report.sequences.empty()) {
    const double n = static_cast<double>(report.sequences.size());
    for (const auto& s : report.sequences) {
      report.mean_lve += s.lve / n;
      report.mean_lve_squared += s.lve_squared / n;
      report.mean_fdd += s.fdd / n;
    }
  }
  return report;
}

EvalReport evaluate(const Model& model, const Dataset& data, Split split, const VertexMask& mask,
                    bool autoregressive) {
  if (data.vertex_count() != model.decoder.config().vertex_count) {
    throw ContractError(fmt::format("evaluate: data has V = {}, model expects {}", data.vertex_count(),
                                    model.decoder.config().vertex_count));
  }
  return evaluate_predictions(data, split, mask, [&](const DatasetRecord& rec) {
    NoGradGuard no_grad;
    const SpeechFeatures feats = record_features(model, rec);
    if (autoregressive) return model.generate(feats, rec.subject_id, rec.motion.frames);
    const Tensor pred = model.teacher_forced(rec.motion.as_tensor(), feats, rec.subject_id);
    return MotionSequence::from_tensor(pred, rec.motion.fps);
  });
}

}  // namespace jambatalk
