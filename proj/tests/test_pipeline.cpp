#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "jambatalk/config.hpp"
#include "jambatalk/experiments.hpp"
#include "oracles.hpp"

using namespace jambatalk;
using oracle::Vec;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("jambatalk_pipeline_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

// Small enough that a few hundred steps take about a second.
RunConfig tiny_run(std::uint64_t seed = 3) {
  RunConfig rc = default_run_config();
  rc.seed = seed;
  rc.model = toy_model_config(Arrangement::kMambaMoe);
  rc.data.synth.n_subjects = 2;
  rc.data.synth.n_sentences = 3;
  rc.data.synth.frames = 10;
  rc.data.synth.vertices = 20;
  rc.train.epochs = 2;
  rc.sync();
  return rc;
}

std::string file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Vec flat_params(const Model& m) {
  ParamList ps;
  m.collect(ps);
  Vec out;
  for (const auto& p : ps) out.insert(out.end(), p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

}  // namespace

TEST(SynthData, DeterministicAndShaped) {
  const RunConfig rc = tiny_run();
  const Dataset a = synth_dataset(rc.data.synth), b = synth_dataset(rc.data.synth);
  ASSERT_EQ(a.records.size(), 6u);
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    EXPECT_EQ(a.records[i].motion.values, b.records[i].motion.values);
    EXPECT_EQ(a.records[i].features.frames.to_vector(), b.records[i].features.frames.to_vector());
    EXPECT_EQ(a.records[i].motion.frames, 10u);
    EXPECT_EQ(a.records[i].motion.vertices, 20u);
  }
  EXPECT_EQ(a.vertex_count(), 20u);
  EXPECT_NO_THROW(a.mask.validate(20));
  EXPECT_EQ(a.split(Split::kTrain).size(), 2u);
  EXPECT_EQ(a.split(Split::kVal).size(), 2u);
  EXPECT_EQ(a.split(Split::kTest).size(), 2u);

  SynthConfig other = rc.data.synth;
  other.seed += 1;
  EXPECT_NE(synth_dataset(other).records[0].motion.values, a.records[0].motion.values);
}

TEST(SynthData, MoreSentencesKeepExistingRecords) {
  SynthConfig sc = tiny_run().data.synth;
  const Dataset a = synth_dataset(sc);
  sc.n_sentences = 5;
  const Dataset b = synth_dataset(sc);
  std::size_t matched = 0;
  for (const auto& ra : a.records) {
    if (ra.split != Split::kTrain) continue;
    for (const auto& rb : b.records) {
      if (rb.sentence_id != ra.sentence_id) continue;
      EXPECT_EQ(ra.features.frames.to_vector(), rb.features.frames.to_vector()) << ra.sentence_id;
      EXPECT_EQ(ra.motion.values, rb.motion.values) << ra.sentence_id;
      ++matched;
    }
  }
  EXPECT_EQ(matched, 2u);
}

TEST(DatasetLayout, RoundTripAndErrors) {
  const Dataset data = synth_dataset(tiny_run().data.synth);
  const auto dir = temp_dir("layout");
  save_dataset_layout(dir, data);
  const Dataset back = load_dataset_layout(dir);
  ASSERT_EQ(back.records.size(), data.records.size());
  EXPECT_EQ(back.vertex_count(), 20u);
  EXPECT_EQ(back.mask.lip_indices, data.mask.lip_indices);
  EXPECT_EQ(back.mask.upper_indices, data.mask.upper_indices);
  for (std::size_t i = 0; i < data.records.size(); ++i) {
    EXPECT_EQ(back.records[i].split, data.records[i].split);
    EXPECT_EQ(back.records[i].subject_id, data.records[i].subject_id);
    EXPECT_EQ(back.records[i].motion.fps, 60.0);
    EXPECT_LE(oracle::max_abs_diff(back.records[i].motion.values, data.records[i].motion.values), 1e-6);
  }
  EXPECT_THROW(load_dataset_layout(dir, 5023), LoadError);
  EXPECT_THROW(load_vocaset_layout(dir), LoadError);

  // empty manifest -> no records, no error
  { std::ofstream(dir / "manifest.txt") << "# nothing yet\n"; }
  EXPECT_TRUE(load_dataset_layout(dir).records.empty());

  std::filesystem::remove(dir / "template.obj");
  EXPECT_THROW(load_dataset_layout(dir), LoadError);
  std::filesystem::remove_all(dir);
}

TEST(Train, ZeroLearningRateLeavesParameters) {
  RunConfig rc = tiny_run();
  rc.train.adam.lr = 0.0;
  rc.train.epochs = 1;
  const Dataset data = synth_dataset(rc.data.synth);
  Model model(fit_model_to_data(rc.model, data), rc.seed);
  const Vec before = flat_params(model);
  const TrainResult r = train(model, data, rc.train);
  EXPECT_EQ(r.steps, 2u);
  EXPECT_EQ(flat_params(model), before);
}

TEST(Train, SameSeedSameCurve) {
  RunConfig rc = tiny_run();
  const Dataset data = synth_dataset(rc.data.synth);
  const auto dir = temp_dir("curve");
  auto run = [&](const std::string& csv) {
    Model model(fit_model_to_data(rc.model, data), rc.seed);
    TrainConfig tc = rc.train;
    tc.loss_csv = dir / csv;
    const TrainResult r = train(model, data, tc);
    return std::make_pair(r.step_losses, flat_params(model));
  };
  const auto a = run("a.csv"), b = run("b.csv");
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
  EXPECT_EQ(file_bytes(dir / "a.csv"), file_bytes(dir / "b.csv"));
  std::ifstream in(dir / "a.csv");
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "step,train_loss,val_loss");
  std::filesystem::remove_all(dir);
}

TEST(Train, NanLossAbortsWithDiagnostic) {
  RunConfig rc = tiny_run();
  const Dataset data = synth_dataset(rc.data.synth);
  Model model(fit_model_to_data(rc.model, data), rc.seed);
  // a head bias this large squares to infinity in the loss
  model.decoder.head.bias.mutable_data()[0] = 1e200;
  try {
    train(model, data, rc.train);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("step"), std::string::npos) << msg;
  }
}

TEST(Train, NonFiniteMotionRejectedUpFront) {
  RunConfig rc = tiny_run();
  Dataset data = synth_dataset(rc.data.synth);
  for (auto& r : data.records) {
    if (r.split == Split::kTrain) r.motion.values[3] = NAN;
  }
  Model model(fit_model_to_data(rc.model, data), rc.seed);
  const Vec before = flat_params(model);
  EXPECT_THROW(train(model, data, rc.train), NumericError);
  EXPECT_EQ(flat_params(model), before);
}

TEST(Train, ConfigValidation) {
  TrainConfig tc;
  tc.adam.lr = -1.0;
  EXPECT_THROW(tc.validate(), ConfigError);
  tc = TrainConfig{};
  tc.epochs = 0;
  EXPECT_THROW(tc.validate(), ConfigError);
  tc = TrainConfig{};
  tc.batch = 0;
  EXPECT_THROW(tc.validate(), ConfigError);
}

TEST(Adam, SingleStepMatchesHandComputation) {
  Tensor w = Tensor::from({2}, {1.0, -2.0}, true);
  Adam opt({{"w", w}}, AdamConfig{0.1, 0.9, 0.999, 1e-8});
  sum(mul(w, Tensor::from({2}, {3.0, -0.5}))).backward();
  opt.step();
  // first step: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps)
  EXPECT_NEAR(w.at({0}), 1.0 - 0.1 * 3.0 / (3.0 + 1e-8), 1e-15);
  EXPECT_NEAR(w.at({1}), -2.0 + 0.1 * 0.5 / (0.5 + 1e-8), 1e-15);
  EXPECT_EQ(opt.steps(), 1u);
  for (double g : w.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Evaluate, GroundTruthScoresZeroAndMeansAreMeans) {
  const Dataset data = synth_dataset(tiny_run().data.synth);
  const EvalReport gt = evaluate_predictions(data, Split::kTest, data.mask,
                                             [](const DatasetRecord& r) { return r.motion; });
  ASSERT_EQ(gt.sequences.size(), 2u);
  EXPECT_EQ(gt.mean_lve, 0.0);
  EXPECT_EQ(gt.mean_fdd, 0.0);

  const EvalReport zero = evaluate_predictions(data, Split::kTest, data.mask, [](const DatasetRecord& r) {
    return MotionSequence::zeros(r.motion.frames, r.motion.vertices, r.motion.fps);
  });
  double lve_sum = 0.0, fdd_sum = 0.0;
  for (const auto& s : zero.sequences) {
    lve_sum += s.lve;
    fdd_sum += s.fdd;
  }
  EXPECT_NEAR(zero.mean_lve, lve_sum / 2.0, 1e-15);
  EXPECT_NEAR(zero.mean_fdd, fdd_sum / 2.0, 1e-15);
  EXPECT_GT(zero.mean_lve, 0.0);

  // per-sequence values agree with the metric oracles
  const auto test = data.split(Split::kTest);
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto z = MotionSequence::zeros(test[i]->motion.frames, test[i]->motion.vertices);
    EXPECT_NEAR(zero.sequences[i].lve, oracle::lve(z, test[i]->motion, data.mask.lip_indices), 1e-12);
    EXPECT_NEAR(zero.sequences[i].fdd, oracle::fdd(z, test[i]->motion, data.mask.upper_indices), 1e-12);
  }
  const auto j = nlohmann::json::parse(metric_records_json(zero.records()));
  EXPECT_FALSE(j.empty());
  EXPECT_NE(zero.table().find("LVE"), std::string::npos);
}

TEST(Evaluate, MaskVertexMismatchIsAContractError) {
  const RunConfig rc = tiny_run();
  const Dataset data = synth_dataset(rc.data.synth);
  Model model(fit_model_to_data(rc.model, data), rc.seed);
  VertexMask bad = data.mask;
  bad.lip_indices.push_back(500);
  EXPECT_ANY_THROW(evaluate(model, data, Split::kTest, bad));
}

TEST(Evaluate, DoesNotMutateTheCheckpoint) {
  const RunConfig rc = tiny_run();
  const Dataset data = synth_dataset(rc.data.synth);
  Model model(fit_model_to_data(rc.model, data), rc.seed);
  train(model, data, rc.train);
  const auto dir = temp_dir("ckpt");
  save_model(dir / "m.ckpt", model, rc.seed);
  const std::string before = file_bytes(dir / "m.ckpt");
  const Model loaded = load_model(dir / "m.ckpt");
  EXPECT_EQ(flat_params(loaded), flat_params(model));
  const EvalReport r1 = evaluate(loaded, data, Split::kTest, data.mask);
  const EvalReport r2 = evaluate(loaded, data, Split::kTest, data.mask, false);
  save_model(dir / "again.ckpt", loaded, rc.seed);
  EXPECT_EQ(file_bytes(dir / "m.ckpt"), before);
  EXPECT_EQ(file_bytes(dir / "again.ckpt"), before);
  // same numbers from the in-memory model
  EXPECT_EQ(evaluate(model, data, Split::kTest, data.mask).mean_lve, r1.mean_lve);
  EXPECT_TRUE(std::isfinite(r2.mean_lve));
  std::filesystem::remove_all(dir);
}

TEST(Config, IniOverridesAndErrors) {
  const auto dir = temp_dir("ini");
  {
    std::ofstream out(dir / "run.ini");
    out << "[run]\nseed = 9\n[model]\narrangement = MoE-M\nd_model = 24\n[train]\nlr = 0.002\nepochs = 3\n"
           "[moe]\nn_experts = 6\ntop_k = 3\n";
  }
  RunConfig rc = default_run_config();
  apply_ini(rc, dir / "run.ini");
  apply_override(rc, "attention.heads=6");
  rc.sync();
  EXPECT_EQ(rc.seed, 9u);
  EXPECT_EQ(rc.train.seed, 9u);
  EXPECT_EQ(rc.model.decoder.arrangement, Arrangement::kMoeMamba);
  EXPECT_EQ(rc.model.decoder.d_model, 24u);
  EXPECT_EQ(rc.model.decoder.mamba.d_model, 24u);
  EXPECT_EQ(rc.model.decoder.attention.n_query_heads, 6u);
  EXPECT_EQ(rc.model.decoder.moe.n_experts, 6u);
  EXPECT_DOUBLE_EQ(rc.train.adam.lr, 0.002);
  EXPECT_EQ(rc.train.epochs, 3u);
  EXPECT_EQ(rc.model.decoder.ppe_period, 30u);

  // to_ini round trip
  { std::ofstream(dir / "dump.ini") << to_ini(rc); }
  RunConfig again = default_run_config();
  apply_ini(again, dir / "dump.ini");
  again.sync();
  EXPECT_EQ(to_ini(again), to_ini(rc));

  EXPECT_THROW(apply_override(rc, "model.bogus=1"), ConfigError);
  EXPECT_THROW(apply_override(rc, "model.d_model"), ConfigError);
  EXPECT_THROW(apply_override(rc, "model.d_model=abc"), ConfigError);
  EXPECT_THROW(apply_override(rc, "model.arrangement=X-Y"), ConfigError);
  { std::ofstream(dir / "bad.ini") << "[train]\nlearning_rate = 1\n"; }
  EXPECT_THROW(apply_ini(rc, dir / "bad.ini"), ConfigError);
  std::filesystem::remove_all(dir);
}

TEST(Ablate, FourLabelledRowsFromIdenticalSeeds) {
  RunConfig rc = tiny_run();
  rc.train.epochs = 1;
  const Dataset data = synth_dataset(rc.data.synth);
  const auto rows = ablate(rc, data);
  ASSERT_EQ(rows.size(), 4u);
  const std::vector<std::string> labels{"M-MoE", "MoE-MoE", "M-M", "MoE-M"};
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(rows[i].label, labels[i]);
    EXPECT_TRUE(rows[i].ok) << rows[i].error;
    EXPECT_GT(rows[i].epoch_seconds, 0.0);
    EXPECT_EQ(rows[i].ppe_period, 30u);
    EXPECT_TRUE(std::isfinite(rows[i].lve));
  }
  const std::string table = ablation_table(rows);
  for (const char* col : {"Decoder", "LVE", "FDD", "Training Time (per epoch)"}) {
    EXPECT_NE(table.find(col), std::string::npos) << col;
  }
  const auto j = nlohmann::json::parse(ablation_json(rows));
  EXPECT_EQ(j.size(), 4u);

  // shared weights: everything outside the arrangement-specific channel mixers
  ParamList pa, pb;
  Model a(fit_model_to_data(rc.model, data), rc.seed);
  RunConfig rb = rc;
  rb.model.decoder.arrangement = Arrangement::kMoeMoe;
  Model b(fit_model_to_data(rb.model, data), rb.seed);
  a.collect(pa);
  b.collect(pb);
  std::size_t shared = 0;
  for (const auto& p : pa) {
    for (const auto& q : pb) {
      if (p.key == q.key) {
        EXPECT_EQ(p.tensor.to_vector(), q.tensor.to_vector()) << p.key;
        ++shared;
      }
    }
  }
  EXPECT_GT(shared, pa.size() / 2);
}

TEST(Ablate, FailingRowIsAnnotated) {
  RunConfig rc = tiny_run();
  rc.train.epochs = 1;
  Dataset data = synth_dataset(rc.data.synth);
  for (auto& r : data.records) r.motion.values[0] = NAN;
  const auto rows = ablate(rc, data);
  ASSERT_EQ(rows.size(), 4u);
  for (const auto& r : rows) EXPECT_FALSE(r.ok);
  EXPECT_NE(ablation_table(rows).find("FAILED"), std::string::npos);
}

TEST(Benchmark, MemoryShapeAndParameterAudit) {
  Model model(toy_model_config(Arrangement::kMoeMoe), 4);
  const std::vector<std::size_t> lengths{8, 16, 32};
  const BenchmarkReport rep = benchmark(model, lengths);
  ASSERT_EQ(rep.rows.size(), 3u);
  for (const auto& r : rep.rows) {
    EXPECT_EQ(r.ssm_state_bytes, rep.rows[0].ssm_state_bytes);
    EXPECT_EQ(r.kv_cache_bytes, r.length * rep.kv_bytes_per_token);
    EXPECT_GT(r.tokens_per_second, 0.0);
  }
  EXPECT_EQ(rep.kv_bytes_per_token, 4u * 2u * 2u * sizeof(double));
  EXPECT_EQ(rep.moe_layer_active, rep.moe_router_params + rep.top_k * rep.expert_params);
  EXPECT_EQ(rep.moe_layer_total, rep.moe_router_params + rep.n_experts * rep.expert_params);
  EXPECT_LT(rep.active_params, rep.total_params);
  EXPECT_THROW(benchmark(model, std::vector<std::size_t>{8}), ConfigError);
  EXPECT_FALSE(nlohmann::json::parse(benchmark_json(rep)).empty());
}

TEST(LearningSignal, TruePairingBeatsShuffledPairing) {
  RunConfig rc = tiny_run(5);
  rc.data.synth.n_sentences = 4;
  rc.data.synth.frames = 16;
  rc.train.adam.lr = 3e-3;
  rc.train.epochs = 60;
  rc.sync();
  const Dataset data = synth_dataset(rc.data.synth);
  Dataset shuffled = data;
  // pair each training record's motion with another sentence's audio
  std::vector<std::size_t> train_idx;
  for (std::size_t i = 0; i < data.records.size(); ++i) {
    if (data.records[i].split == Split::kTrain) train_idx.push_back(i);
  }
  ASSERT_GE(train_idx.size(), 2u);
  for (std::size_t j = 0; j < train_idx.size(); ++j) {
    shuffled.records[train_idx[j]].features = data.records[train_idx[(j + 1) % train_idx.size()]].features;
  }
  auto final_loss = [&](const Dataset& d) {
    Model model(fit_model_to_data(rc.model, d), rc.seed);
    train(model, d, rc.train);
    return split_loss(model, d, Split::kTrain);
  };
  const double true_loss = final_loss(data);
  const double shuffled_loss = final_loss(shuffled);
  EXPECT_LT(true_loss, shuffled_loss) << "true " << true_loss << " shuffled " << shuffled_loss;
}
