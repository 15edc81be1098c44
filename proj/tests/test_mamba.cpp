#include <gtest/gtest.h>

#include <cmath>

#include "jambatalk/gradcheck.hpp"
#include "jambatalk/mamba.hpp"
#include "oracles.hpp"

using namespace jambatalk;
using oracle::random_tensor;
using oracle::Vec;

namespace {

MambaConfig toy_config(std::size_t d = 8, std::size_t n = 4) {
  MambaConfig c;
  c.d_model = d;
  c.state_dim = n;
  return c;
}

// Larger weights than the init so the scan actually carries signal.
void scramble(const MambaBlock& blk, std::uint64_t seed) {
  ParamList ps;
  blk.collect("m", ps);
  Rng rng(seed);
  for (auto& p : ps) {
    if (p.key == "m.A_log") continue;
    for (auto& v : p.tensor.mutable_data()) v = rng.uniform(-0.5, 0.5);
  }
}

double scaled_diff(const Vec& got, const Vec& want) {
  double scale = 1.0;
  for (double v : want) scale = std::max(scale, std::abs(v));
  return oracle::max_abs_diff(got, want) / scale;
}

}  // namespace

TEST(Discretize, AnalyticLanes) {
  auto d = ssm::discretize_lane(-1.0, 1.0, std::log(2.0));
  EXPECT_NEAR(d.a_bar, 0.5, 1e-15);
  EXPECT_NEAR(d.b_bar, 0.5, 1e-15);

  d = ssm::discretize_lane(-2.0, 1.0, 1.0);
  EXPECT_NEAR(d.a_bar, std::exp(-2.0), 1e-15);
  EXPECT_NEAR(d.b_bar, (1.0 - std::exp(-2.0)) / 2.0, 1e-15);

  d = ssm::discretize_lane(-1.0, 1.0, 1e-6);
  EXPECT_NEAR(d.a_bar, 1.0 - 1e-6, 1e-9);
  EXPECT_NEAR(d.b_bar, 1e-6, 1e-9);

  // inside the series guard
  d = ssm::discretize_lane(-1.0, 3.0, 1e-10);
  EXPECT_NEAR(d.b_bar, 3e-10, 1e-18);
}

TEST(Discretize, RejectsNonPositiveDelta) {
  EXPECT_THROW(ssm::discretize_lane(-1.0, 1.0, 0.0), ContractError);
  EXPECT_THROW(ssm::discretize_lane(-1.0, 1.0, -0.1), ContractError);
  EXPECT_THROW(ssm::discretize_lane(-1.0, 1.0, NAN), ContractError);
  Tensor a = Tensor::full({2, 3}, -1.0);
  Tensor b = Tensor::full({1, 3}, 1.0);
  EXPECT_THROW(ssm::discretize(a, b, Tensor::from({1, 2}, {0.1, 0.0})), ContractError);
}

TEST(Discretize, TensorFormMatchesPlainExp) {
  Rng rng(11);
  const std::size_t B = 2, E = 3, N = 5;
  Tensor a = Tensor::from({E, N}, oracle::random_values(rng, E * N, -4.0, -0.05));
  Tensor b = random_tensor(rng, {B, N});
  Tensor delta = Tensor::from({B, E}, oracle::random_values(rng, B * E, 1e-3, 2.0));
  auto d = ssm::discretize(a, b, delta);
  for (std::size_t i = 0; i < B; ++i) {
    for (std::size_t e = 0; e < E; ++e) {
      for (std::size_t n = 0; n < N; ++n) {
        auto [ab, bb] = oracle::zoh(a.at({e, n}), b.at({i, n}), delta.at({i, e}));
        EXPECT_NEAR(d.a_bar.at({i, e, n}), ab, 1e-14);
        EXPECT_NEAR(d.b_bar.at({i, e, n}), bb, 1e-13);
      }
    }
  }
}

TEST(Discretize, StableForAnyPositiveDelta) {
  Rng rng(12);
  for (int trial = 0; trial < 1000; ++trial) {
    const double a = -std::exp(rng.uniform(-5.0, 3.0));
    const double delta = std::exp(rng.uniform(-12.0, 2.0));
    const auto d = ssm::discretize_lane(a, 1.0, delta);
    EXPECT_GT(d.a_bar, 0.0);
    EXPECT_LT(d.a_bar, 1.0);
  }
}

namespace {

ssm::ScanInputs constant_scan(std::size_t T, double a_bar, double b_bar, Vec x) {
  ssm::ScanInputs in;
  in.a_bar = Tensor::full({1, T, 1, 1}, a_bar);
  in.b_bar = Tensor::full({1, T, 1, 1}, b_bar);
  in.c = Tensor::full({1, T, 1}, 1.0);
  in.x = Tensor::from({1, T, 1}, std::move(x));
  return in;
}

}  // namespace

TEST(SelectiveScan, ImpulseDecaysGeometrically) {
  Vec x(8, 0.0);
  x[0] = 1.0;
  for (auto mode : {ScanMode::kSequential, ScanMode::kChunked}) {
    auto out = ssm::selective_scan(constant_scan(8, 0.5, 1.0, x), mode, 3);
    for (std::size_t t = 0; t < 8; ++t) EXPECT_NEAR(out.y.at({0, t, 0}), std::pow(0.5, t), 1e-15);
  }
}

TEST(SelectiveScan, StepResponseApproachesOne) {
  const std::size_t T = 40;
  auto out = ssm::selective_scan(constant_scan(T, 0.5, 0.5, Vec(T, 1.0)));
  for (std::size_t t = 0; t < T; ++t) EXPECT_NEAR(out.y.at({0, t, 0}), 1.0 - std::pow(0.5, t + 1), 1e-15);
}

TEST(SelectiveScan, LengthMismatchIsAContractError) {
  auto in = constant_scan(5, 0.5, 1.0, Vec(5, 1.0));
  in.c = Tensor::full({1, 4, 1}, 1.0);
  EXPECT_THROW(ssm::selective_scan(in), ContractError);
}

TEST(SelectiveScan, ChunkedMatchesRecurrenceOnRandomConfigs) {
  Rng rng(21);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t B = 1 + rng.index(2), T = 1 + rng.index(128), E = 1 + rng.index(4), N = 16;
    ssm::ScanInputs in;
    const Vec ab = oracle::random_values(rng, B * T * E * N, 0.0, 1.0);
    const Vec bb = oracle::random_values(rng, B * T * E * N);
    const Vec c = oracle::random_values(rng, B * T * N);
    const Vec x = oracle::random_values(rng, B * T * E);
    const Vec h0 = oracle::random_values(rng, B * E * N);
    in.a_bar = Tensor::from({B, T, E, N}, ab);
    in.b_bar = Tensor::from({B, T, E, N}, bb);
    in.c = Tensor::from({B, T, N}, c);
    in.x = Tensor::from({B, T, E}, x);
    in.h0 = Tensor::from({B, E, N}, h0);
    const auto want = oracle::recurrence(ab, bb, c, x, h0, B, T, E, N);
    const std::size_t chunk = 1 + rng.index(20);
    const auto seq = ssm::selective_scan(in, ScanMode::kSequential);
    const auto par = ssm::selective_scan(in, ScanMode::kChunked, chunk);
    EXPECT_LE(scaled_diff(seq.y.to_vector(), want.y), 1e-12);
    worst = std::max(worst, scaled_diff(par.y.to_vector(), want.y));
    worst = std::max(worst, scaled_diff(par.h_final.to_vector(), want.h));
  }
  EXPECT_LE(worst, 1e-10);
}

TEST(SelectiveScan, FusedGradientsMatchFiniteDifferences) {
  Rng rng(31);
  const std::size_t B = 2, T = 7, E = 3, N = 4;
  Tensor u = random_tensor(rng, {B, T, E});
  Tensor delta = Tensor::from({B, T, E}, oracle::random_values(rng, B * T * E, 0.05, 1.0));
  Tensor a = Tensor::from({E, N}, oracle::random_values(rng, E * N, -3.0, -0.2));
  Tensor b = random_tensor(rng, {B, T, N});
  Tensor c = random_tensor(rng, {B, T, N});
  const Vec h0 = oracle::random_values(rng, B * E * N);
  for (auto mode : {ScanMode::kSequential, ScanMode::kChunked}) {
    auto loss = [&](const Tensor& uu, const Tensor& dd, const Tensor& aa, const Tensor& bb, const Tensor& cc) {
      return sum(square(ssm::selective_scan_fused(uu, dd, aa, bb, cc, h0, nullptr, mode, 3)));
    };
    EXPECT_LT(finite_diff_check([&](const Tensor& v) { return loss(v, delta, a, b, c); }, u), 1e-6);
    EXPECT_LT(finite_diff_check([&](const Tensor& v) { return loss(u, v, a, b, c); }, delta), 1e-6);
    EXPECT_LT(finite_diff_check([&](const Tensor& v) { return loss(u, delta, v, b, c); }, a), 1e-6);
    EXPECT_LT(finite_diff_check([&](const Tensor& v) { return loss(u, delta, a, v, c); }, b), 1e-6);
    EXPECT_LT(finite_diff_check([&](const Tensor& v) { return loss(u, delta, a, b, v); }, c), 1e-6);
  }
}

TEST(MambaBlock, InitialisationFacts) {
  MambaBlock blk(toy_config(8, 16), 1, "m");
  Tensor a = blk.realized_a();
  ASSERT_EQ(a.shape(), (Shape{16, 16}));
  for (std::size_t e = 0; e < 16; ++e) {
    for (std::size_t n = 0; n < 16; ++n) EXPECT_NEAR(a.at({e, n}), -static_cast<double>(n + 1), 1e-12);
  }
  // softplus(bias) lands in [dt_min, dt_max]
  Tensor dt = softplus(blk.proj_delta.bias);
  for (double v : dt.data()) {
    EXPECT_GE(v, 1e-3 - 1e-15);
    EXPECT_LE(v, 1e-1 + 1e-15);
  }
  MambaConfig bad = toy_config();
  bad.dt_min = 0.0;
  EXPECT_THROW(MambaBlock(bad, 1, "m"), ConfigError);
}

TEST(MambaBlock, SelectParams) {
  MambaBlock blk(toy_config(), 2, "m");
  zero_params({{"w", blk.proj_delta.weight}, {"b", blk.proj_delta.bias}});
  Rng rng(3);
  Tensor u = random_tensor(rng, {2, 5, 16});
  auto p = blk.select_params(u);
  for (double v : p.delta.data()) EXPECT_NEAR(v, std::log(2.0), 1e-15);

  for (auto& v : blk.proj_delta.bias.mutable_data()) v = -1.3;
  p = blk.select_params(Tensor::zeros({1, 16}));
  for (double v : p.delta.data()) EXPECT_NEAR(v, std::log1p(std::exp(-1.3)), 1e-15);

  scramble(blk, 4);
  p = blk.select_params(u);
  const Vec uv = u.to_vector();
  Vec want_delta = oracle::linear(uv, 10, blk.proj_delta);
  for (auto& v : want_delta) v = oracle::softplus(v);
  EXPECT_LE(oracle::max_abs_diff(p.delta.data(), want_delta), 1e-14);
  EXPECT_LE(oracle::max_abs_diff(p.b.data(), oracle::linear(uv, 10, blk.proj_b)), 1e-14);
  EXPECT_LE(oracle::max_abs_diff(p.c.data(), oracle::linear(uv, 10, blk.proj_c)), 1e-14);
}

TEST(MambaBlock, ZeroWeightsGiveResidualIdentity) {
  MambaBlock blk(toy_config(), 5, "m");
  ParamList ps;
  blk.collect("m", ps);
  zero_params(ps);
  Rng rng(6);
  Tensor x = random_tensor(rng, {2, 6, 8});
  EXPECT_EQ(blk.forward(x).to_vector(), x.to_vector());
}

TEST(MambaBlock, ZeroInputGivesZeroOutput) {
  // norm(0) = 0, so the gate is silu(0) = 0 and only the residual remains
  MambaBlock blk(toy_config(), 7, "m");
  scramble(blk, 8);
  for (auto& v : blk.conv_bias.mutable_data()) v = 0.0;
  MambaState s = MambaState::zeros(blk.config(), 1);
  for (int t = 0; t < 5; ++t) {
    Tensor y = blk.step(Tensor::zeros({1, 8}), s);
    for (double v : y.data()) EXPECT_EQ(v, 0.0);
  }
}

TEST(MambaBlock, ForwardMatchesLoopOracle) {
  Rng rng(9);
  for (auto mode : {ScanMode::kSequential, ScanMode::kChunked}) {
    MambaConfig cfg = toy_config(8, 16);
    cfg.scan_mode = mode;
    cfg.scan_chunk = 4;
    MambaBlock blk(cfg, 10, "m");
    scramble(blk, 11);
    const std::size_t B = 2, T = 13;
    Tensor x = random_tensor(rng, {B, T, 8});
    const Vec want = oracle::mamba_block(blk, x.to_vector(), B, T);
    EXPECT_LE(scaled_diff(blk.forward(x).to_vector(), want), 1e-12);
  }
}

TEST(MambaBlock, StepReplayMatchesBatchForward) {
  MambaBlock blk(toy_config(8, 4), 12, "m");
  scramble(blk, 13);
  Rng rng(14);
  const std::size_t B = 2, T = 6;
  Tensor x = random_tensor(rng, {B, T, 8});
  const Tensor full = blk.forward(x);
  MambaState s = MambaState::zeros(blk.config(), B);
  for (std::size_t t = 0; t < T; ++t) {
    Tensor y = blk.step(reshape(slice(x, 1, t, 1), {B, 8}), s);
    Tensor want = reshape(slice(full, 1, t, 1), {B, 8});
    EXPECT_LE(oracle::max_abs_diff(y, want), 1e-10) << "step " << t;
  }
  // resuming a chunked prefix from state gives the same tail
  MambaState s2 = MambaState::zeros(blk.config(), B);
  blk.forward(slice(x, 1, 0, 4), &s2);
  Tensor rest = blk.forward(slice(x, 1, 4, 2), &s2);
  EXPECT_LE(oracle::max_abs_diff(rest, slice(full, 1, 4, 2)), 1e-10);
}

TEST(MambaBlock, StateSizeIsIndependentOfSteps) {
  MambaBlock blk(toy_config(), 15, "m");
  Rng rng(16);
  MambaState a = MambaState::zeros(blk.config(), 1);
  MambaState b = MambaState::zeros(blk.config(), 1);
  for (int t = 0; t < 10; ++t) blk.step(random_tensor(rng, {1, 8}), a);
  for (int t = 0; t < 1000; ++t) blk.step(random_tensor(rng, {1, 8}), b);
  EXPECT_EQ(a.bytes(), b.bytes());
  for (double v : b.h) EXPECT_TRUE(std::isfinite(v));
}

TEST(MambaBlock, StaleStateIsRejected) {
  MambaBlock blk(toy_config(), 17, "m");
  MambaState other = MambaState::zeros(toy_config(8, 8), 1);
  EXPECT_THROW(blk.step(Tensor::zeros({1, 8}), other), ContractError);
  MambaState wrong_batch = MambaState::zeros(blk.config(), 2);
  EXPECT_THROW(blk.step(Tensor::zeros({1, 8}), wrong_batch), ContractError);
}

TEST(MambaBlock, StrictlyCausal) {
  Rng rng(18);
  for (auto mode : {ScanMode::kSequential, ScanMode::kChunked}) {
    MambaConfig cfg = toy_config(8, 16);
    cfg.scan_mode = mode;
    cfg.scan_chunk = 5;
    MambaBlock blk(cfg, 19, "m");
    scramble(blk, 20);
    const std::size_t T = 24;
    for (int trial = 0; trial < 10; ++trial) {
      Tensor x = random_tensor(rng, {1, T, 8});
      const std::size_t cut = rng.index(T - 1);
      Vec changed = x.to_vector();
      for (std::size_t i = (cut + 1) * 8; i < changed.size(); ++i) changed[i] += rng.uniform(-2.0, 2.0);
      const Tensor y0 = blk.forward(x);
      const Tensor y1 = blk.forward(Tensor::from({1, T, 8}, changed));
      const Vec a = slice(y0, 1, 0, cut + 1).to_vector();
      const Vec b = slice(y1, 1, 0, cut + 1).to_vector();
      if (mode == ScanMode::kSequential) {
        EXPECT_EQ(a, b);
      } else {
        EXPECT_LE(oracle::max_abs_diff(a, b), 1e-12);
      }
    }
  }
}

TEST(MambaBlock, GradientCheck) {
  for (auto mode : {ScanMode::kSequential, ScanMode::kChunked}) {
    MambaConfig cfg = toy_config(4, 3);
    cfg.scan_mode = mode;
    cfg.scan_chunk = 2;
    MambaBlock blk(cfg, 21, "m");
    scramble(blk, 22);
    Rng rng(23);
    Tensor x = random_tensor(rng, {2, 5, 4}, 1.0, true);
    Tensor target = random_tensor(rng, {2, 5, 4});
    ParamList ps;
    blk.collect("m", ps);
    auto r = finite_diff_check_params([&] { return mse_loss(blk.forward(x), target); }, ps);
    EXPECT_LT(r.max_error, 1e-4) << r.worst_key << "[" << r.worst_index << "]";
    EXPECT_LT(finite_diff_check([&](const Tensor& v) { return mse_loss(blk.forward(v), target); }, x), 1e-4);
  }
}

TEST(MambaBlock, CheckpointKeys) {
  MambaBlock blk(toy_config(), 24, "m");
  ParamList ps;
  blk.collect("layer0.ssm", ps);
  for (const auto& p : ps) EXPECT_EQ(p.key.rfind("layer0.ssm.", 0), 0u) << p.key;
  EXPECT_GT(count_params(ps), 0u);
}
