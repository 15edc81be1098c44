#include <gtest/gtest.h>

#include <cmath>

#include "jambatalk/attention.hpp"
#include "jambatalk/gradcheck.hpp"
#include "oracles.hpp"

using namespace jambatalk;
using oracle::random_tensor;
using oracle::Vec;

namespace {

AttentionConfig toy_attention(std::size_t heads = 4, std::size_t groups = 2, std::size_t d = 16) {
  AttentionConfig c;
  c.d_model = d;
  c.n_query_heads = heads;
  c.n_kv_groups = groups;
  c.d_ff = 24;
  return c;
}

double norm2(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace

TEST(Rope, Thetas) {
  const auto th = rope_thetas(8);
  ASSERT_EQ(th.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(th[i], std::pow(10000.0, -2.0 * i / 8.0), 1e-18);
  EXPECT_EQ(th[0], 1.0);
  EXPECT_THROW(rope_thetas(7), ConfigError);
}

TEST(Rope, PositionZeroIsIdentity) {
  Rng rng(1);
  Tensor x = random_tensor(rng, {3, 5, 8});
  EXPECT_EQ(rope_rotate(x, std::size_t{0}).to_vector(), x.to_vector());
}

TEST(Rope, AnalyticRotation) {
  Tensor x = Tensor::from({1, 2}, {1.0, 0.0});
  Tensor y = rope_rotate(x, std::size_t{1});
  EXPECT_NEAR(y.at({0, 0}), std::cos(1.0), 1e-15);
  EXPECT_NEAR(y.at({0, 1}), std::sin(1.0), 1e-15);
  EXPECT_THROW(rope_rotate(Tensor::zeros({1, 3}), std::size_t{1}), ConfigError);
}

TEST(Rope, MatchesPairRotationOracle) {
  Rng rng(2);
  const std::size_t T = 6, hd = 8;
  Tensor x = random_tensor(rng, {2, T, hd});
  std::vector<std::size_t> pos{0, 3, 7, 100, 4096, 5};
  Tensor y = rope_rotate(x, pos);
  Vec want = x.to_vector();
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t t = 0; t < T; ++t) oracle::rotate_pairs(&want[(b * T + t) * hd], hd, pos[t], 10000.0);
  }
  EXPECT_LE(oracle::max_abs_diff(y.data(), want), 1e-13);
}

TEST(Rope, PreservesNorm) {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t hd = 2 * (1 + rng.index(16));
    Tensor x = random_tensor(rng, {1, hd}, 5.0);
    Tensor y = rope_rotate(x, rng.index(100000));
    EXPECT_NEAR(norm2(y.data()), norm2(x.data()), 1e-12 * std::max(1.0, norm2(x.data())));
  }
}

TEST(Rope, InnerProductDependsOnlyOnOffset) {
  Rng rng(4);
  const Vec q0 = oracle::random_values(rng, 16), k0 = oracle::random_values(rng, 16);
  EXPECT_TRUE(rope_relative_property_check(q0, k0, 5, 9, 0));
  EXPECT_TRUE(rope_relative_property_check(q0, k0, 3, 7, 11));
  // direct evaluation of both sides
  auto dot_at = [&](std::size_t m, std::size_t n) {
    Vec q = q0, k = k0;
    oracle::rotate_pairs(q.data(), 16, m, 10000.0);
    oracle::rotate_pairs(k.data(), 16, n, 10000.0);
    double s = 0.0;
    for (std::size_t i = 0; i < 16; ++i) s += q[i] * k[i];
    return s;
  };
  EXPECT_NEAR(dot_at(3, 7), dot_at(14, 18), 1e-9);
  for (int trial = 0; trial < 100; ++trial) {
    const Vec q = oracle::random_values(rng, 16), k = oracle::random_values(rng, 16);
    EXPECT_TRUE(rope_relative_property_check(q, k, rng.index(200), rng.index(200), rng.index(200)));
  }
  // sanity: the check can fail, a different offset changes the product
  Vec q1 = oracle::random_values(rng, 4), k1 = oracle::random_values(rng, 4);
  Vec qa = q1, ka = k1, qb = q1, kb = k1;
  oracle::rotate_pairs(qa.data(), 4, 0, 10000.0);
  oracle::rotate_pairs(ka.data(), 4, 1, 10000.0);
  oracle::rotate_pairs(qb.data(), 4, 0, 10000.0);
  oracle::rotate_pairs(kb.data(), 4, 2, 10000.0);
  double da = 0, db = 0;
  for (int i = 0; i < 4; ++i) {
    da += qa[i] * ka[i];
    db += qb[i] * kb[i];
  }
  EXPECT_GT(std::abs(da - db), 1e-6);
}

TEST(Pool, MeansWithinGroups) {
  Tensor same = Tensor::from({3, 2}, {1, 2, 1, 2, 1, 2});
  EXPECT_EQ(mha_to_gqa_pool(same, 1).to_vector(), (Vec{1, 2}));
  EXPECT_EQ(mha_to_gqa_pool(Tensor::from({2, 2}, {1, 0, 0, 1}), 1).to_vector(), (Vec{0.5, 0.5}));
  EXPECT_THROW(mha_to_gqa_pool(Tensor::zeros({6, 2}), 4), ConfigError);

  Rng rng(5);
  Tensor heads = random_tensor(rng, {8, 12});
  Tensor pooled = mha_to_gqa_pool(heads, 2);
  ASSERT_EQ(pooled.shape(), (Shape{2, 12}));
  for (std::size_t g = 0; g < 2; ++g) {
    for (std::size_t p = 0; p < 12; ++p) {
      double s = 0.0;
      for (std::size_t h = 4 * g; h < 4 * g + 4; ++h) s += heads.at({h, p});
      EXPECT_EQ(pooled.at({g, p}), s / 4.0);
    }
  }
}

TEST(Transformer, ConfigValidation) {
  EXPECT_THROW(toy_attention(3, 1, 16).validate(), ConfigError);  // 16 % 3
  EXPECT_THROW(toy_attention(4, 3, 16).validate(), ConfigError);  // 4 % 3
  EXPECT_THROW(toy_attention(4, 2, 12).validate(), ConfigError);  // head_dim 3
  EXPECT_NO_THROW(toy_attention().validate());
}

TEST(Transformer, GroupedQueryMatchesLoopOracle) {
  Rng rng(6);
  const std::size_t B = 2, T = 7;
  struct Case {
    std::size_t heads, groups;
  };
  for (Case c : {Case{4, 4}, Case{4, 1}, Case{4, 2}}) {
    TransformerBlock blk(toy_attention(c.heads, c.groups), 7, "t");
    Tensor x = random_tensor(rng, {B, T, 16});
    const std::size_t share = c.heads / c.groups;
    const Vec want = oracle::transformer_block(blk, x.to_vector(), B, T, [&](std::size_t h) { return h / share; });
    EXPECT_LE(oracle::max_abs_diff(blk.forward(x).data(), want), 1e-12) << c.heads << "/" << c.groups;
  }
  // MHA explicitly as identity mapping, MQA as all-zero mapping
  TransformerBlock mha(toy_attention(4, 4), 8, "t");
  TransformerBlock mqa(toy_attention(4, 1), 8, "t");
  Tensor x = random_tensor(rng, {1, 5, 16});
  EXPECT_LE(oracle::max_abs_diff(mha.forward(x).data(),
                                 oracle::transformer_block(mha, x.to_vector(), 1, 5, [](std::size_t h) { return h; })),
            1e-12);
  EXPECT_LE(oracle::max_abs_diff(mqa.forward(x).data(),
                                 oracle::transformer_block(mqa, x.to_vector(), 1, 5, [](std::size_t) { return 0; })),
            1e-12);
}

TEST(Transformer, AttentionWeightsAreCausalDistributions) {
  TransformerBlock blk(toy_attention(), 9, "t");
  Rng rng(10);
  AttentionTrace trace;
  blk.forward(random_tensor(rng, {2, 9, 16}, 3.0), nullptr, &trace);
  const Tensor& w = trace.weights;
  ASSERT_EQ(w.shape(), (Shape{2, 4, 9, 9}));
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t h = 0; h < 4; ++h) {
      for (std::size_t i = 0; i < 9; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < 9; ++j) {
          if (j > i) EXPECT_EQ(w.at({b, h, i, j}), 0.0);
          s += w.at({b, h, i, j});
        }
        EXPECT_NEAR(s, 1.0, 1e-12);
      }
    }
  }
  // single position: all weight on it
  AttentionTrace one;
  blk.forward(random_tensor(rng, {1, 1, 16}), nullptr, &one);
  for (double v : one.weights.data()) EXPECT_EQ(v, 1.0);
}

TEST(Transformer, CausalMask) {
  TransformerBlock blk(toy_attention(), 11, "t");
  Rng rng(12);
  const std::size_t T = 10;
  for (int trial = 0; trial < 10; ++trial) {
    Tensor x = random_tensor(rng, {1, T, 16});
    const std::size_t cut = rng.index(T - 1);
    Vec changed = x.to_vector();
    for (std::size_t i = (cut + 1) * 16; i < changed.size(); ++i) changed[i] = rng.uniform(-3, 3);
    const Vec a = slice(blk.forward(x), 1, 0, cut + 1).to_vector();
    const Vec b = slice(blk.forward(Tensor::from({1, T, 16}, changed)), 1, 0, cut + 1).to_vector();
    EXPECT_LE(oracle::max_abs_diff(a, b), 1e-12);
  }
}

TEST(Transformer, CachedDecodingMatchesFullForward) {
  TransformerBlock blk(toy_attention(), 13, "t");
  Rng rng(14);
  const std::size_t B = 2, T = 11;
  Tensor x = random_tensor(rng, {B, T, 16});
  const Tensor full = blk.forward(x);
  KvCache cache = blk.make_cache(B, T);
  for (std::size_t t = 0; t < T; ++t) {
    Tensor y = blk.forward(slice(x, 1, t, 1), &cache);
    EXPECT_LE(oracle::max_abs_diff(y, slice(full, 1, t, 1)), 1e-10) << "t=" << t;
  }
  EXPECT_EQ(cache.length(), T);
  EXPECT_THROW(blk.forward(slice(x, 1, 0, 1), &cache), ContractError);

  // mixed chunk sizes
  KvCache c2 = blk.make_cache(B, T);
  blk.forward(slice(x, 1, 0, 4), &c2);
  Tensor rest = blk.forward(slice(x, 1, 4, 7), &c2);
  EXPECT_LE(oracle::max_abs_diff(rest, slice(full, 1, 4, 7)), 1e-10);
}

TEST(Transformer, CacheBytesGrowLinearly) {
  TransformerBlock blk(toy_attention(), 15, "t");
  KvCache cache = blk.make_cache(1, 100);
  Rng rng(16);
  std::vector<std::size_t> sizes;
  for (int t = 0; t < 5; ++t) {
    blk.forward(random_tensor(rng, {1, 1, 16}), &cache);
    sizes.push_back(cache.bytes());
  }
  // groups * head_dim * (k + v) * 8 bytes per position
  for (std::size_t t = 0; t < 5; ++t) EXPECT_EQ(sizes[t], (t + 1) * 2 * 4 * 2 * sizeof(double));
}

TEST(Transformer, PooledKvParamsScaleWithGroups) {
  TransformerBlock mha(toy_attention(4, 4), 17, "t");
  TransformerBlock gqa = mha.with_pooled_kv(2);
  TransformerBlock mqa = mha.with_pooled_kv(1);
  EXPECT_EQ(gqa.kv_param_count() * 4, mha.kv_param_count() * 2);
  EXPECT_EQ(mqa.kv_param_count() * 4, mha.kv_param_count());
  EXPECT_THROW(mha.with_pooled_kv(3), ConfigError);

  // pooled weights are the mean of member heads' columns
  const std::size_t hd = 4;
  for (std::size_t r = 0; r < 16; ++r) {
    for (std::size_t g = 0; g < 2; ++g) {
      for (std::size_t j = 0; j < hd; ++j) {
        const double want = 0.5 * (mha.wk.weight.at({r, (2 * g) * hd + j}) + mha.wk.weight.at({r, (2 * g + 1) * hd + j}));
        EXPECT_EQ(gqa.wk.weight.at({r, g * hd + j}), want);
      }
    }
  }
  // identical heads make pooling lossless
  auto w = mha.wk.weight.mutable_data();
  auto wv = mha.wv.weight.mutable_data();
  for (std::size_t r = 0; r < 16; ++r) {
    for (std::size_t h = 1; h < 4; ++h) {
      for (std::size_t j = 0; j < hd; ++j) {
        w[r * 16 + h * hd + j] = w[r * 16 + j];
        wv[r * 16 + h * hd + j] = wv[r * 16 + j];
      }
    }
  }
  Rng rng(18);
  Tensor x = random_tensor(rng, {1, 6, 16});
  EXPECT_LE(oracle::max_abs_diff(mha.forward(x), mha.with_pooled_kv(1).forward(x)), 1e-12);
}

TEST(Transformer, GradientCheck) {
  AttentionConfig cfg = toy_attention(2, 1, 8);
  cfg.d_ff = 6;
  TransformerBlock blk(cfg, 19, "t");
  Rng rng(20);
  Tensor x = random_tensor(rng, {2, 4, 8});
  Tensor target = random_tensor(rng, {2, 4, 8});
  ParamList ps;
  blk.collect("t", ps);
  auto r = finite_diff_check_params([&] { return mse_loss(blk.forward(x), target); }, ps);
  EXPECT_LT(r.max_error, 1e-4) << r.worst_key;
  EXPECT_LT(finite_diff_check([&](const Tensor& v) { return mse_loss(blk.forward(v), target); }, x), 1e-4);
}

TEST(Transformer, CheckpointKeys) {
  TransformerBlock blk(toy_attention(), 21, "t");
  ParamList ps;
  blk.collect("layer3", ps);
  bool attn = false, ffn = false;
  for (const auto& p : ps) {
    attn = attn || p.key.rfind("layer3.attn.", 0) == 0;
    ffn = ffn || p.key.rfind("layer3.ffn.", 0) == 0;
  }
  EXPECT_TRUE(attn);
  EXPECT_TRUE(ffn);
}
