#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "jambatalk/tensor.hpp"

namespace jambatalk {

struct NamedTensor {
  std::string key;
  Tensor tensor;
};

using ParamList = std::vector<NamedTensor>;

std::size_t count_params(const ParamList& params);

// Seeded generator. `derive` gives every parameter path its own stream, so a
// tensor's initial values depend only on (seed, path) and not on which other
// layers were built before it.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  static Rng derive(std::uint64_t seed, std::string_view path);

  double uniform(double lo, double hi);
  double normal(double mean = 0.0, double stddev = 1.0);
  std::size_t index(std::size_t n);
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

std::uint64_t fnv1a(std::string_view text);

// y = x W + b with W stored [in, out].
struct Linear {
  Linear() = default;
  Linear(std::size_t in, std::size_t out, bool with_bias, Rng& rng);

  Tensor operator()(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
  std::size_t param_count() const;
  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  Tensor weight;
  Tensor bias;  // undefined when built without bias
};

struct RmsNorm {
  RmsNorm() = default;
  explicit RmsNorm(std::size_t dim, double eps = 1e-6);

  Tensor operator()(const Tensor& x) const { return rms_norm(x, weight, eps); }
  void collect(const std::string& prefix, ParamList& out) const;

  Tensor weight;
  double eps = 1e-6;
};

// Two-layer SiLU MLP, d_model -> d_ff -> d_model. Also the expert shape.
struct FeedForward {
  FeedForward() = default;
  FeedForward(std::size_t d_model, std::size_t d_ff, Rng& rng);

  Tensor operator()(const Tensor& x) const { return down(silu(up(x))); }
  void collect(const std::string& prefix, ParamList& out) const;
  std::size_t param_count() const { return up.param_count() + down.param_count(); }

  Linear up;
  Linear down;
};

void zero_params(const ParamList& params);

}  // namespace jambatalk
