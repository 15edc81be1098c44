#include "jambatalk/nn.hpp"

#include <algorithm>
#include <cmath>

namespace jambatalk {

std::size_t count_params(const ParamList& params) {
  std::size_t total = 0;
  for (const auto& p : params) total += p.tensor.numel();
  return total;
}

std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

Rng Rng::derive(std::uint64_t seed, std::string_view path) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(fnv1a(path)),
                    static_cast<std::uint32_t>(fnv1a(path) >> 32)};
  std::mt19937_64 engine(seq);
  Rng rng(0);
  rng.engine_ = engine;
  return rng;
}

double Rng::uniform(double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(engine_);
}

double Rng::normal(double mean, double stddev) {
  return std::normal_distribution<double>(mean, stddev)(engine_);
}

std::size_t Rng::index(std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
}

Linear::Linear(std::size_t in, std::size_t out, bool with_bias, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::vector<double> w(in * out);
  for (auto& v : w) v = rng.uniform(-bound, bound);
  weight = Tensor::from({in, out}, std::move(w), true);
  if (with_bias) bias = Tensor::zeros({out}, true);
}

Tensor Linear::operator()(const Tensor& x) const {
  if (x.rank() == 1) return (*this)(reshape(x, {1, x.numel()}));
  Tensor y = matmul(x, weight);
  return bias.defined() ? add(y, bias) : y;
}

void Linear::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".weight", weight});
  if (bias.defined()) out.push_back({prefix + ".bias", bias});
}

std::size_t Linear::param_count() const {
  return weight.numel() + (bias.defined() ? bias.numel() : 0);
}

RmsNorm::RmsNorm(std::size_t dim, double eps_) : weight(Tensor::full({dim}, 1.0, true)), eps(eps_) {}

void RmsNorm::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".weight", weight});
}

FeedForward::FeedForward(std::size_t d_model, std::size_t d_ff, Rng& rng)
    : up(d_model, d_ff, true, rng), down(d_ff, d_model, true, rng) {}

void FeedForward::collect(const std::string& prefix, ParamList& out) const {
  up.collect(prefix + ".up", out);
  down.collect(prefix + ".down", out);
}

void zero_params(const ParamList& params) {
  for (auto p : params) {
    auto d = p.tensor.mutable_data();
    std::fill(d.begin(), d.end(), 0.0);
  }
}

}  // namespace jambatalk
