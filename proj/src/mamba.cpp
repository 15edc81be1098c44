#include "jambatalk/mamba.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

namespace jambatalk {

namespace ssm {

namespace {

constexpr double kSingularGuard = 1e-8;
constexpr double kSeriesGuard = 1e-3;

// f(delta, a) = expm1(delta a) / a, the scalar factor in b_bar = f * b.
double zoh_factor(double a, double delta) {
  const double x = delta * a;
  if (std::abs(x) < kSingularGuard) return delta * (1.0 + 0.5 * x);
  return std::expm1(x) / a;
}

// d f / d a. The closed form cancels badly near x = 0, so use the series.
double zoh_factor_da(double a, double delta) {
  const double x = delta * a;
  if (std::abs(x) < kSeriesGuard) {
    return delta * delta * (0.5 + x / 3.0 + x * x / 8.0 + x * x * x / 30.0);
  }
  return (x * std::exp(x) - std::expm1(x)) / (a * a);
}

// h_all[b, t, e, n] for h_t = a_bar_t h_{t-1} + bx_t. Layout [B, T, E, N].
void scan_states(const double* a_bar, const double* bx, const double* h0, std::size_t batch,
                 std::size_t steps, std::size_t lanes, double* h_all, ScanMode mode,
                 std::size_t chunk) {
  const std::size_t row = lanes;  // E * N lanes per time step
  if (mode == ScanMode::kSequential) {
    for (std::size_t b = 0; b < batch; ++b) {
      const double* prev = h0 ? h0 + b * row : nullptr;
      for (std::size_t t = 0; t < steps; ++t) {
        const std::size_t base = (b * steps + t) * row;
        double* cur = h_all + base;
        for (std::size_t i = 0; i < row; ++i) {
          cur[i] = (prev ? a_bar[base + i] * prev[i] : 0.0) + bx[base + i];
        }
        prev = cur;
      }
    }
    return;
  }

  if (chunk == 0) throw ContractError("chunked scan needs a positive chunk length");
  std::vector<double> prod(batch * steps * row);
  // Pass 1: each chunk scans from a zero state and records the running
  // product of a_bar; chunks do not depend on each other.
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t start = 0; start < steps; start += chunk) {
      const std::size_t stop = std::min(steps, start + chunk);
      for (std::size_t t = start; t < stop; ++t) {
        const std::size_t base = (b * steps + t) * row;
        for (std::size_t i = 0; i < row; ++i) {
          if (t == start) {
            h_all[base + i] = bx[base + i];
            prod[base + i] = a_bar[base + i];
          } else {
            h_all[base + i] = a_bar[base + i] * h_all[base - row + i] + bx[base + i];
            prod[base + i] = a_bar[base + i] * prod[base - row + i];
          }
        }
      }
    }
  }
  // Pass 2: propagate the carry across chunk boundaries.
  std::vector<double> carry(row);
  for (std::size_t b = 0; b < batch; ++b) {
    if (h0) {
      std::copy_n(h0 + b * row, row, carry.begin());
    } else {
      std::fill(carry.begin(), carry.end(), 0.0);
    }
    for (std::size_t start = 0; start < steps; start += chunk) {
      const std::size_t stop = std::min(steps, start + chunk);
      for (std::size_t t = start; t < stop; ++t) {
        const std::size_t base = (b * steps + t) * row;
        for (std::size_t i = 0; i < row; ++i) h_all[base + i] += prod[base + i] * carry[i];
      }
      std::copy_n(h_all + (b * steps + stop - 1) * row, row, carry.begin());
    }
  }
}

}  // namespace

LaneDiscretization discretize_lane(double a, double b, double delta) {
  if (!(delta > 0.0)) throw ContractError(fmt::format("discretize: delta must be > 0, got {}", delta));
  return {std::exp(delta * a), zoh_factor(a, delta) * b};
}

Discretized discretize(const Tensor& a, const Tensor& b, const Tensor& delta) {
  if (a.rank() != 2 || b.rank() != 2 || delta.rank() != 2 || b.dim(1) != a.dim(1) ||
      delta.dim(1) != a.dim(0) || delta.dim(0) != b.dim(0)) {
    throw DimensionError(fmt::format("discretize: A {} B {} delta {}", shape_str(a.shape()),
                                     shape_str(b.shape()), shape_str(delta.shape())));
  }
  const std::size_t batch = b.dim(0);
  const std::size_t channels = a.dim(0);
  const std::size_t n = a.dim(1);
  std::vector<double> a_bar(batch * channels * n);
  std::vector<double> b_bar(batch * channels * n);
  auto av = a.data();
  auto bv = b.data();
  auto dv = delta.data();
  for (std::size_t s = 0; s < batch; ++s) {
    for (std::size_t e = 0; e < channels; ++e) {
      for (std::size_t k = 0; k < n; ++k) {
        const auto lane = discretize_lane(av[e * n + k], bv[s * n + k], dv[s * channels + e]);
        a_bar[(s * channels + e) * n + k] = lane.a_bar;
        b_bar[(s * channels + e) * n + k] = lane.b_bar;
      }
    }
  }
  return {Tensor::from({batch, channels, n}, std::move(a_bar)),
          Tensor::from({batch, channels, n}, std::move(b_bar))};
}

ScanOutput selective_scan(const ScanInputs& in, ScanMode mode, std::size_t chunk) {
  if (in.a_bar.rank() != 4 || in.x.rank() != 3 || in.c.rank() != 3) {
    throw ContractError("selective_scan: expected a_bar/b_bar [B,T,E,N], c [B,T,N], x [B,T,E]");
  }
  const std::size_t batch = in.a_bar.dim(0);
  const std::size_t steps = in.a_bar.dim(1);
  const std::size_t channels = in.a_bar.dim(2);
  const std::size_t n = in.a_bar.dim(3);
  if (in.b_bar.shape() != in.a_bar.shape() || in.x.shape() != Shape{batch, steps, channels} ||
      in.c.shape() != Shape{batch, steps, n}) {
    throw ContractError(fmt::format(
        "selective_scan: per-step tensors disagree: a_bar {} b_bar {} c {} x {}",
        shape_str(in.a_bar.shape()), shape_str(in.b_bar.shape()), shape_str(in.c.shape()),
        shape_str(in.x.shape())));
  }
  if (in.h0.defined() && in.h0.shape() != Shape{batch, channels, n}) {
    throw ContractError("selective_scan: h0 shape " + shape_str(in.h0.shape()));
  }
  const std::size_t lanes = channels * n;
  auto ab = in.a_bar.data();
  auto bb = in.b_bar.data();
  auto xv = in.x.data();
  auto cv = in.c.data();
  std::vector<double> bx(batch * steps * lanes);
  for (std::size_t i = 0; i < bx.size(); ++i) bx[i] = bb[i] * xv[i / n];
  std::vector<double> h_all(bx.size());
  scan_states(ab.data(), bx.data(), in.h0.defined() ? in.h0.data().data() : nullptr, batch, steps,
              lanes, h_all.data(), mode, chunk);

  std::vector<double> y(batch * steps * channels, 0.0);
  for (std::size_t bt = 0; bt < batch * steps; ++bt) {
    for (std::size_t e = 0; e < channels; ++e) {
      double acc = 0.0;
      for (std::size_t k = 0; k < n; ++k) acc += cv[bt * n + k] * h_all[(bt * channels + e) * n + k];
      y[bt * channels + e] = acc;
    }
  }
  std::vector<double> h_final(batch * lanes);
  for (std::size_t b = 0; b < batch; ++b) {
    std::copy_n(h_all.begin() + static_cast<std::ptrdiff_t>(((b + 1) * steps - 1) * lanes), lanes,
                h_final.begin() + static_cast<std::ptrdiff_t>(b * lanes));
  }
  return {Tensor::from({batch, steps, channels}, std::move(y)),
          Tensor::from({batch, channels, n}, std::move(h_final))};
}

Tensor selective_scan_fused(const Tensor& u, const Tensor& delta, const Tensor& a,
                            const Tensor& b, const Tensor& c, std::span<const double> h0,
                            std::vector<double>* h_final, ScanMode mode, std::size_t chunk) {
  const std::size_t batch = u.dim(0);
  const std::size_t steps = u.dim(1);
  const std::size_t channels = u.dim(2);
  const std::size_t n = a.dim(1);
  if (delta.shape() != u.shape() || a.shape() != Shape{channels, n} ||
      b.shape() != Shape{batch, steps, n} || c.shape() != Shape{batch, steps, n}) {
    throw ContractError(fmt::format("selective_scan_fused: u {} delta {} A {} B {} C {}",
                                    shape_str(u.shape()), shape_str(delta.shape()),
                                    shape_str(a.shape()), shape_str(b.shape()),
                                    shape_str(c.shape())));
  }
  const std::size_t lanes = channels * n;
  if (!h0.empty() && h0.size() != batch * lanes) {
    throw ContractError("selective_scan_fused: h0 has the wrong size");
  }

  struct Saved {
    std::vector<double> a_bar, factor, h_all, h0;
  };
  auto saved = std::make_shared<Saved>();
  saved->a_bar.resize(batch * steps * lanes);
  saved->factor.resize(batch * steps * lanes);
  saved->h_all.resize(batch * steps * lanes);
  saved->h0.assign(h0.begin(), h0.end());

  auto uv = u.data();
  auto dv = delta.data();
  auto av = a.data();
  auto bv = b.data();
  auto cv = c.data();
  std::vector<double> bx(batch * steps * lanes);
  for (std::size_t bt = 0; bt < batch * steps; ++bt) {
    for (std::size_t e = 0; e < channels; ++e) {
      const double d = dv[bt * channels + e];
      if (!(d > 0.0)) throw ContractError(fmt::format("selective scan: delta must be > 0, got {}", d));
      const double x = uv[bt * channels + e];
      for (std::size_t k = 0; k < n; ++k) {
        const std::size_t i = (bt * channels + e) * n + k;
        const double ak = av[e * n + k];
        saved->a_bar[i] = std::exp(d * ak);
        saved->factor[i] = zoh_factor(ak, d);
        bx[i] = saved->factor[i] * bv[bt * n + k] * x;
      }
    }
  }
  scan_states(saved->a_bar.data(), bx.data(), h0.empty() ? nullptr : h0.data(), batch, steps,
              lanes, saved->h_all.data(), mode, chunk);

  std::vector<double> y(batch * steps * channels);
  for (std::size_t bt = 0; bt < batch * steps; ++bt) {
    for (std::size_t e = 0; e < channels; ++e) {
      const double* h = saved->h_all.data() + (bt * channels + e) * n;
      double acc = 0.0;
      for (std::size_t k = 0; k < n; ++k) acc += cv[bt * n + k] * h[k];
      y[bt * channels + e] = acc;
    }
  }
  if (h_final) {
    h_final->resize(batch * lanes);
    for (std::size_t s = 0; s < batch; ++s) {
      std::copy_n(saved->h_all.begin() + static_cast<std::ptrdiff_t>(((s + 1) * steps - 1) * lanes),
                  lanes, h_final->begin() + static_cast<std::ptrdiff_t>(s * lanes));
    }
  }

  return make_op(
      {batch, steps, channels}, std::move(y), {u, delta, a, b, c},
      [u, delta, a, b, c, saved, batch, steps, channels, n](std::span<const double> gy) mutable {
        const std::size_t lanes = channels * n;
        auto uv = u.data();
        auto dv = delta.data();
        auto av = a.data();
        auto bv = b.data();
        auto cv = c.data();
        std::span<double> gu, gd, ga, gb, gc;
        if (u.requires_grad()) gu = u.grad_buffer();
        if (delta.requires_grad()) gd = delta.grad_buffer();
        if (a.requires_grad()) ga = a.grad_buffer();
        if (b.requires_grad()) gb = b.grad_buffer();
        if (c.requires_grad()) gc = c.grad_buffer();

        std::vector<double> gh(lanes);
        for (std::size_t s = 0; s < batch; ++s) {
          std::fill(gh.begin(), gh.end(), 0.0);
          for (std::size_t t = steps; t-- > 0;) {
            const std::size_t bt = s * steps + t;
            const double* h = saved->h_all.data() + bt * lanes;
            const double* h_prev = t > 0 ? saved->h_all.data() + (bt - 1) * lanes
                                         : (saved->h0.empty() ? nullptr : saved->h0.data() + s * lanes);
            // gh currently holds a_bar_{t+1} * gh_{t+1}; add the readout term.
            for (std::size_t e = 0; e < channels; ++e) {
              const double g = gy[bt * channels + e];
              for (std::size_t k = 0; k < n; ++k) {
                gh[e * n + k] += cv[bt * n + k] * g;
                if (!gc.empty()) gc[bt * n + k] += g * h[e * n + k];
              }
            }
            for (std::size_t e = 0; e < channels; ++e) {
              const double d = dv[bt * channels + e];
              const double x = uv[bt * channels + e];
              double gd_acc = 0.0;
              double gu_acc = 0.0;
              for (std::size_t k = 0; k < n; ++k) {
                const std::size_t lane = e * n + k;
                const std::size_t i = bt * lanes + lane;
                const double ak = av[e * n + k];
                const double bk = bv[bt * n + k];
                const double abar = saved->a_bar[i];
                const double f = saved->factor[i];
                const double g = gh[lane];
                // through b_bar * x = f * b * x
                gu_acc += g * f * bk;
                if (!gb.empty()) gb[bt * n + k] += g * f * x;
                const double gf = g * bk * x;
                // through a_bar = exp(delta a), multiplying h_prev
                const double gabar = h_prev ? g * h_prev[lane] : 0.0;
                gd_acc += gabar * ak * abar + gf * abar;
                if (!ga.empty()) ga[e * n + k] += gabar * d * abar + gf * zoh_factor_da(ak, d);
                gh[lane] = g * abar;  // carry to step t - 1
              }
              if (!gu.empty()) gu[bt * channels + e] += gu_acc;
              if (!gd.empty()) gd[bt * channels + e] += gd_acc;
            }
          }
        }
      });
}

}  // namespace ssm

MambaState MambaState::zeros(const MambaConfig& cfg, std::size_t batch) {
  MambaState s;
  s.batch = batch;
  s.channels = cfg.channels();
  s.state_dim = cfg.state_dim;
  s.conv_width = cfg.conv_width;
  s.h.assign(batch * s.channels * s.state_dim, 0.0);
  s.conv_tail.assign(batch * (cfg.conv_width - 1) * s.channels, 0.0);
  return s;
}

MambaBlock::MambaBlock(const MambaConfig& cfg, std::uint64_t seed, const std::string& path)
    : cfg_(cfg) {
  if (cfg.d_model == 0 || cfg.state_dim == 0 || cfg.expand == 0 || cfg.conv_width < 1) {
    throw ConfigError("mamba: d_model, state_dim, expand and conv_width must be positive");
  }
  if (!(cfg.dt_min > 0.0) || cfg.dt_max < cfg.dt_min) throw ConfigError("mamba: need 0 < dt_min <= dt_max");
  const std::size_t d = cfg.d_model;
  const std::size_t e = cfg.channels();
  const std::size_t n = cfg.state_dim;
  const std::size_t k = cfg.conv_width;

  norm = RmsNorm(d);
  Rng r_in = Rng::derive(seed, path + ".in_proj");
  in_proj = Linear(d, e, false, r_in);
  Rng r_gate = Rng::derive(seed, path + ".gate");
  gate_proj = Linear(d, e, false, r_gate);

  Rng r_conv = Rng::derive(seed, path + ".conv");
  const double conv_bound = 1.0 / std::sqrt(static_cast<double>(k));
  std::vector<double> kernel(e * k);
  for (auto& v : kernel) v = r_conv.uniform(-conv_bound, conv_bound);
  conv_kernel = Tensor::from({e, k}, std::move(kernel), true);
  conv_bias = Tensor::zeros({e}, true);

  Rng r_delta = Rng::derive(seed, path + ".delta");
  proj_delta = Linear(e, e, true, r_delta);
  // Bias = softplus^-1(dt) with dt uniform in [dt_min, dt_max].
  for (auto& bias : proj_delta.bias.mutable_data()) {
    const double dt = r_delta.uniform(cfg.dt_min, cfg.dt_max);
    bias = dt + std::log(-std::expm1(-dt));
  }
  Rng r_b = Rng::derive(seed, path + ".B");
  proj_b = Linear(e, n, false, r_b);
  Rng r_c = Rng::derive(seed, path + ".C");
  proj_c = Linear(e, n, false, r_c);

  // A = -(1..N) in every channel.
  std::vector<double> alog(e * n);
  for (std::size_t c = 0; c < e; ++c) {
    for (std::size_t j = 0; j < n; ++j) alog[c * n + j] = std::log(static_cast<double>(j + 1));
  }
  a_log = Tensor::from({e, n}, std::move(alog), true);

  Rng r_out = Rng::derive(seed, path + ".out_proj");
  out_proj = Linear(e, d, false, r_out);
}

SelectedParams MambaBlock::select_params(const Tensor& u) const {
  return {softplus(proj_delta(u)), proj_b(u), proj_c(u)};
}

Tensor MambaBlock::realized_a() const { return neg(exp(a_log)); }

void MambaBlock::check_state(const MambaState& state, std::size_t batch) const {
  if (state.batch != batch || state.channels != cfg_.channels() ||
      state.state_dim != cfg_.state_dim || state.conv_width != cfg_.conv_width ||
      state.h.size() != batch * cfg_.channels() * cfg_.state_dim ||
      state.conv_tail.size() != batch * (cfg_.conv_width - 1) * cfg_.channels()) {
    throw ContractError(fmt::format(
        "mamba: state (batch {}, channels {}, N {}, K {}) does not match layer (batch {}, "
        "channels {}, N {}, K {})",
        state.batch, state.channels, state.state_dim, state.conv_width, batch, cfg_.channels(),
        cfg_.state_dim, cfg_.conv_width));
  }
}

Tensor MambaBlock::forward(const Tensor& x, MambaState* state) const {
  if (x.rank() != 3 || x.dim(2) != cfg_.d_model) {
    throw DimensionError("mamba forward expects [batch, T, d_model], got " + shape_str(x.shape()));
  }
  const std::size_t batch = x.dim(0);
  const std::size_t steps = x.dim(1);
  const std::size_t channels = cfg_.channels();
  const std::size_t tail_len = cfg_.conv_width - 1;
  if (state) check_state(*state, batch);

  Tensor normed = norm(x);
  Tensor xin = in_proj(normed);
  Tensor gate = gate_proj(normed);

  Tensor padded = xin;
  if (tail_len > 0) {
    Tensor tail = state ? Tensor::from({batch, tail_len, channels}, state->conv_tail)
                        : Tensor::zeros({batch, tail_len, channels});
    padded = concat({tail, xin}, 1);
  }
  Tensor u = silu(depthwise_conv_time(padded, conv_kernel, conv_bias));
  SelectedParams p = select_params(u);

  std::vector<double> h_final;
  Tensor y = ssm::selective_scan_fused(u, p.delta, realized_a(), p.b, p.c,
                                       state ? std::span<const double>(state->h) : std::span<const double>(),
                                       state ? &h_final : nullptr, cfg_.scan_mode, cfg_.scan_chunk);
  Tensor out = add(out_proj(mul(y, silu(gate))), x);

  if (state) {
    state->h = std::move(h_final);
    auto pv = padded.data();
    const std::size_t total = steps + tail_len;
    for (std::size_t b = 0; b < batch; ++b) {
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>((b * total + steps) * channels),
                  tail_len * channels,
                  state->conv_tail.begin() + static_cast<std::ptrdiff_t>(b * tail_len * channels));
    }
  }
  return out;
}

Tensor MambaBlock::step(const Tensor& x_t, MambaState& state) const {
  if (x_t.rank() != 2 || x_t.dim(1) != cfg_.d_model) {
    throw DimensionError("mamba step expects [batch, d_model], got " + shape_str(x_t.shape()));
  }
  const std::size_t batch = x_t.dim(0);
  Tensor y = forward(reshape(x_t, {batch, 1, cfg_.d_model}), &state);
  return reshape(y, {batch, cfg_.d_model});
}

void MambaBlock::collect(const std::string& prefix, ParamList& out) const {
  norm.collect(prefix + ".norm", out);
  in_proj.collect(prefix + ".in_proj", out);
  gate_proj.collect(prefix + ".gate_proj", out);
  out.push_back({prefix + ".conv.weight", conv_kernel});
  out.push_back({prefix + ".conv.bias", conv_bias});
  proj_delta.collect(prefix + ".delta_proj", out);
  proj_b.collect(prefix + ".B_proj", out);
  proj_c.collect(prefix + ".C_proj", out);
  out.push_back({prefix + ".A_log", a_log});
  out_proj.collect(prefix + ".out_proj", out);
}

}  // namespace jambatalk
