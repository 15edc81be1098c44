#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "jambatalk/nn.hpp"
#include "jambatalk/tensor.hpp"

namespace jambatalk {

enum class ScanMode {
  kSequential,  // the plain recurrence, one step at a time
  kChunked,     // two-pass chunked scan: independent local scans + carry fix-up
};

namespace ssm {

struct LaneDiscretization {
  double a_bar = 0.0;
  double b_bar = 0.0;
};

// Zero-order hold for one diagonal lane: a_bar = exp(delta * a),
// b_bar = (exp(delta * a) - 1) / a * b. Near delta * a = 0 the series
// b_bar = delta * (1 + delta * a / 2) * b takes over; its limit is delta * b.
LaneDiscretization discretize_lane(double a, double b, double delta);

struct Discretized {
  Tensor a_bar;  // [batch, channels, N]
  Tensor b_bar;  // [batch, channels, N]
};

// a: [channels, N] (negative), b: [batch, N], delta: [batch, channels] (> 0).
Discretized discretize(const Tensor& a, const Tensor& b, const Tensor& delta);

struct ScanInputs {
  Tensor a_bar;  // [batch, T, channels, N]
  Tensor b_bar;  // [batch, T, channels, N]
  Tensor c;      // [batch, T, N]
  Tensor x;      // [batch, T, channels]
  Tensor h0;     // [batch, channels, N]; undefined means zeros
};

struct ScanOutput {
  Tensor y;        // [batch, T, channels]
  Tensor h_final;  // [batch, channels, N]
};

// h_t = a_bar_t * h_{t-1} + b_bar_t * x_t,  y_t = sum_n c_t[n] h_t[n].
ScanOutput selective_scan(const ScanInputs& in, ScanMode mode = ScanMode::kSequential,
                          std::size_t chunk = 16);

// Differentiable discretize + scan + readout in one graph node.
// u, delta: [batch, T, channels]; a: [channels, N]; b, c: [batch, T, N].
// h0 (may be empty) and h_final are flat [batch, channels, N].
Tensor selective_scan_fused(const Tensor& u, const Tensor& delta, const Tensor& a,
                            const Tensor& b, const Tensor& c, std::span<const double> h0,
                            std::vector<double>* h_final, ScanMode mode = ScanMode::kSequential,
                            std::size_t chunk = 16);

}  // namespace ssm

struct MambaConfig {
  std::size_t d_model = 64;
  std::size_t state_dim = 16;
  std::size_t expand = 2;
  std::size_t conv_width = 4;
  double dt_min = 1e-3;
  double dt_max = 1e-1;
  ScanMode scan_mode = ScanMode::kSequential;
  std::size_t scan_chunk = 16;

  std::size_t channels() const { return expand * d_model; }
};

// Recurrent state for incremental decoding. Its size never depends on how
// many steps have been taken.
struct MambaState {
  std::size_t batch = 0;
  std::size_t channels = 0;
  std::size_t state_dim = 0;
  std::size_t conv_width = 0;
  std::vector<double> h;          // [batch, channels, N]
  std::vector<double> conv_tail;  // [batch, conv_width - 1, channels]

  static MambaState zeros(const MambaConfig& cfg, std::size_t batch);
  std::size_t bytes() const { return (h.size() + conv_tail.size()) * sizeof(double); }
};

struct SelectedParams {
  Tensor delta;  // [..., channels], strictly positive
  Tensor b;      // [..., N]
  Tensor c;      // [..., N]
};

// Pre-norm selective SSM block with a gated output and a residual connection:
// x + out_proj(scan(silu(conv(in_proj(norm x)))) * silu(gate_proj(norm x))).
class MambaBlock {
 public:
  MambaBlock() = default;
  MambaBlock(const MambaConfig& cfg, std::uint64_t seed, const std::string& path);

  // x: [batch, T, d_model]. With a state, the convolution continues from the
  // stored tail, the scan starts from the stored h, and the state advances.
  Tensor forward(const Tensor& x, MambaState* state = nullptr) const;
  // x_t: [batch, d_model].
  Tensor step(const Tensor& x_t, MambaState& state) const;

  SelectedParams select_params(const Tensor& u) const;
  Tensor realized_a() const;

  void collect(const std::string& prefix, ParamList& out) const;
  const MambaConfig& config() const { return cfg_; }

  RmsNorm norm;
  Linear in_proj;
  Linear gate_proj;
  Tensor conv_kernel;  // [channels, conv_width]
  Tensor conv_bias;    // [channels]
  Linear proj_delta;
  Linear proj_b;
  Linear proj_c;
  Tensor a_log;  // [channels, N]
  Linear out_proj;

 private:
  void check_state(const MambaState& state, std::size_t batch) const;

  MambaConfig cfg_;
};

}  // namespace jambatalk
