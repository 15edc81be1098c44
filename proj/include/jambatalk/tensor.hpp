#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "jambatalk/errors.hpp"

namespace jambatalk {

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct Node;
}

// Dense row-major array of doubles with optional reverse-mode gradient
// tracking. Copies are shallow: two Tensor handles may share one buffer.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  // Negative axes count from the back.
  std::size_t dim(int axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // Direct write access, for parameter updates and test fixtures. Do not
  // mutate a tensor that is part of a graph awaiting backward().
  std::span<double> mutable_data();
  std::vector<double> to_vector() const;
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  // Only valid on leaves.
  void set_requires_grad(bool flag);
  bool has_grad() const;
  // Zero-length span when no gradient has been accumulated.
  std::span<const double> grad() const;
  // Allocates a zero gradient buffer on first use.
  std::span<double> grad_buffer() const;
  void zero_grad() const;

  // Reverse-mode sweep from this scalar; throws ContractError otherwise.
  void backward() const;

  // Copy of the values with no graph history.
  Tensor detach() const;

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  friend Tensor make_op(Shape, std::vector<double>, std::vector<Tensor>,
                        std::function<void(std::span<const double>)>);
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

// Builds the result of a differentiable op. `backward` receives the output
// gradient and accumulates into the inputs (via grad_buffer()); it is only
// recorded when grad mode is on and some input requires a gradient.
Tensor make_op(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
               std::function<void(std::span<const double>)> backward);

bool grad_enabled();

// Disables graph recording for its lifetime (inference, decoding).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// ---- elementwise (trailing-dimension broadcasting) ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return mul_scalar(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul_scalar(a, s); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor square(const Tensor& a);

// ---- linear algebra ----
// a[..., m, k] x b[..., k, n] with broadcast batch extents.
Tensor matmul(const Tensor& a, const Tensor& b);
// Swaps two axes.
Tensor transpose(const Tensor& a, int axis0, int axis1);
Tensor reshape(const Tensor& a, Shape shape);

// ---- reductions ----
Tensor sum(const Tensor& a);
Tensor sum(const Tensor& a, int axis, bool keepdim = false);
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, int axis, bool keepdim = false);

// Max-subtracted softmax; NaN inputs raise NumericError.
Tensor softmax(const Tensor& a, int axis = -1);

// x * rsqrt(mean(x^2, last) + eps) * weight, weight shaped [last].
Tensor rms_norm(const Tensor& x, const Tensor& weight, double eps);

Tensor mse_loss(const Tensor& pred, const Tensor& target);

// ---- indexing ----
Tensor slice(const Tensor& a, int axis, std::size_t start, std::size_t length);
Tensor concat(const std::vector<Tensor>& parts, int axis);
// Rows of a along axis 0.
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows);
// Inverse of gather_rows: result[rows[i]] += src[i], result has `n_rows` rows.
Tensor scatter_add_rows(const Tensor& src, std::span<const std::size_t> rows, std::size_t n_rows);
// Flat-index element gather into a 1-D tensor.
Tensor take(const Tensor& a, std::span<const std::size_t> flat_indices);
Tensor repeat_interleave(const Tensor& a, int axis, std::size_t repeats);

// ---- convolution ----
// Depthwise valid convolution over time, channels last:
// x[B, T + K - 1, C], kernel[C, K], bias[C] -> [B, T, C].
Tensor depthwise_conv_time(const Tensor& x, const Tensor& kernel, const Tensor& bias);
// Strided valid convolution, channels first:
// x[B, Cin, L], weight[Cout, Cin, K], bias[Cout] -> [B, Cout, (L - K) / stride + 1].
Tensor conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride);

}  // namespace jambatalk
