#include "jambatalk/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_set>

#include <fmt/format.h>
#include <fmt/ranges.h>

namespace jambatalk {

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<Tensor> inputs;
  std::function<void(std::span<const double>)> backward;
};

}  // namespace detail

namespace {

thread_local bool g_grad_enabled = true;

std::size_t normalize_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError(fmt::format("axis {} out of range for rank {}", axis, rank));
  }
  return static_cast<std::size_t>(a);
}

// Splits a shape around `axis` into (outer, extent, inner) for strided loops.
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError(
          fmt::format("cannot broadcast shapes {} and {}", shape_str(a), shape_str(b)));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Maps flat indices of a broadcast output back into one operand.
class BroadcastIndex {
 public:
  BroadcastIndex(const Shape& in, const Shape& out) {
    const std::size_t n_in = numel_of(in);
    const std::size_t n_out = numel_of(out);
    if (n_in == n_out) {
      kind_ = Kind::kIdentity;
      return;
    }
    // Operand equal to a trailing block of the output: index modulo its size.
    std::size_t lead = 0;
    while (lead < in.size() && in[lead] == 1) ++lead;
    const std::size_t core = in.size() - lead;
    bool suffix = core <= out.size();
    for (std::size_t i = 0; suffix && i < core; ++i) {
      if (in[lead + i] != out[out.size() - core + i]) suffix = false;
    }
    if (suffix) {
      kind_ = Kind::kModulo;
      modulo_ = n_in;
      return;
    }
    kind_ = Kind::kTable;
    const std::size_t rank = out.size();
    std::vector<std::size_t> stride(rank, 0);
    std::size_t acc = 1;
    for (std::size_t i = 0; i < in.size(); ++i) {
      const std::size_t axis = in.size() - 1 - i;
      const std::size_t out_axis = rank - 1 - i;
      stride[out_axis] = in[axis] == 1 ? 0 : acc;
      acc *= in[axis];
    }
    table_.resize(n_out);
    std::vector<std::size_t> idx(rank, 0);
    std::size_t offset = 0;
    for (std::size_t flat = 0; flat < n_out; ++flat) {
      table_[flat] = offset;
      for (std::size_t d = rank; d-- > 0;) {
        ++idx[d];
        offset += stride[d];
        if (idx[d] < out[d]) break;
        offset -= stride[d] * idx[d];
        idx[d] = 0;
      }
    }
  }

  std::size_t operator()(std::size_t i) const {
    switch (kind_) {
      case Kind::kIdentity:
        return i;
      case Kind::kModulo:
        return i % modulo_;
      case Kind::kTable:
        break;
    }
    return table_[i];
  }

 private:
  enum class Kind { kIdentity, kModulo, kTable };
  Kind kind_ = Kind::kIdentity;
  std::size_t modulo_ = 1;
  std::vector<std::size_t> table_;
};

template <typename Fwd, typename BwdA, typename BwdB>
Tensor binary_op(const Tensor& a, const Tensor& b, Fwd fwd, BwdA dfa, BwdB dfb) {
  Shape out = broadcast_shapes(a.shape(), b.shape());
  const std::size_t n = numel_of(out);
  auto ia = std::make_shared<BroadcastIndex>(a.shape(), out);
  auto ib = std::make_shared<BroadcastIndex>(b.shape(), out);
  std::vector<double> values(n);
  auto da = a.data();
  auto db = b.data();
  for (std::size_t i = 0; i < n; ++i) values[i] = fwd(da[(*ia)(i)], db[(*ib)(i)]);
  return make_op(std::move(out), std::move(values), {a, b},
                 [a, b, ia, ib, n, dfa, dfb](std::span<const double> g) mutable {
                   auto av = a.data();
                   auto bv = b.data();
                   if (a.requires_grad()) {
                     auto ga = a.grad_buffer();
                     for (std::size_t i = 0; i < n; ++i) {
                       const std::size_t ja = (*ia)(i);
                       ga[ja] += g[i] * dfa(av[ja], bv[(*ib)(i)]);
                     }
                   }
                   if (b.requires_grad()) {
                     auto gb = b.grad_buffer();
                     for (std::size_t i = 0; i < n; ++i) {
                       const std::size_t jb = (*ib)(i);
                       gb[jb] += g[i] * dfb(av[(*ia)(i)], bv[jb]);
                     }
                   }
                 });
}

// df receives (x, y) with y = f(x).
template <typename F, typename DF>
Tensor unary_op(const Tensor& a, F f, DF df) {
  const std::size_t n = a.numel();
  std::vector<double> values(n);
  auto av = a.data();
  for (std::size_t i = 0; i < n; ++i) values[i] = f(av[i]);
  auto out_values = std::make_shared<std::vector<double>>(values);
  return make_op(a.shape(), std::move(values), {a}, [a, out_values, df](std::span<const double> g) mutable {
    auto av = a.data();
    auto ga = a.grad_buffer();
    const auto& y = *out_values;
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * df(av[i], y[i]);
  });
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// c[m,n] += a[m,k] * b[k,n]
void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
              std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// da[m,k] += g[m,n] * b[k,n]^T
void gemm_grad_a(const double* g, const double* b, double* da, std::size_t m, std::size_t k,
                 std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
      da[i * k + p] += acc;
    }
  }
}

// db[k,n] += a[m,k]^T * g[m,n]
void gemm_grad_b(const double* a, const double* g, double* db, std::size_t m, std::size_t k,
                 std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      double* drow = db + p * n;
      for (std::size_t j = 0; j < n; ++j) drow[j] += av * grow[j];
    }
  }
}

}  // namespace

std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) { return fmt::format("[{}]", fmt::join(shape, ", ")); }

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = numel_of(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  }
  if (numel_of(shape) != values.size()) {
    throw DimensionError(fmt::format("shape {} needs {} values, got {}", shape_str(shape),
                                     numel_of(shape), values.size()));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(int axis) const { return node_->shape[normalize_axis(axis, rank())]; }

std::size_t Tensor::numel() const { return node_->data.size(); }

std::span<const double> Tensor::data() const { return node_->data; }

std::span<double> Tensor::mutable_data() { return node_->data; }

std::vector<double> Tensor::to_vector() const { return node_->data; }

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) throw DimensionError("at(): index rank mismatch");
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= node_->shape[axis]) throw DimensionError("at(): index out of range");
    flat = flat * node_->shape[axis] + i;
    ++axis;
  }
  return node_->data[flat];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  if (!node_->inputs.empty()) throw ContractError("set_requires_grad on a non-leaf tensor");
  node_->requires_grad = flag;
}

bool Tensor::has_grad() const { return !node_->grad.empty(); }

std::span<const double> Tensor::grad() const { return node_->grad; }

std::span<double> Tensor::grad_buffer() const {
  if (node_->grad.empty()) node_->grad.assign(node_->data.size(), 0.0);
  return node_->grad;
}

void Tensor::zero_grad() const { node_->grad.clear(); }

void Tensor::backward() const {
  if (numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + shape_str(shape()));
  }
  if (!node_->requires_grad) throw ContractError("backward() on a tensor with no tracked inputs");

  // Iterative post-order DFS gives a topological order of the graph.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].node_.get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  if (node_->grad.empty()) node_->grad.assign(1, 0.0);
  node_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(node->grad);
  }
}

Tensor Tensor::detach() const { return from(shape(), node_->data, false); }

Tensor make_op(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
               std::function<void(std::span<const double>)> backward) {
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  if (g_grad_enabled) {
    const bool track = std::any_of(inputs.begin(), inputs.end(),
                                   [](const Tensor& t) { return t.requires_grad(); });
    if (track) {
      node->requires_grad = true;
      node->inputs = std::move(inputs);
      node->backward = std::move(backward);
    }
  }
  return Tensor(std::move(node));
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---------------------------------------------------------------------------
// elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary_op(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double s) {
  return unary_op(a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor exp(const Tensor& a) {
  return unary_op(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary_op(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor tanh(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(a, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Tensor silu(const Tensor& a) {
  return unary_op(
      a, [](double x) { return x * stable_sigmoid(x); },
      [](double x, double) {
        const double s = stable_sigmoid(x);
        return s + x * s * (1.0 - s);
      });
}

Tensor softplus(const Tensor& a) {
  return unary_op(
      a, [](double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); },
      [](double x, double) { return stable_sigmoid(x); });
}

Tensor square(const Tensor& a) {
  return unary_op(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

// ---------------------------------------------------------------------------
// linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw DimensionError(fmt::format("matmul needs rank >= 2 operands, got {} and {}",
                                     shape_str(a.shape()), shape_str(b.shape())));
  }
  const std::size_t m = a.dim(-2);
  const std::size_t k = a.dim(-1);
  const std::size_t n = b.dim(-1);
  if (b.dim(-2) != k) {
    throw DimensionError(fmt::format("matmul inner extents differ: {} x {}", shape_str(a.shape()),
                                     shape_str(b.shape())));
  }
  const Shape a_batch(a.shape().begin(), a.shape().end() - 2);
  const Shape b_batch(b.shape().begin(), b.shape().end() - 2);
  Shape batch;
  try {
    batch = broadcast_shapes(a_batch, b_batch);
  } catch (const DimensionError&) {
    throw DimensionError(fmt::format("matmul batch extents not broadcastable: {} x {}",
                                     shape_str(a.shape()), shape_str(b.shape())));
  }
  const std::size_t n_batch = numel_of(batch);

  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<double> values(n_batch * m * n, 0.0);

  // Weight-style right operand: fold all batches into the row dimension.
  const bool fold = b.rank() == 2;
  auto ia = std::make_shared<BroadcastIndex>(a_batch, batch);
  auto ib = std::make_shared<BroadcastIndex>(b_batch, batch);
  auto av = a.data();
  auto bv = b.data();
  if (fold) {
    gemm_acc(av.data(), bv.data(), values.data(), n_batch * m, k, n);
  } else {
    for (std::size_t i = 0; i < n_batch; ++i) {
      gemm_acc(av.data() + (*ia)(i) * m * k, bv.data() + (*ib)(i) * k * n,
               values.data() + i * m * n, m, k, n);
    }
  }
  return make_op(std::move(out_shape), std::move(values), {a, b},
                 [a, b, ia, ib, fold, n_batch, m, k, n](std::span<const double> g) mutable {
                   auto av = a.data();
                   auto bv = b.data();
                   if (a.requires_grad()) {
                     auto ga = a.grad_buffer();
                     if (fold) {
                       gemm_grad_a(g.data(), bv.data(), ga.data(), n_batch * m, k, n);
                     } else {
                       for (std::size_t i = 0; i < n_batch; ++i) {
                         gemm_grad_a(g.data() + i * m * n, bv.data() + (*ib)(i) * k * n,
                                     ga.data() + (*ia)(i) * m * k, m, k, n);
                       }
                     }
                   }
                   if (b.requires_grad()) {
                     auto gb = b.grad_buffer();
                     if (fold) {
                       gemm_grad_b(av.data(), g.data(), gb.data(), n_batch * m, k, n);
                     } else {
                       for (std::size_t i = 0; i < n_batch; ++i) {
                         gemm_grad_b(av.data() + (*ia)(i) * m * k, g.data() + i * m * n,
                                     gb.data() + (*ib)(i) * k * n, m, k, n);
                       }
                     }
                   }
                 });
}

Tensor transpose(const Tensor& a, int axis0, int axis1) {
  const std::size_t rank = a.rank();
  const std::size_t x0 = normalize_axis(axis0, rank);
  const std::size_t x1 = normalize_axis(axis1, rank);
  Shape out = a.shape();
  std::swap(out[x0], out[x1]);
  if (x0 == x1) return reshape(a, out);

  std::vector<std::size_t> in_stride(rank, 1);
  for (std::size_t d = rank - 1; d-- > 0;) in_stride[d] = in_stride[d + 1] * a.shape()[d + 1];
  std::vector<std::size_t> stride = in_stride;
  std::swap(stride[x0], stride[x1]);

  const std::size_t n = a.numel();
  auto source = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t offset = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    (*source)[flat] = offset;
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      offset += stride[d];
      if (idx[d] < out[d]) break;
      offset -= stride[d] * idx[d];
      idx[d] = 0;
    }
  }
  std::vector<double> values(n);
  auto av = a.data();
  for (std::size_t i = 0; i < n; ++i) values[i] = av[(*source)[i]];
  return make_op(std::move(out), std::move(values), {a}, [a, source](std::span<const double> g) mutable {
    auto ga = a.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) ga[(*source)[i]] += g[i];
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel_of(shape) != a.numel()) {
    throw DimensionError(fmt::format("cannot reshape {} into {}", shape_str(a.shape()), shape_str(shape)));
  }
  return make_op(std::move(shape), a.to_vector(), {a}, [a](std::span<const double> g) mutable {
    auto ga = a.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

// ---------------------------------------------------------------------------
// reductions

Tensor sum(const Tensor& a) {
  auto av = a.data();
  const double total = std::accumulate(av.begin(), av.end(), 0.0);
  return make_op({1}, {total}, {a}, [a](std::span<const double> g) mutable {
    for (auto& v : a.grad_buffer()) v += g[0];
  });
}

Tensor sum(const Tensor& a, int axis, bool keepdim) {
  const std::size_t ax = normalize_axis(axis, a.rank());
  const AxisSplit s = split_at(a.shape(), ax);
  Shape out = a.shape();
  if (keepdim || out.size() == 1) {
    out[ax] = 1;
  } else {
    out.erase(out.begin() + static_cast<std::ptrdiff_t>(ax));
  }
  std::vector<double> values(s.outer * s.inner, 0.0);
  auto av = a.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t e = 0; e < s.extent; ++e) {
      const double* src = av.data() + (o * s.extent + e) * s.inner;
      double* dst = values.data() + o * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
    }
  }
  return make_op(std::move(out), std::move(values), {a}, [a, s](std::span<const double> g) mutable {
    auto ga = a.grad_buffer();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t e = 0; e < s.extent; ++e) {
        double* dst = ga.data() + (o * s.extent + e) * s.inner;
        const double* src = g.data() + o * s.inner;
        for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
      }
    }
  });
}

Tensor mean(const Tensor& a) { return mul_scalar(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor mean(const Tensor& a, int axis, bool keepdim) {
  const double extent = static_cast<double>(a.dim(axis));
  return mul_scalar(sum(a, axis, keepdim), 1.0 / extent);
}

Tensor softmax(const Tensor& a, int axis) {
  const std::size_t ax = normalize_axis(axis, a.rank());
  const AxisSplit s = split_at(a.shape(), ax);
  auto av = a.data();
  std::vector<double> values(a.numel());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      double mx = -INFINITY;
      for (std::size_t e = 0; e < s.extent; ++e) {
        const double x = av[base + e * s.inner];
        if (std::isnan(x)) throw NumericError("softmax: NaN input");
        mx = std::max(mx, x);
      }
      double total = 0.0;
      for (std::size_t e = 0; e < s.extent; ++e) {
        const double y = std::exp(av[base + e * s.inner] - mx);
        values[base + e * s.inner] = y;
        total += y;
      }
      for (std::size_t e = 0; e < s.extent; ++e) values[base + e * s.inner] /= total;
    }
  }
  auto y = std::make_shared<std::vector<double>>(values);
  return make_op(a.shape(), std::move(values), {a}, [a, y, s](std::span<const double> g) mutable {
    auto ga = a.grad_buffer();
    const auto& yv = *y;
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.extent * s.inner + i;
        double dot = 0.0;
        for (std::size_t e = 0; e < s.extent; ++e) {
          dot += g[base + e * s.inner] * yv[base + e * s.inner];
        }
        for (std::size_t e = 0; e < s.extent; ++e) {
          const std::size_t j = base + e * s.inner;
          ga[j] += yv[j] * (g[j] - dot);
        }
      }
    }
  });
}

Tensor rms_norm(const Tensor& x, const Tensor& weight, double eps) {
  const std::size_t n = x.dim(-1);
  if (weight.numel() != n) {
    throw DimensionError(fmt::format("rms_norm weight {} does not match input {}",
                                     shape_str(weight.shape()), shape_str(x.shape())));
  }
  const std::size_t rows = x.numel() / n;
  auto xv = x.data();
  auto wv = weight.data();
  auto inv = std::make_shared<std::vector<double>>(rows);
  std::vector<double> values(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * n;
    double ms = 0.0;
    for (std::size_t j = 0; j < n; ++j) ms += row[j] * row[j];
    const double rinv = 1.0 / std::sqrt(ms / static_cast<double>(n) + eps);
    (*inv)[r] = rinv;
    for (std::size_t j = 0; j < n; ++j) values[r * n + j] = row[j] * rinv * wv[j];
  }
  return make_op(x.shape(), std::move(values), {x, weight},
                 [x, weight, inv, rows, n](std::span<const double> g) mutable {
                   auto xv = x.data();
                   auto wv = weight.data();
                   if (x.requires_grad()) {
                     auto gx = x.grad_buffer();
                     for (std::size_t r = 0; r < rows; ++r) {
                       const double rinv = (*inv)[r];
                       const double* row = xv.data() + r * n;
                       const double* grow = g.data() + r * n;
                       double dot = 0.0;
                       for (std::size_t j = 0; j < n; ++j) dot += grow[j] * wv[j] * row[j];
                       const double c = dot * rinv * rinv * rinv / static_cast<double>(n);
                       for (std::size_t j = 0; j < n; ++j) {
                         gx[r * n + j] += grow[j] * wv[j] * rinv - row[j] * c;
                       }
                     }
                   }
                   if (weight.requires_grad()) {
                     auto gw = weight.grad_buffer();
                     for (std::size_t r = 0; r < rows; ++r) {
                       const double rinv = (*inv)[r];
                       for (std::size_t j = 0; j < n; ++j) {
                         gw[j] += g[r * n + j] * xv[r * n + j] * rinv;
                       }
                     }
                   }
                 });
}

Tensor mse_loss(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape()) {
    throw DimensionError(fmt::format("mse_loss shapes differ: {} vs {}", shape_str(pred.shape()),
                                     shape_str(target.shape())));
  }
  return mean(square(sub(pred, target)));
}

// ---------------------------------------------------------------------------
// indexing

Tensor slice(const Tensor& a, int axis, std::size_t start, std::size_t length) {
  const std::size_t ax = normalize_axis(axis, a.rank());
  const AxisSplit s = split_at(a.shape(), ax);
  if (length == 0 || start + length > s.extent) {
    throw DimensionError(fmt::format("slice [{}, {}) out of range for axis {} of {}", start,
                                     start + length, axis, shape_str(a.shape())));
  }
  Shape out = a.shape();
  out[ax] = length;
  std::vector<double> values(s.outer * length * s.inner);
  auto av = a.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(av.data() + (o * s.extent + start) * s.inner, length * s.inner,
                values.data() + o * length * s.inner);
  }
  return make_op(std::move(out), std::move(values), {a},
                 [a, s, start, length](std::span<const double> g) mutable {
                   auto ga = a.grad_buffer();
                   for (std::size_t o = 0; o < s.outer; ++o) {
                     double* dst = ga.data() + (o * s.extent + start) * s.inner;
                     const double* src = g.data() + o * length * s.inner;
                     for (std::size_t i = 0; i < length * s.inner; ++i) dst[i] += src[i];
                   }
                 });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  const std::size_t ax = normalize_axis(axis, parts[0].rank());
  Shape out = parts[0].shape();
  out[ax] = 0;
  for (const auto& p : parts) {
    Shape probe = p.shape();
    if (probe.size() != out.size()) throw DimensionError("concat rank mismatch");
    out[ax] += probe[ax];
    probe[ax] = 0;
    Shape expect = out;
    expect[ax] = 0;
    if (probe != expect) {
      throw DimensionError(fmt::format("concat shapes differ off-axis: {} vs {}",
                                       shape_str(parts[0].shape()), shape_str(p.shape())));
    }
  }
  const AxisSplit s = split_at(out, ax);
  std::vector<double> values(numel_of(out));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t len = p.dim(static_cast<int>(ax));
    auto pv = p.data();
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy_n(pv.data() + o * len * s.inner, len * s.inner,
                  values.data() + (o * s.extent + offset) * s.inner);
    }
    offset += len;
  }
  return make_op(std::move(out), std::move(values), parts,
                 [parts, offsets, s, ax](std::span<const double> g) mutable {
                   for (std::size_t k = 0; k < parts.size(); ++k) {
                     if (!parts[k].requires_grad()) continue;
                     const std::size_t len = parts[k].dim(static_cast<int>(ax));
                     auto gp = parts[k].grad_buffer();
                     for (std::size_t o = 0; o < s.outer; ++o) {
                       const double* src = g.data() + (o * s.extent + offsets[k]) * s.inner;
                       double* dst = gp.data() + o * len * s.inner;
                       for (std::size_t i = 0; i < len * s.inner; ++i) dst[i] += src[i];
                     }
                   }
                 });
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows) {
  if (rows.empty()) throw ContractError("gather_rows with no rows");
  const std::size_t n_rows = a.dim(0);
  const std::size_t width = a.numel() / n_rows;
  Shape out = a.shape();
  out[0] = rows.size();
  std::vector<double> values(rows.size() * width);
  auto av = a.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n_rows) {
      throw DimensionError(fmt::format("gather_rows: row {} out of range ({})", rows[i], n_rows));
    }
    std::copy_n(av.data() + rows[i] * width, width, values.data() + i * width);
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return make_op(std::move(out), std::move(values), {a},
                 [a, idx = std::move(idx), width](std::span<const double> g) mutable {
                   auto ga = a.grad_buffer();
                   for (std::size_t i = 0; i < idx.size(); ++i) {
                     for (std::size_t j = 0; j < width; ++j) ga[idx[i] * width + j] += g[i * width + j];
                   }
                 });
}

Tensor scatter_add_rows(const Tensor& src, std::span<const std::size_t> rows, std::size_t n_rows) {
  if (rows.size() != src.dim(0)) throw DimensionError("scatter_add_rows: index count != rows");
  const std::size_t width = src.numel() / src.dim(0);
  Shape out = src.shape();
  out[0] = n_rows;
  std::vector<double> values(n_rows * width, 0.0);
  auto sv = src.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n_rows) throw DimensionError("scatter_add_rows: row out of range");
    for (std::size_t j = 0; j < width; ++j) values[rows[i] * width + j] += sv[i * width + j];
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return make_op(std::move(out), std::move(values), {src},
                 [src, idx = std::move(idx), width](std::span<const double> g) mutable {
                   auto gs = src.grad_buffer();
                   for (std::size_t i = 0; i < idx.size(); ++i) {
                     for (std::size_t j = 0; j < width; ++j) gs[i * width + j] += g[idx[i] * width + j];
                   }
                 });
}

Tensor take(const Tensor& a, std::span<const std::size_t> flat_indices) {
  if (flat_indices.empty()) throw ContractError("take with no indices");
  std::vector<double> values(flat_indices.size());
  auto av = a.data();
  for (std::size_t i = 0; i < flat_indices.size(); ++i) {
    if (flat_indices[i] >= a.numel()) throw DimensionError("take: index out of range");
    values[i] = av[flat_indices[i]];
  }
  std::vector<std::size_t> idx(flat_indices.begin(), flat_indices.end());
  return make_op({idx.size()}, std::move(values), {a},
                 [a, idx](std::span<const double> g) mutable {
                   auto ga = a.grad_buffer();
                   for (std::size_t i = 0; i < idx.size(); ++i) ga[idx[i]] += g[i];
                 });
}

Tensor repeat_interleave(const Tensor& a, int axis, std::size_t repeats) {
  if (repeats == 0) throw ContractError("repeat_interleave with zero repeats");
  const std::size_t ax = normalize_axis(axis, a.rank());
  const AxisSplit s = split_at(a.shape(), ax);
  if (repeats == 1) return reshape(a, a.shape());
  Shape out = a.shape();
  out[ax] *= repeats;
  std::vector<double> values(a.numel() * repeats);
  auto av = a.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t e = 0; e < s.extent; ++e) {
      const double* src = av.data() + (o * s.extent + e) * s.inner;
      for (std::size_t r = 0; r < repeats; ++r) {
        std::copy_n(src, s.inner, values.data() + ((o * s.extent + e) * repeats + r) * s.inner);
      }
    }
  }
  return make_op(std::move(out), std::move(values), {a}, [a, s, repeats](std::span<const double> g) mutable {
    auto ga = a.grad_buffer();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t e = 0; e < s.extent; ++e) {
        double* dst = ga.data() + (o * s.extent + e) * s.inner;
        for (std::size_t r = 0; r < repeats; ++r) {
          const double* src = g.data() + ((o * s.extent + e) * repeats + r) * s.inner;
          for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// convolution

Tensor depthwise_conv_time(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
  if (x.rank() != 3 || kernel.rank() != 2 || bias.numel() != kernel.dim(0) ||
      x.dim(2) != kernel.dim(0) || x.dim(1) < kernel.dim(1)) {
    throw DimensionError(fmt::format("depthwise_conv_time: input {} kernel {} bias {}",
                                     shape_str(x.shape()), shape_str(kernel.shape()),
                                     shape_str(bias.shape())));
  }
  const std::size_t batch = x.dim(0);
  const std::size_t padded = x.dim(1);
  const std::size_t channels = x.dim(2);
  const std::size_t width = kernel.dim(1);
  const std::size_t steps = padded - width + 1;
  std::vector<double> values(batch * steps * channels);
  auto xv = x.data();
  auto kv = kernel.data();
  auto bv = bias.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < steps; ++t) {
      double* out = values.data() + (b * steps + t) * channels;
      for (std::size_t c = 0; c < channels; ++c) out[c] = bv[c];
      for (std::size_t j = 0; j < width; ++j) {
        const double* in = xv.data() + (b * padded + t + j) * channels;
        for (std::size_t c = 0; c < channels; ++c) out[c] += kv[c * width + j] * in[c];
      }
    }
  }
  return make_op({batch, steps, channels}, std::move(values), {x, kernel, bias},
                 [x, kernel, bias, batch, padded, channels, width, steps](std::span<const double> g) mutable {
                   auto xv = x.data();
                   auto kv = kernel.data();
                   std::span<double> gx, gk, gb;
                   if (x.requires_grad()) gx = x.grad_buffer();
                   if (kernel.requires_grad()) gk = kernel.grad_buffer();
                   if (bias.requires_grad()) gb = bias.grad_buffer();
                   for (std::size_t b = 0; b < batch; ++b) {
                     for (std::size_t t = 0; t < steps; ++t) {
                       const double* go = g.data() + (b * steps + t) * channels;
                       if (!gb.empty()) {
                         for (std::size_t c = 0; c < channels; ++c) gb[c] += go[c];
                       }
                       for (std::size_t j = 0; j < width; ++j) {
                         const std::size_t row = (b * padded + t + j) * channels;
                         for (std::size_t c = 0; c < channels; ++c) {
                           if (!gx.empty()) gx[row + c] += kv[c * width + j] * go[c];
                           if (!gk.empty()) gk[c * width + j] += xv[row + c] * go[c];
                         }
                       }
                     }
                   }
                 });
}

Tensor conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride) {
  if (stride == 0) throw ContractError("conv1d stride must be positive");
  if (x.rank() != 3 || weight.rank() != 3 || x.dim(1) != weight.dim(1) ||
      bias.numel() != weight.dim(0) || x.dim(2) < weight.dim(2)) {
    throw DimensionError(fmt::format("conv1d: input {} weight {} bias {}", shape_str(x.shape()),
                                     shape_str(weight.shape()), shape_str(bias.shape())));
  }
  const std::size_t batch = x.dim(0);
  const std::size_t cin = x.dim(1);
  const std::size_t len = x.dim(2);
  const std::size_t cout = weight.dim(0);
  const std::size_t width = weight.dim(2);
  const std::size_t steps = (len - width) / stride + 1;
  std::vector<double> values(batch * cout * steps);
  auto xv = x.data();
  auto wv = weight.data();
  auto bv = bias.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t o = 0; o < cout; ++o) {
      double* out = values.data() + (b * cout + o) * steps;
      for (std::size_t t = 0; t < steps; ++t) out[t] = bv[o];
      for (std::size_t c = 0; c < cin; ++c) {
        const double* in = xv.data() + (b * cin + c) * len;
        const double* w = wv.data() + (o * cin + c) * width;
        for (std::size_t t = 0; t < steps; ++t) {
          double acc = 0.0;
          for (std::size_t j = 0; j < width; ++j) acc += w[j] * in[t * stride + j];
          out[t] += acc;
        }
      }
    }
  }
  return make_op({batch, cout, steps}, std::move(values), {x, weight, bias},
                 [x, weight, bias, batch, cin, len, cout, width, steps, stride](std::span<const double> g) mutable {
                   auto xv = x.data();
                   auto wv = weight.data();
                   std::span<double> gx, gw, gb;
                   if (x.requires_grad()) gx = x.grad_buffer();
                   if (weight.requires_grad()) gw = weight.grad_buffer();
                   if (bias.requires_grad()) gb = bias.grad_buffer();
                   for (std::size_t b = 0; b < batch; ++b) {
                     for (std::size_t o = 0; o < cout; ++o) {
                       const double* go = g.data() + (b * cout + o) * steps;
                       if (!gb.empty()) {
                         for (std::size_t t = 0; t < steps; ++t) gb[o] += go[t];
                       }
                       for (std::size_t c = 0; c < cin; ++c) {
                         const std::size_t in_base = (b * cin + c) * len;
                         const std::size_t w_base = (o * cin + c) * width;
                         for (std::size_t t = 0; t < steps; ++t) {
                           for (std::size_t j = 0; j < width; ++j) {
                             if (!gx.empty()) gx[in_base + t * stride + j] += wv[w_base + j] * go[t];
                             if (!gw.empty()) gw[w_base + j] += xv[in_base + t * stride + j] * go[t];
                           }
                         }
                       }
                     }
                   }
                 });
}

}  // namespace jambatalk
