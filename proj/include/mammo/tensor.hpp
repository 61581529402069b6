// Minimal reverse-mode automatic differentiation over dense row-major arrays.
//
// Every primitive returns a new tensor whose node remembers its inputs and a
// closure that pushes the output gradient back into them. Nodes carry a
// per-thread sequence number; because inputs always exist before the ops that
// consume them, sorting reachable nodes by descending sequence number yields
// an exact reverse topological order for backward().
//
// Storage is templated on the scalar type. Training and inference use float;
// the double instantiation exists so gradient checks can run a high-precision
// finite-difference route through the very same kernels.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <type_traits>
#include <vector>

namespace mammo {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class AttributeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

enum class OpKind : std::uint8_t {
  Leaf,
  Add,
  AddBias,
  Mul,
  Scale,
  Matmul,
  Conv2d,
  DepthwiseConv2d,
  PointwiseConv2d,
  Relu,
  Gelu,
  Softmax,
  LayerNorm,
  BatchNorm,
  MaxPool2d,
  AvgPool2d,
  GlobalAvgPool,
  Flatten,
  Reshape,
  Transpose,
  Concat,
  EmbeddingAdd,
  DropoutIdentity,
  Gather,
  MeanAxis,
  Sum,
  SoftmaxCrossEntropy,
};

inline std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Add: return "add";
    case OpKind::AddBias: return "add_bias";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::Matmul: return "matmul";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::DepthwiseConv2d: return "depthwise_conv2d";
    case OpKind::PointwiseConv2d: return "pointwise_conv2d";
    case OpKind::Relu: return "relu";
    case OpKind::Gelu: return "gelu";
    case OpKind::Softmax: return "softmax";
    case OpKind::LayerNorm: return "layer_norm";
    case OpKind::BatchNorm: return "batch_norm";
    case OpKind::MaxPool2d: return "max_pool2d";
    case OpKind::AvgPool2d: return "avg_pool2d";
    case OpKind::GlobalAvgPool: return "global_avg_pool";
    case OpKind::Flatten: return "flatten";
    case OpKind::Reshape: return "reshape";
    case OpKind::Transpose: return "transpose";
    case OpKind::Concat: return "concat";
    case OpKind::EmbeddingAdd: return "embedding_add";
    case OpKind::DropoutIdentity: return "dropout_identity";
    case OpKind::Gather: return "gather";
    case OpKind::MeanAxis: return "mean_axis";
    case OpKind::Sum: return "sum";
    case OpKind::SoftmaxCrossEntropy: return "softmax_cross_entropy";
  }
  return "unknown";
}

/// How backward closures propagate through nonlinearities.
///
/// Guided: relu/gelu pass only positive upstream gradient where the local
/// derivative is positive (guided backpropagation).
///
/// DeepLiftRescale: the leading half of every tensor holds the actual input,
/// the trailing half the reference. Elementwise nonlinearities and max
/// pooling replace the local derivative with the secant Δy/Δx computed
/// between the halves; linear ops keep their ordinary gradients. Ops that
/// multiply two activations (attention products, normalisation) fall back to
/// the gradient at the actual input.
enum class BackwardMode : std::uint8_t { Standard, Guided, DeepLiftRescale };

struct GraphContext {
  std::uint64_t next_seq = 1;
  bool grad_enabled = true;
  BackwardMode mode = BackwardMode::Standard;
};

inline GraphContext& graph_context() {
  thread_local GraphContext ctx;
  return ctx;
}

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(graph_context().grad_enabled) { graph_context().grad_enabled = false; }
  ~NoGradGuard() { graph_context().grad_enabled = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

class BackwardModeGuard {
 public:
  explicit BackwardModeGuard(BackwardMode mode) : prev_(graph_context().mode) { graph_context().mode = mode; }
  ~BackwardModeGuard() { graph_context().mode = prev_; }
  BackwardModeGuard(const BackwardModeGuard&) = delete;
  BackwardModeGuard& operator=(const BackwardModeGuard&) = delete;

 private:
  BackwardMode prev_;
};

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  OpKind op = OpKind::Leaf;
  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
  }
};

}  // namespace detail

template <typename T>
class BasicTensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  BasicTensor() = default;

  static BasicTensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<T> data(numel_of(shape), T(0));
    return from(std::move(shape), std::move(data), requires_grad);
  }

  static BasicTensor full(Shape shape, T value, bool requires_grad = false) {
    std::vector<T> data(numel_of(shape), value);
    return from(std::move(shape), std::move(data), requires_grad);
  }

  static BasicTensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
    for (auto d : shape) {
      if (d == 0) throw ShapeError("tensor: zero-sized dimension in " + shape_str(shape));
    }
    if (numel_of(shape) != data.size()) {
      throw ShapeError("tensor: shape " + shape_str(shape) + " needs " + std::to_string(numel_of(shape)) +
                       " values, got " + std::to_string(data.size()));
    }
    auto node = std::make_shared<detail::Node<T>>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    node->seq = graph_context().next_seq++;
    return BasicTensor(std::move(node));
  }

  static BasicTensor scalar(T value, bool requires_grad = false) { return from({1}, {value}, requires_grad); }

  explicit BasicTensor(NodePtr node) : node_(std::move(node)) {}

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }
  OpKind op() const { return node_->op; }

  std::span<const T> data() const { return node_->data; }
  /// Mutable access for parameter updates and test probes; not recorded.
  std::span<T> mutable_data() { return node_->data; }
  T item() const {
    if (numel() != 1) throw ShapeError("item: tensor " + shape_str(shape()) + " is not a scalar");
    return node_->data[0];
  }
  T at(std::size_t flat) const { return node_->data.at(flat); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool value) { node_->requires_grad = value; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  /// Copy of the values with no graph history.
  BasicTensor detach(bool requires_grad = false) const { return from(shape(), node_->data, requires_grad); }

  template <typename U>
  BasicTensor<U> cast(bool requires_grad = false) const {
    std::vector<U> out(node_->data.begin(), node_->data.end());
    return BasicTensor<U>::from(shape(), std::move(out), requires_grad);
  }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

namespace detail {

template <typename T>
bool any_requires_grad(std::initializer_list<const BasicTensor<T>*> inputs) {
  if (!graph_context().grad_enabled) return false;
  for (const auto* t : inputs) {
    if (t && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

/// Wraps a computed output into a tensor; when recording, attaches the inputs
/// and the backward closure.
template <typename T>
BasicTensor<T> make_result(OpKind op, Shape shape, std::vector<T> data, std::vector<BasicTensor<T>> inputs,
                           std::function<void(Node<T>&)> backward) {
  auto out = BasicTensor<T>::from(std::move(shape), std::move(data));
  bool record = graph_context().grad_enabled &&
                std::any_of(inputs.begin(), inputs.end(), [](const auto& t) { return t.requires_grad(); });
  auto& node = *out.node();
  node.op = op;
  if (record) {
    node.requires_grad = true;
    for (auto& t : inputs) node.inputs.push_back(t.node());
    node.backward = std::move(backward);
  }
  return out;
}

template <typename T>
void accumulate(Node<T>& target, std::span<const double> values) {
  if (!target.requires_grad) return;
  target.ensure_grad();
  for (std::size_t i = 0; i < values.size(); ++i) target.grad[i] += static_cast<T>(values[i]);
}

template <typename T>
  requires(!std::is_same_v<T, double>)
void accumulate(Node<T>& target, std::span<const T> values) {
  if (!target.requires_grad) return;
  target.ensure_grad();
  for (std::size_t i = 0; i < values.size(); ++i) target.grad[i] += values[i];
}

// C[M×N] += A[M×K]·B[K×N] (row-major), accumulated in double.
template <typename TA, typename TB, typename TC>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const TA* A, const TB* B, TC* C) {
  std::vector<double> acc(N);
  for (std::size_t i = 0; i < M; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const TA* arow = A + i * K;
    for (std::size_t k = 0; k < K; ++k) {
      const double a = static_cast<double>(arow[k]);
      if (a == 0.0) continue;
      const TB* brow = B + k * N;
      for (std::size_t j = 0; j < N; ++j) acc[j] += a * static_cast<double>(brow[j]);
    }
    TC* crow = C + i * N;
    for (std::size_t j = 0; j < N; ++j) crow[j] = static_cast<TC>(static_cast<double>(crow[j]) + acc[j]);
  }
}

// C[M×N] += Aᵀ·B where A is stored K×M.
template <typename TA, typename TB, typename TC>
void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const TA* A, const TB* B, TC* C) {
  std::vector<double> acc(N);
  for (std::size_t i = 0; i < M; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t k = 0; k < K; ++k) {
      const double a = static_cast<double>(A[k * M + i]);
      if (a == 0.0) continue;
      const TB* brow = B + k * N;
      for (std::size_t j = 0; j < N; ++j) acc[j] += a * static_cast<double>(brow[j]);
    }
    TC* crow = C + i * N;
    for (std::size_t j = 0; j < N; ++j) crow[j] = static_cast<TC>(static_cast<double>(crow[j]) + acc[j]);
  }
}

template <typename T>
std::vector<T> transpose2d(const T* src, std::size_t rows, std::size_t cols) {
  std::vector<T> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = src[r * cols + c];
  return out;
}

// C[M×N] += A[M×K]·Bᵀ where B is stored N×K.
template <typename TA, typename TB, typename TC>
void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const TA* A, const TB* B, TC* C) {
  auto bt = transpose2d(B, N, K);
  gemm_nn(M, N, K, A, bt.data(), C);
}

struct ConvGeom {
  std::size_t batch, in_ch, height, width, out_ch, kh, kw, stride, pad, out_h, out_w;
};

template <typename T>
void im2col(const T* x, const ConvGeom& g, T* cols) {
  const std::size_t n = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.in_ch; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        T* row = cols + ((c * g.kh + ky) * g.kw + kx) * n;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.height) && ix < static_cast<long>(g.width);
            row[oy * g.out_w + ox] = inside ? x[(c * g.height + iy) * g.width + ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const double* cols, const ConvGeom& g, double* x) {
  const std::size_t n = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.in_ch; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const double* row = cols + ((c * g.kh + ky) * g.kw + kx) * n;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.width)) continue;
            x[(c * g.height + iy) * g.width + ix] += row[oy * g.out_w + ox];
          }
        }
      }
    }
  }
}

inline double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline double gelu_derivative(double x) {
  constexpr double inv_sqrt_2pi = 0.3989422804014327;
  return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

inline void require_rank(std::string_view op, const Shape& s, std::size_t rank) {
  if (s.size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(s));
  }
}

/// Elementwise secant multipliers between the actual (leading) half and the
/// reference (trailing) half; `fallback` supplies the derivative when |Δx|
/// is too small for a stable ratio.
template <typename T, typename F, typename D>
void deeplift_elementwise(Node<T>& self, const Node<T>& in, F&& fn, D&& deriv) {
  const std::size_t n = in.data.size();
  if (n % 2 != 0) throw GraphError("deeplift: tensor size is odd; inputs must be stacked as [actual; reference]");
  const std::size_t half = n / 2;
  std::vector<double> g(n, 0.0);
  for (std::size_t i = 0; i < half; ++i) {
    const double x = in.data[i], xr = in.data[i + half];
    const double dx = x - xr;
    const double m = std::abs(dx) < 1e-7 ? deriv(x) : (fn(x) - fn(xr)) / dx;
    g[i] = static_cast<double>(self.grad[i]) * m;
  }
  accumulate(*self.inputs[0], std::span<const double>(g));
}

}  // namespace detail

/// Attributes shared by the generic primitive dispatcher.
struct OpAttrs {
  std::size_t stride = 1;
  std::size_t pad = 0;
  std::size_t kernel = 2;
  std::size_t axis = 0;
  std::vector<std::size_t> perm;
  Shape shape;
  std::vector<std::size_t> indices;
  std::vector<int> labels;
  std::vector<double> class_weights;
  double scalar = 1.0;
  double eps = 1e-5;
};

namespace ops {

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return detail::make_result<T>(OpKind::Add, a.shape(), std::move(out), {a, b}, [](detail::Node<T>& self) {
    for (auto& in : self.inputs) detail::accumulate(*in, std::span<const T>(self.grad));
  });
}

/// x + b broadcast along `axis`; b has length x.shape[axis].
template <typename T>
BasicTensor<T> add_bias(const BasicTensor<T>& x, const BasicTensor<T>& b, std::size_t axis) {
  if (axis >= x.rank()) throw AttributeError("add_bias: axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
  if (b.numel() != x.dim(axis)) {
    throw ShapeError("add_bias: bias " + shape_str(b.shape()) + " does not match dim " + std::to_string(axis) + " of " +
                     shape_str(x.shape()));
  }
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t n = x.dim(axis);
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] + b.data()[(i / inner) % n];
  return detail::make_result<T>(OpKind::AddBias, x.shape(), std::move(out), {x, b}, [inner, n](detail::Node<T>& self) {
    detail::accumulate(*self.inputs[0], std::span<const T>(self.grad));
    std::vector<double> gb(n, 0.0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) gb[(i / inner) % n] += self.grad[i];
    detail::accumulate(*self.inputs[1], std::span<const double>(gb));
  });
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return detail::make_result<T>(OpKind::Mul, a.shape(), std::move(out), {a, b}, [](detail::Node<T>& self) {
    auto& a = *self.inputs[0];
    auto& b = *self.inputs[1];
    std::vector<T> ga(self.grad.size()), gb(self.grad.size());
    for (std::size_t i = 0; i < ga.size(); ++i) {
      ga[i] = self.grad[i] * b.data[i];
      gb[i] = self.grad[i] * a.data[i];
    }
    detail::accumulate(a, std::span<const T>(ga));
    detail::accumulate(b, std::span<const T>(gb));
  });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, double factor) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(x.data()[i] * factor);
  return detail::make_result<T>(OpKind::Scale, x.shape(), std::move(out), {x}, [factor](detail::Node<T>& self) {
    std::vector<double> g(self.grad.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * factor;
    detail::accumulate(*self.inputs[0], std::span<const double>(g));
  });
}

/// a[..., K]·b[K, N] -> [..., N], or batched a[B, M, K]·b[B, K, N] -> [B, M, N].
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() < 2) throw ShapeError("matmul: lhs must have rank >= 2, got " + shape_str(a.shape()));
  if (b.rank() == 2) {
    const std::size_t K = a.shape().back();
    if (b.dim(0) != K) throw ShapeError("matmul: inner dims differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const std::size_t N = b.dim(1);
    const std::size_t M = a.numel() / K;
    Shape out_shape = a.shape();
    out_shape.back() = N;
    std::vector<T> out(M * N, T(0));
    detail::gemm_nn(M, N, K, a.data().data(), b.data().data(), out.data());
    return detail::make_result<T>(OpKind::Matmul, out_shape, std::move(out), {a, b}, [M, N, K](detail::Node<T>& self) {
      auto& a = *self.inputs[0];
      auto& b = *self.inputs[1];
      if (a.requires_grad) {
        std::vector<double> ga(M * K, 0.0);
        detail::gemm_nt(M, K, N, self.grad.data(), b.data.data(), ga.data());
        detail::accumulate(a, std::span<const double>(ga));
      }
      if (b.requires_grad) {
        std::vector<double> gb(K * N, 0.0);
        detail::gemm_tn(K, N, M, a.data.data(), self.grad.data(), gb.data());
        detail::accumulate(b, std::span<const double>(gb));
      }
    });
  }
  if (a.rank() == 3 && b.rank() == 3) {
    const std::size_t B = a.dim(0), M = a.dim(1), K = a.dim(2), N = b.dim(2);
    if (b.dim(0) != B || b.dim(1) != K) {
      throw ShapeError("matmul: batched dims differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    std::vector<T> out(B * M * N, T(0));
    for (std::size_t i = 0; i < B; ++i) {
      detail::gemm_nn(M, N, K, a.data().data() + i * M * K, b.data().data() + i * K * N, out.data() + i * M * N);
    }
    return detail::make_result<T>(OpKind::Matmul, {B, M, N}, std::move(out), {a, b}, [B, M, N, K](detail::Node<T>& self) {
      auto& a = *self.inputs[0];
      auto& b = *self.inputs[1];
      std::vector<double> ga(a.requires_grad ? B * M * K : 0, 0.0);
      std::vector<double> gb(b.requires_grad ? B * K * N : 0, 0.0);
      for (std::size_t i = 0; i < B; ++i) {
        const T* g = self.grad.data() + i * M * N;
        if (a.requires_grad) detail::gemm_nt(M, K, N, g, b.data.data() + i * K * N, ga.data() + i * M * K);
        if (b.requires_grad) detail::gemm_tn(K, N, M, a.data.data() + i * M * K, g, gb.data() + i * K * N);
      }
      detail::accumulate(a, std::span<const double>(ga));
      detail::accumulate(b, std::span<const double>(gb));
    });
  }
  throw ShapeError("matmul: unsupported ranks " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
}

/// NCHW convolution; weight [Co, Ci, kh, kw]; optional bias [Co].
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>* bias, std::size_t stride,
                      std::size_t pad, OpKind kind = OpKind::Conv2d) {
  const auto name = op_name(kind);
  if (stride == 0) throw AttributeError(std::string(name) + ": stride must be positive");
  detail::require_rank(name, x.shape(), 4);
  detail::require_rank(name, w.shape(), 4);
  if (w.dim(1) != x.dim(1)) {
    throw ShapeError(std::string(name) + ": weight expects " + std::to_string(w.dim(1)) + " input channels, input " +
                     shape_str(x.shape()) + " has " + std::to_string(x.dim(1)));
  }
  detail::ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), w.dim(3), stride, pad, 0, 0};
  if (g.height + 2 * pad < g.kh || g.width + 2 * pad < g.kw) {
    throw ShapeError(std::string(name) + ": kernel " + shape_str(w.shape()) + " larger than padded input " + shape_str(x.shape()));
  }
  g.out_h = (g.height + 2 * pad - g.kh) / stride + 1;
  g.out_w = (g.width + 2 * pad - g.kw) / stride + 1;
  if (bias && bias->numel() != g.out_ch) {
    throw ShapeError(std::string(name) + ": bias " + shape_str(bias->shape()) + " does not match " + std::to_string(g.out_ch) +
                     " output channels");
  }
  const std::size_t K = g.in_ch * g.kh * g.kw;
  const std::size_t N = g.out_h * g.out_w;
  std::vector<T> out(g.batch * g.out_ch * N, T(0));
  std::vector<T> cols(K * N);
  for (std::size_t b = 0; b < g.batch; ++b) {
    T* ob = out.data() + b * g.out_ch * N;
    if (bias) {
      for (std::size_t c = 0; c < g.out_ch; ++c) std::fill(ob + c * N, ob + (c + 1) * N, bias->data()[c]);
    }
    detail::im2col(x.data().data() + b * g.in_ch * g.height * g.width, g, cols.data());
    detail::gemm_nn(g.out_ch, N, K, w.data().data(), cols.data(), ob);
  }
  std::vector<BasicTensor<T>> inputs{x, w};
  if (bias) inputs.push_back(*bias);
  const bool has_bias = bias != nullptr;
  return detail::make_result<T>(kind, {g.batch, g.out_ch, g.out_h, g.out_w}, std::move(out), std::move(inputs),
                                [g, K, N, has_bias](detail::Node<T>& self) {
                                  auto& x = *self.inputs[0];
                                  auto& w = *self.inputs[1];
                                  const std::size_t in_sz = g.in_ch * g.height * g.width;
                                  std::vector<T> cols(K * N);
                                  std::vector<double> gw(w.requires_grad ? g.out_ch * K : 0, 0.0);
                                  std::vector<double> gx(x.requires_grad ? g.batch * in_sz : 0, 0.0);
                                  std::vector<double> gcols(x.requires_grad ? K * N : 0);
                                  for (std::size_t b = 0; b < g.batch; ++b) {
                                    const T* gout = self.grad.data() + b * g.out_ch * N;
                                    if (w.requires_grad) {
                                      detail::im2col(x.data.data() + b * in_sz, g, cols.data());
                                      detail::gemm_nt(g.out_ch, K, N, gout, cols.data(), gw.data());
                                    }
                                    if (x.requires_grad) {
                                      std::fill(gcols.begin(), gcols.end(), 0.0);
                                      detail::gemm_tn(K, N, g.out_ch, w.data.data(), gout, gcols.data());
                                      detail::col2im_add<T>(gcols.data(), g, gx.data() + b * in_sz);
                                    }
                                  }
                                  detail::accumulate(w, std::span<const double>(gw));
                                  detail::accumulate(x, std::span<const double>(gx));
                                  if (has_bias && self.inputs[2]->requires_grad) {
                                    std::vector<double> gb(g.out_ch, 0.0);
                                    for (std::size_t b = 0; b < g.batch; ++b)
                                      for (std::size_t c = 0; c < g.out_ch; ++c)
                                        for (std::size_t i = 0; i < N; ++i) gb[c] += self.grad[(b * g.out_ch + c) * N + i];
                                    detail::accumulate(*self.inputs[2], std::span<const double>(gb));
                                  }
                                });
}

/// 1×1 convolution, weight [Co, Ci, 1, 1].
template <typename T>
BasicTensor<T> pointwise_conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>* bias) {
  detail::require_rank("pointwise_conv2d", w.shape(), 4);
  if (w.dim(2) != 1 || w.dim(3) != 1) throw ShapeError("pointwise_conv2d: kernel must be 1x1, got " + shape_str(w.shape()));
  return conv2d(x, w, bias, 1, 0, OpKind::PointwiseConv2d);
}

/// Per-channel convolution, weight [C, 1, k, k]; never mixes channels.
template <typename T>
BasicTensor<T> depthwise_conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>* bias,
                                std::size_t stride, std::size_t pad) {
  if (stride == 0) throw AttributeError("depthwise_conv2d: stride must be positive");
  detail::require_rank("depthwise_conv2d", x.shape(), 4);
  detail::require_rank("depthwise_conv2d", w.shape(), 4);
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (w.dim(0) != C || w.dim(1) != 1) {
    throw ShapeError("depthwise_conv2d: weight " + shape_str(w.shape()) + " does not match " + std::to_string(C) + " channels");
  }
  const std::size_t kh = w.dim(2), kw = w.dim(3);
  if (H + 2 * pad < kh || W + 2 * pad < kw) throw ShapeError("depthwise_conv2d: kernel larger than padded input");
  if (bias && bias->numel() != C) throw ShapeError("depthwise_conv2d: bias " + shape_str(bias->shape()) + " mismatch");
  const std::size_t Ho = (H + 2 * pad - kh) / stride + 1, Wo = (W + 2 * pad - kw) / stride + 1;
  std::vector<T> out(B * C * Ho * Wo);
  const T* xd = x.data().data();
  const T* wd = w.data().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t oy = 0; oy < Ho; ++oy)
        for (std::size_t ox = 0; ox < Wo; ++ox) {
          double acc = bias ? static_cast<double>(bias->data()[c]) : 0.0;
          for (std::size_t ky = 0; ky < kh; ++ky) {
            const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
            if (iy < 0 || iy >= static_cast<long>(H)) continue;
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
              if (ix < 0 || ix >= static_cast<long>(W)) continue;
              acc += static_cast<double>(xd[((b * C + c) * H + iy) * W + ix]) * wd[(c * kh + ky) * kw + kx];
            }
          }
          out[((b * C + c) * Ho + oy) * Wo + ox] = static_cast<T>(acc);
        }
  std::vector<BasicTensor<T>> inputs{x, w};
  if (bias) inputs.push_back(*bias);
  const bool has_bias = bias != nullptr;
  return detail::make_result<T>(
      OpKind::DepthwiseConv2d, {B, C, Ho, Wo}, std::move(out), std::move(inputs),
      [=](detail::Node<T>& self) {
        auto& xn = *self.inputs[0];
        auto& wn = *self.inputs[1];
        std::vector<double> gx(xn.requires_grad ? xn.data.size() : 0, 0.0);
        std::vector<double> gw(wn.data.size(), 0.0);
        std::vector<double> gb(C, 0.0);
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t oy = 0; oy < Ho; ++oy)
              for (std::size_t ox = 0; ox < Wo; ++ox) {
                const double g = self.grad[((b * C + c) * Ho + oy) * Wo + ox];
                if (g == 0.0) continue;
                gb[c] += g;
                for (std::size_t ky = 0; ky < kh; ++ky) {
                  const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                  if (iy < 0 || iy >= static_cast<long>(H)) continue;
                  for (std::size_t kx = 0; kx < kw; ++kx) {
                    const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                    if (ix < 0 || ix >= static_cast<long>(W)) continue;
                    const std::size_t xi = ((b * C + c) * H + iy) * W + ix;
                    const std::size_t wi = (c * kh + ky) * kw + kx;
                    gw[wi] += g * xn.data[xi];
                    if (!gx.empty()) gx[xi] += g * wn.data[wi];
                  }
                }
              }
        detail::accumulate(xn, std::span<const double>(gx));
        detail::accumulate(wn, std::span<const double>(gw));
        if (has_bias) detail::accumulate(*self.inputs[2], std::span<const double>(gb));
      });
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] > T(0) ? x.data()[i] : T(0);
  return detail::make_result<T>(OpKind::Relu, x.shape(), std::move(out), {x}, [](detail::Node<T>& self) {
    auto& in = *self.inputs[0];
    const auto mode = graph_context().mode;
    if (mode == BackwardMode::DeepLiftRescale) {
      detail::deeplift_elementwise(
          self, in, [](double v) { return v > 0 ? v : 0.0; }, [](double v) { return v > 0 ? 1.0 : 0.0; });
      return;
    }
    std::vector<T> g(self.grad.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
      T up = self.grad[i];
      if (mode == BackwardMode::Guided && up < T(0)) up = T(0);
      g[i] = in.data[i] > T(0) ? up : T(0);
    }
    detail::accumulate(in, std::span<const T>(g));
  });
}

/// Exact (erf) GELU.
template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(detail::gelu_value(x.data()[i]));
  return detail::make_result<T>(OpKind::Gelu, x.shape(), std::move(out), {x}, [](detail::Node<T>& self) {
    auto& in = *self.inputs[0];
    const auto mode = graph_context().mode;
    if (mode == BackwardMode::DeepLiftRescale) {
      detail::deeplift_elementwise(self, in, detail::gelu_value, detail::gelu_derivative);
      return;
    }
    std::vector<double> g(self.grad.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
      double up = self.grad[i];
      double local = detail::gelu_derivative(in.data[i]);
      if (mode == BackwardMode::Guided) {
        up = std::max(up, 0.0);
        local = std::max(local, 0.0);
      }
      g[i] = up * local;
    }
    detail::accumulate(in, std::span<const double>(g));
  });
}

/// Softmax over the last axis; the row max is subtracted before exponentiation.
template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x) {
  const std::size_t D = x.shape().back();
  const std::size_t rows = x.numel() / D;
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * D;
    const double mx = *std::max_element(xr, xr + D);
    double sum = 0.0;
    std::vector<double> e(D);
    for (std::size_t j = 0; j < D; ++j) sum += (e[j] = std::exp(static_cast<double>(xr[j]) - mx));
    for (std::size_t j = 0; j < D; ++j) out[r * D + j] = static_cast<T>(e[j] / sum);
  }
  return detail::make_result<T>(OpKind::Softmax, x.shape(), std::move(out), {x}, [D, rows](detail::Node<T>& self) {
    std::vector<double> g(self.grad.size());
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < D; ++j) dot += static_cast<double>(self.grad[r * D + j]) * self.data[r * D + j];
      for (std::size_t j = 0; j < D; ++j) g[r * D + j] = self.data[r * D + j] * (self.grad[r * D + j] - dot);
    }
    detail::accumulate(*self.inputs[0], std::span<const double>(g));
  });
}

/// Layer normalisation over the last axis with affine gamma/beta of that length.
template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta, double eps = 1e-5) {
  const std::size_t D = x.shape().back();
  if (gamma.numel() != D || beta.numel() != D) {
    throw ShapeError("layer_norm: affine params " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                     " do not match last dim of " + shape_str(x.shape()));
  }
  if (eps < 0) throw AttributeError("layer_norm: eps must be non-negative");
  const std::size_t rows = x.numel() / D;
  std::vector<T> out(x.numel());
  std::vector<double> xhat(x.numel()), rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * D;
    double mean = 0.0;
    for (std::size_t j = 0; j < D; ++j) mean += xr[j];
    mean /= static_cast<double>(D);
    double var = 0.0;
    for (std::size_t j = 0; j < D; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(D);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < D; ++j) {
      xhat[r * D + j] = (xr[j] - mean) * rstd[r];
      out[r * D + j] = static_cast<T>(xhat[r * D + j] * gamma.data()[j] + beta.data()[j]);
    }
  }
  return detail::make_result<T>(
      OpKind::LayerNorm, x.shape(), std::move(out), {x, gamma, beta},
      [D, rows, xhat = std::move(xhat), rstd = std::move(rstd)](detail::Node<T>& self) {
        auto& gam = *self.inputs[1];
        std::vector<double> gx(self.grad.size()), gg(D, 0.0), gbeta(D, 0.0);
        std::vector<double> gxhat(D);
        for (std::size_t r = 0; r < rows; ++r) {
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t j = 0; j < D; ++j) {
            const double g = self.grad[r * D + j];
            gg[j] += g * xhat[r * D + j];
            gbeta[j] += g;
            gxhat[j] = g * gam.data[j];
            m1 += gxhat[j];
            m2 += gxhat[j] * xhat[r * D + j];
          }
          m1 /= static_cast<double>(D);
          m2 /= static_cast<double>(D);
          for (std::size_t j = 0; j < D; ++j) gx[r * D + j] = rstd[r] * (gxhat[j] - m1 - xhat[r * D + j] * m2);
        }
        detail::accumulate(*self.inputs[0], std::span<const double>(gx));
        detail::accumulate(gam, std::span<const double>(gg));
        detail::accumulate(*self.inputs[2], std::span<const double>(gbeta));
      });
}

/// Batch norm with fixed running statistics: per-channel (axis 1) affine map.
template <typename T>
BasicTensor<T> batch_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                          const BasicTensor<T>& running_mean, const BasicTensor<T>& running_var, double eps = 1e-5) {
  if (x.rank() < 2) throw ShapeError("batch_norm: input needs a channel axis, got " + shape_str(x.shape()));
  const std::size_t C = x.dim(1);
  for (const auto* p : {&gamma, &beta, &running_mean, &running_var}) {
    if (p->numel() != C) throw ShapeError("batch_norm: parameter " + shape_str(p->shape()) + " does not match " + std::to_string(C) + " channels");
  }
  std::size_t inner = 1;
  for (std::size_t i = 2; i < x.rank(); ++i) inner *= x.dim(i);
  std::vector<double> rstd(C);
  for (std::size_t c = 0; c < C; ++c) rstd[c] = 1.0 / std::sqrt(static_cast<double>(running_var.data()[c]) + eps);
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::size_t c = (i / inner) % C;
    out[i] = static_cast<T>((x.data()[i] - running_mean.data()[c]) * rstd[c] * gamma.data()[c] + beta.data()[c]);
  }
  return detail::make_result<T>(OpKind::BatchNorm, x.shape(), std::move(out), {x, gamma, beta},
                                [C, inner, rstd, mean = std::vector<double>(running_mean.data().begin(), running_mean.data().end())](
                                    detail::Node<T>& self) {
                                  auto& xn = *self.inputs[0];
                                  auto& gam = *self.inputs[1];
                                  std::vector<double> gx(self.grad.size()), gg(C, 0.0), gbeta(C, 0.0);
                                  for (std::size_t i = 0; i < gx.size(); ++i) {
                                    const std::size_t c = (i / inner) % C;
                                    const double g = self.grad[i];
                                    gx[i] = g * gam.data[c] * rstd[c];
                                    gg[c] += g * (xn.data[i] - mean[c]) * rstd[c];
                                    gbeta[c] += g;
                                  }
                                  detail::accumulate(xn, std::span<const double>(gx));
                                  detail::accumulate(gam, std::span<const double>(gg));
                                  detail::accumulate(*self.inputs[2], std::span<const double>(gbeta));
                                });
}

template <typename T>
BasicTensor<T> max_pool2d(const BasicTensor<T>& x, std::size_t kernel, std::size_t stride) {
  if (kernel == 0 || stride == 0) throw AttributeError("max_pool2d: kernel and stride must be positive");
  detail::require_rank("max_pool2d", x.shape(), 4);
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H < kernel || W < kernel) throw ShapeError("max_pool2d: kernel " + std::to_string(kernel) + " larger than input " + shape_str(x.shape()));
  const std::size_t Ho = (H - kernel) / stride + 1, Wo = (W - kernel) / stride + 1;
  std::vector<T> out(B * C * Ho * Wo);
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t p = 0; p < B * C; ++p)
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        std::size_t best = (p * H + oy * stride) * W + ox * stride;
        for (std::size_t ky = 0; ky < kernel; ++ky)
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            const std::size_t i = (p * H + oy * stride + ky) * W + ox * stride + kx;
            if (x.data()[i] > x.data()[best]) best = i;
          }
        const std::size_t o = (p * Ho + oy) * Wo + ox;
        out[o] = x.data()[best];
        argmax[o] = best;
      }
  return detail::make_result<T>(
      OpKind::MaxPool2d, {B, C, Ho, Wo}, std::move(out), {x},
      [=, argmax = std::move(argmax)](detail::Node<T>& self) {
        auto& in = *self.inputs[0];
        std::vector<double> g(in.data.size(), 0.0);
        if (graph_context().mode == BackwardMode::DeepLiftRescale) {
          // Δout of each window is shared among the window's inputs in
          // proportion to their Δin, which conserves Σ m·Δin = Δout.
          const std::size_t half_out = self.data.size() / 2, half_in = in.data.size() / 2;
          if (self.data.size() % 2 || in.data.size() % 2) throw GraphError("deeplift: max_pool2d expects stacked [actual; reference]");
          for (std::size_t p = 0; p < B * C / 2; ++p)
            for (std::size_t oy = 0; oy < Ho; ++oy)
              for (std::size_t ox = 0; ox < Wo; ++ox) {
                const std::size_t o = (p * Ho + oy) * Wo + ox;
                const double dout = static_cast<double>(self.data[o]) - self.data[o + half_out];
                double din_sum = 0.0;
                for (std::size_t ky = 0; ky < kernel; ++ky)
                  for (std::size_t kx = 0; kx < kernel; ++kx) {
                    const std::size_t i = (p * H + oy * stride + ky) * W + ox * stride + kx;
                    din_sum += static_cast<double>(in.data[i]) - in.data[i + half_in];
                  }
                if (std::abs(din_sum) < 1e-7) {
                  g[argmax[o]] += self.grad[o];
                  continue;
                }
                const double m = self.grad[o] * dout / din_sum;
                for (std::size_t ky = 0; ky < kernel; ++ky)
                  for (std::size_t kx = 0; kx < kernel; ++kx) g[(p * H + oy * stride + ky) * W + ox * stride + kx] += m;
              }
        } else {
          for (std::size_t o = 0; o < argmax.size(); ++o) g[argmax[o]] += self.grad[o];
        }
        detail::accumulate(in, std::span<const double>(g));
      });
}

template <typename T>
BasicTensor<T> avg_pool2d(const BasicTensor<T>& x, std::size_t kernel, std::size_t stride) {
  if (kernel == 0 || stride == 0) throw AttributeError("avg_pool2d: kernel and stride must be positive");
  detail::require_rank("avg_pool2d", x.shape(), 4);
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H < kernel || W < kernel) throw ShapeError("avg_pool2d: kernel " + std::to_string(kernel) + " larger than input " + shape_str(x.shape()));
  const std::size_t Ho = (H - kernel) / stride + 1, Wo = (W - kernel) / stride + 1;
  const double inv = 1.0 / static_cast<double>(kernel * kernel);
  std::vector<T> out(B * C * Ho * Wo);
  for (std::size_t p = 0; p < B * C; ++p)
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        double acc = 0.0;
        for (std::size_t ky = 0; ky < kernel; ++ky)
          for (std::size_t kx = 0; kx < kernel; ++kx) acc += x.data()[(p * H + oy * stride + ky) * W + ox * stride + kx];
        out[(p * Ho + oy) * Wo + ox] = static_cast<T>(acc * inv);
      }
  return detail::make_result<T>(OpKind::AvgPool2d, {B, C, Ho, Wo}, std::move(out), {x}, [=](detail::Node<T>& self) {
    std::vector<double> g(B * C * H * W, 0.0);
    for (std::size_t p = 0; p < B * C; ++p)
      for (std::size_t oy = 0; oy < Ho; ++oy)
        for (std::size_t ox = 0; ox < Wo; ++ox) {
          const double v = self.grad[(p * Ho + oy) * Wo + ox] * inv;
          for (std::size_t ky = 0; ky < kernel; ++ky)
            for (std::size_t kx = 0; kx < kernel; ++kx) g[(p * H + oy * stride + ky) * W + ox * stride + kx] += v;
        }
    detail::accumulate(*self.inputs[0], std::span<const double>(g));
  });
}

/// [B, C, H, W] -> [B, C]
template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& x) {
  detail::require_rank("global_avg_pool", x.shape(), 4);
  const std::size_t BC = x.dim(0) * x.dim(1), HW = x.dim(2) * x.dim(3);
  std::vector<T> out(BC);
  for (std::size_t p = 0; p < BC; ++p) {
    double acc = 0.0;
    for (std::size_t i = 0; i < HW; ++i) acc += x.data()[p * HW + i];
    out[p] = static_cast<T>(acc / static_cast<double>(HW));
  }
  return detail::make_result<T>(OpKind::GlobalAvgPool, {x.dim(0), x.dim(1)}, std::move(out), {x}, [BC, HW](detail::Node<T>& self) {
    std::vector<double> g(BC * HW);
    for (std::size_t p = 0; p < BC; ++p)
      for (std::size_t i = 0; i < HW; ++i) g[p * HW + i] = self.grad[p] / static_cast<double>(HW);
    detail::accumulate(*self.inputs[0], std::span<const double>(g));
  });
}

namespace view_detail {
template <typename T>
BasicTensor<T> view_as(OpKind kind, const BasicTensor<T>& x, Shape shape) {
  if (numel_of(shape) != x.numel()) {
    throw ShapeError(std::string(op_name(kind)) + ": cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  return mammo::detail::make_result<T>(kind, std::move(shape), std::move(out), {x}, [](mammo::detail::Node<T>& self) {
    mammo::detail::accumulate(*self.inputs[0], std::span<const T>(self.grad));
  });
}
}  // namespace view_detail

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
  return view_detail::view_as(OpKind::Reshape, x, std::move(shape));
}

/// [B, ...] -> [B, prod(...)]
template <typename T>
BasicTensor<T> flatten(const BasicTensor<T>& x) {
  return view_detail::view_as(OpKind::Flatten, x, Shape{x.dim(0), x.numel() / x.dim(0)});
}

/// Inference-style dropout: identity.
template <typename T>
BasicTensor<T> dropout_identity(const BasicTensor<T>& x) {
  return view_detail::view_as(OpKind::DropoutIdentity, x, x.shape());
}

/// Axis permutation: output dim i is input dim perm[i].
template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& x, std::vector<std::size_t> perm) {
  const std::size_t r = x.rank();
  if (perm.size() != r) throw AttributeError("transpose: permutation length " + std::to_string(perm.size()) + " != rank of " + shape_str(x.shape()));
  std::vector<bool> seen(r, false);
  for (auto p : perm) {
    if (p >= r || seen[p]) throw AttributeError("transpose: invalid permutation");
    seen[p] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = x.dim(perm[i]);
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r - 1; i-- > 0;) in_stride[i] = in_stride[i + 1] * x.dim(i + 1);
  // src[flat_out] = flat_in index
  std::vector<std::size_t> src(x.numel());
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t o = 0; o < src.size(); ++o) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < r; ++i) off += idx[i] * in_stride[perm[i]];
    src[o] = off;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  std::vector<T> out(x.numel());
  for (std::size_t o = 0; o < out.size(); ++o) out[o] = x.data()[src[o]];
  return detail::make_result<T>(OpKind::Transpose, out_shape, std::move(out), {x}, [src = std::move(src)](detail::Node<T>& self) {
    std::vector<T> g(src.size());
    for (std::size_t o = 0; o < src.size(); ++o) g[src[o]] = self.grad[o];
    detail::accumulate(*self.inputs[0], std::span<const T>(g));
  });
}

template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw AttributeError("concat: axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != first.size()) throw ShapeError("concat: rank mismatch " + shape_str(p.shape()) + " vs " + shape_str(first));
    for (std::size_t i = 0; i < first.size(); ++i) {
      if (i != axis && p.dim(i) != first[i]) throw ShapeError("concat: dim mismatch " + shape_str(p.shape()) + " vs " + shape_str(first));
    }
    out_shape[axis] += p.dim(axis);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  std::vector<std::size_t> widths;
  for (const auto& p : parts) widths.push_back(p.dim(axis) * inner);
  const std::size_t total = out_shape[axis] * inner;
  std::vector<T> out(numel_of(out_shape));
  for (std::size_t o = 0; o < outer; ++o) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      std::copy_n(parts[k].data().data() + o * widths[k], widths[k], out.data() + o * total + off);
      off += widths[k];
    }
  }
  return detail::make_result<T>(OpKind::Concat, out_shape, std::move(out), parts, [outer, total, widths](detail::Node<T>& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      auto& in = *self.inputs[k];
      if (in.requires_grad) {
        std::vector<T> g(in.data.size());
        for (std::size_t o = 0; o < outer; ++o) std::copy_n(self.grad.data() + o * total + off, widths[k], g.data() + o * widths[k]);
        detail::accumulate(in, std::span<const T>(g));
      }
      off += widths[k];
    }
  });
}

/// x[B, N, D] + pos[N, D], broadcast over the batch.
template <typename T>
BasicTensor<T> embedding_add(const BasicTensor<T>& x, const BasicTensor<T>& pos) {
  detail::require_rank("embedding_add", x.shape(), 3);
  if (pos.numel() != x.dim(1) * x.dim(2)) {
    throw ShapeError("embedding_add: positional table " + shape_str(pos.shape()) + " does not match tokens of " + shape_str(x.shape()));
  }
  const std::size_t per = pos.numel();
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] + pos.data()[i % per];
  return detail::make_result<T>(OpKind::EmbeddingAdd, x.shape(), std::move(out), {x, pos}, [per](detail::Node<T>& self) {
    detail::accumulate(*self.inputs[0], std::span<const T>(self.grad));
    std::vector<double> gp(per, 0.0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) gp[i % per] += self.grad[i];
    detail::accumulate(*self.inputs[1], std::span<const double>(gp));
  });
}

/// Selects slices along `axis`: out[..., j, ...] = x[..., indices[j], ...].
/// Covers cyclic rolls and token reorderings; duplicate indices scatter-add.
template <typename T>
BasicTensor<T> gather(const BasicTensor<T>& x, std::size_t axis, std::vector<std::size_t> indices) {
  if (axis >= x.rank()) throw AttributeError("gather: axis out of range for " + shape_str(x.shape()));
  if (indices.empty()) throw AttributeError("gather: empty index list");
  for (auto i : indices) {
    if (i >= x.dim(axis)) throw AttributeError("gather: index " + std::to_string(i) + " out of range for " + shape_str(x.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t n_in = x.dim(axis), n_out = indices.size();
  Shape out_shape = x.shape();
  out_shape[axis] = n_out;
  std::vector<T> out(outer * n_out * inner);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < n_out; ++j)
      std::copy_n(x.data().data() + (o * n_in + indices[j]) * inner, inner, out.data() + (o * n_out + j) * inner);
  return detail::make_result<T>(OpKind::Gather, out_shape, std::move(out), {x},
                                [outer, inner, n_in, n_out, indices = std::move(indices)](detail::Node<T>& self) {
                                  std::vector<double> g(outer * n_in * inner, 0.0);
                                  for (std::size_t o = 0; o < outer; ++o)
                                    for (std::size_t j = 0; j < n_out; ++j)
                                      for (std::size_t k = 0; k < inner; ++k)
                                        g[(o * n_in + indices[j]) * inner + k] += self.grad[(o * n_out + j) * inner + k];
                                  detail::accumulate(*self.inputs[0], std::span<const double>(g));
                                });
}

/// Mean over one axis (the axis is removed).
template <typename T>
BasicTensor<T> mean_axis(const BasicTensor<T>& x, std::size_t axis) {
  if (axis >= x.rank() || x.rank() < 2) throw AttributeError("mean_axis: invalid axis for " + shape_str(x.shape()));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t n = x.dim(axis);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<long>(axis));
  std::vector<T> out(outer * inner);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < inner; ++k) {
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += x.data()[(o * n + j) * inner + k];
      out[o * inner + k] = static_cast<T>(acc / static_cast<double>(n));
    }
  return detail::make_result<T>(OpKind::MeanAxis, out_shape, std::move(out), {x}, [outer, inner, n](detail::Node<T>& self) {
    std::vector<double> g(outer * n * inner);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t k = 0; k < inner; ++k) g[(o * n + j) * inner + k] = self.grad[o * inner + k] / static_cast<double>(n);
    detail::accumulate(*self.inputs[0], std::span<const double>(g));
  });
}

/// Sum of all elements -> shape [1].
template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  double acc = 0.0;
  for (auto v : x.data()) acc += v;
  return detail::make_result<T>(OpKind::Sum, {1}, {static_cast<T>(acc)}, {x}, [](detail::Node<T>& self) {
    auto& in = *self.inputs[0];
    std::vector<T> g(in.data.size(), self.grad[0]);
    detail::accumulate(in, std::span<const T>(g));
  });
}

/// Mean over the batch of −log softmax(logits)[label], optionally class-weighted
/// (weighted mean, Σ w_y·nll / Σ w_y).
template <typename T>
BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const int> labels,
                                     std::span<const double> class_weights = {}) {
  detail::require_rank("softmax_cross_entropy", logits.shape(), 2);
  const std::size_t B = logits.dim(0), C = logits.dim(1);
  if (labels.size() != B) throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " + std::to_string(B));
  if (!class_weights.empty() && class_weights.size() != C) throw AttributeError("softmax_cross_entropy: class weight count != classes");
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= C) throw AttributeError("softmax_cross_entropy: label " + std::to_string(y) + " out of range");
  }
  std::vector<double> probs(B * C), w(B);
  double loss = 0.0, wsum = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    const T* row = logits.data().data() + b * C;
    const double mx = *std::max_element(row, row + C);
    double s = 0.0;
    for (std::size_t j = 0; j < C; ++j) s += std::exp(row[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < C; ++j) probs[b * C + j] = std::exp(row[j] - lse);
    w[b] = class_weights.empty() ? 1.0 : class_weights[static_cast<std::size_t>(labels[b])];
    loss += w[b] * (lse - row[labels[b]]);
    wsum += w[b];
  }
  loss /= wsum;
  std::vector<int> ys(labels.begin(), labels.end());
  return detail::make_result<T>(OpKind::SoftmaxCrossEntropy, {1}, {static_cast<T>(loss)}, {logits},
                                [B, C, probs = std::move(probs), w = std::move(w), wsum, ys = std::move(ys)](detail::Node<T>& self) {
                                  std::vector<double> g(B * C);
                                  const double up = self.grad[0];
                                  for (std::size_t b = 0; b < B; ++b)
                                    for (std::size_t j = 0; j < C; ++j)
                                      g[b * C + j] = up * w[b] / wsum *
                                                     (probs[b * C + j] - (static_cast<int>(j) == ys[b] ? 1.0 : 0.0));
                                  detail::accumulate(*self.inputs[0], std::span<const double>(g));
                                });
}

}  // namespace ops

/// Generic dispatcher over the primitive inventory. Conv-style kinds take
/// (x, w[, bias]); norm kinds take (x, gamma, beta[, mean, var]).
template <typename T>
BasicTensor<T> apply_primitive(OpKind kind, std::span<const BasicTensor<T>> in, const OpAttrs& attrs) {
  auto need = [&](std::size_t lo, std::size_t hi) {
    if (in.size() < lo || in.size() > hi) {
      throw ShapeError(std::string(op_name(kind)) + ": expected " + std::to_string(lo) + (lo == hi ? "" : ".." + std::to_string(hi)) +
                       " inputs, got " + std::to_string(in.size()));
    }
  };
  switch (kind) {
    case OpKind::Add: need(2, 2); return ops::add(in[0], in[1]);
    case OpKind::AddBias: need(2, 2); return ops::add_bias(in[0], in[1], attrs.axis);
    case OpKind::Mul: need(2, 2); return ops::mul(in[0], in[1]);
    case OpKind::Scale: need(1, 1); return ops::scale(in[0], attrs.scalar);
    case OpKind::Matmul: need(2, 2); return ops::matmul(in[0], in[1]);
    case OpKind::Conv2d: need(2, 3); return ops::conv2d(in[0], in[1], in.size() > 2 ? &in[2] : nullptr, attrs.stride, attrs.pad);
    case OpKind::DepthwiseConv2d:
      need(2, 3);
      return ops::depthwise_conv2d(in[0], in[1], in.size() > 2 ? &in[2] : nullptr, attrs.stride, attrs.pad);
    case OpKind::PointwiseConv2d: need(2, 3); return ops::pointwise_conv2d(in[0], in[1], in.size() > 2 ? &in[2] : nullptr);
    case OpKind::Relu: need(1, 1); return ops::relu(in[0]);
    case OpKind::Gelu: need(1, 1); return ops::gelu(in[0]);
    case OpKind::Softmax: need(1, 1); return ops::softmax(in[0]);
    case OpKind::LayerNorm: need(3, 3); return ops::layer_norm(in[0], in[1], in[2], attrs.eps);
    case OpKind::BatchNorm: need(5, 5); return ops::batch_norm(in[0], in[1], in[2], in[3], in[4], attrs.eps);
    case OpKind::MaxPool2d: need(1, 1); return ops::max_pool2d(in[0], attrs.kernel, attrs.stride);
    case OpKind::AvgPool2d: need(1, 1); return ops::avg_pool2d(in[0], attrs.kernel, attrs.stride);
    case OpKind::GlobalAvgPool: need(1, 1); return ops::global_avg_pool(in[0]);
    case OpKind::Flatten: need(1, 1); return ops::flatten(in[0]);
    case OpKind::Reshape: need(1, 1); return ops::reshape(in[0], attrs.shape);
    case OpKind::Transpose: need(1, 1); return ops::transpose(in[0], attrs.perm);
    case OpKind::Concat: need(1, 64); return ops::concat(std::vector<BasicTensor<T>>(in.begin(), in.end()), attrs.axis);
    case OpKind::EmbeddingAdd: need(2, 2); return ops::embedding_add(in[0], in[1]);
    case OpKind::DropoutIdentity: need(1, 1); return ops::dropout_identity(in[0]);
    case OpKind::Gather: need(1, 1); return ops::gather(in[0], attrs.axis, attrs.indices);
    case OpKind::MeanAxis: need(1, 1); return ops::mean_axis(in[0], attrs.axis);
    case OpKind::Sum: need(1, 1); return ops::sum(in[0]);
    case OpKind::SoftmaxCrossEntropy:
      need(1, 1);
      return ops::softmax_cross_entropy(in[0], std::span<const int>(attrs.labels), std::span<const double>(attrs.class_weights));
    case OpKind::Leaf: break;
  }
  throw AttributeError("apply_primitive: unsupported kind " + std::string(op_name(kind)));
}

/// Reverse-mode sweep from a scalar. Leaf gradients accumulate across calls;
/// interior gradients are reset at the start of each sweep.
template <typename T>
void backward(const BasicTensor<T>& loss) {
  if (loss.numel() != 1) throw GraphError("backward: loss must be a scalar, got " + shape_str(loss.shape()));
  using Node = detail::Node<T>;
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{loss.node().get()};
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    if (!n->requires_grad || !seen.insert(n).second) continue;
    order.push_back(n);
    for (auto& in : n->inputs) stack.push_back(in.get());
  }
  std::sort(order.begin(), order.end(), [](const Node* a, const Node* b) { return a->seq > b->seq; });
  for (Node* n : order) {
    if (n->backward) n->grad.assign(n->data.size(), T(0));
  }
  Node& root = *loss.node();
  root.ensure_grad();
  root.grad[0] += T(1);
  for (Node* n : order) {
    if (n->backward) n->backward(*n);
  }
}

/// Central-difference estimate of d f / d x, one coordinate at a time.
template <typename T, typename F>
std::vector<double> finite_diff_grad(F&& f, const BasicTensor<T>& x, double eps) {
  if (!(eps > 0)) throw AttributeError("finite_diff_grad: eps must be positive");
  std::vector<double> out(x.numel());
  NoGradGuard no_grad;
  auto probe = x.detach();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T orig = probe.data()[i];
    const T hi = static_cast<T>(orig + eps), lo = static_cast<T>(orig - eps);
    probe.mutable_data()[i] = hi;
    const double up = static_cast<double>(f(probe));
    probe.mutable_data()[i] = lo;
    const double down = static_cast<double>(f(probe));
    probe.mutable_data()[i] = orig;
    // the representable step, not the requested one
    out[i] = (up - down) / (static_cast<double>(hi) - static_cast<double>(lo));
  }
  return out;
}

}  // namespace mammo
