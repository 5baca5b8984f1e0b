#include "phreg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace phreg {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

void check_extents(const Shape& shape) {
  for (auto e : shape)
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
}

void require_same_shape(const char* op, const Shape& a, const Shape& b) {
  if (a != b)
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

std::size_t last_extent(const Shape& s) { return s.empty() ? 1 : s.back(); }

template <typename T>
using NodePtr = std::shared_ptr<TensorNode<T>>;

// Builds an op result; the graph edge is recorded only when some input needs grad.
template <typename T>
BasicTensor<T> make_result(Shape shape, std::vector<T> data,
                           std::initializer_list<const BasicTensor<T>*> inputs,
                           std::function<void(TensorNode<T>&)> backward_fn) {
  auto node = std::make_shared<TensorNode<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  bool any = false;
  for (auto* in : inputs) any = any || in->requires_grad();
  if (any) {
    node->requires_grad = true;
    for (auto* in : inputs) node->parents.push_back(in->node());
    node->backward_fn = std::move(backward_fn);
  }
  return BasicTensor<T>::from_node(std::move(node));
}

template <typename T>
bool wants(const NodePtr<T>& n) {
  return n->requires_grad;
}

}  // namespace

// ---------------------------------------------------------------------------
// BasicTensor

template <typename T>
BasicTensor<T>::BasicTensor() : node_(std::make_shared<Node>()) {
  node_->data.assign(1, T(0));
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> values, bool requires_grad)
    : node_(std::make_shared<Node>()) {
  check_extents(shape);
  if (shape_numel(shape) != values.size())
    throw ShapeError("tensor of shape " + shape_str(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  node_->shape = std::move(shape);
  node_->data = std::move(values);
  node_->requires_grad = requires_grad;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return BasicTensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::scalar(T value) {
  return BasicTensor(Shape{}, std::vector<T>{value});
}

template <typename T>
BasicTensor<T> BasicTensor<T>::from_node(std::shared_ptr<Node> node) {
  BasicTensor t;
  t.node_ = std::move(node);
  return t;
}

template <typename T>
std::size_t BasicTensor<T>::extent(std::size_t axis) const {
  if (axis >= rank())
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  return node_->shape[axis];
}

template <typename T>
T BasicTensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

template <typename T>
BasicTensor<T>& BasicTensor<T>::set_requires_grad(bool on) {
  if (!is_leaf()) throw std::logic_error("set_requires_grad on a non-leaf tensor");
  node_->requires_grad = on;
  return *this;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::clone() const {
  return BasicTensor(shape(), node_->data, requires_grad() && is_leaf());
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
  return BasicTensor(shape(), node_->data, false);
}

// ---------------------------------------------------------------------------
// Tape and backward

template <typename T>
ComputationTape<T> ComputationTape<T>::record(const BasicTensor<T>& root) {
  ComputationTape tape;
  std::unordered_set<const TensorNode<T>*> seen;
  // Iterative post-order DFS so deep graphs do not exhaust the stack.
  std::vector<std::pair<TensorNode<T>*, std::size_t>> stack;
  auto* start = root.node().get();
  if (!start->requires_grad) return tape;
  stack.emplace_back(start, 0);
  seen.insert(start);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      auto* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      tape.order_.push_back(node);
      stack.pop_back();
    }
  }
  return tape;
}

template <typename T>
void ComputationTape<T>::replay() const {
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    TensorNode<T>* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
}

template <typename T>
void backward(const BasicTensor<T>& loss) {
  if (loss.numel() != 1)
    throw ShapeError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;
  auto tape = ComputationTape<T>::record(loss);
  auto& g = loss.node()->grad_buffer();
  g[0] += T(1);
  tape.replay();
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape("add", a.shape(), b.shape());
  std::vector<T> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  auto na = a.node(), nb = b.node();
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, [na, nb](TensorNode<T>& self) {
    for (auto* n : {na.get(), nb.get()}) {
      if (!n->requires_grad) continue;
      auto& g = n->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape("sub", a.shape(), b.shape());
  std::vector<T> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  auto na = a.node(), nb = b.node();
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, [na, nb](TensorNode<T>& self) {
    if (wants(na)) {
      auto& g = na->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (wants(nb)) {
      auto& g = nb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape("mul", a.shape(), b.shape());
  std::vector<T> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  auto na = a.node(), nb = b.node();
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, [na, nb](TensorNode<T>& self) {
    if (wants(na)) {
      auto& g = na->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * nb->data[i];
    }
    if (wants(nb)) {
      auto& g = nb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * na->data[i];
    }
  });
}

template <typename T>
BasicTensor<T> div(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape("div", a.shape(), b.shape());
  std::vector<T> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] / y[i];
  auto na = a.node(), nb = b.node();
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, [na, nb](TensorNode<T>& self) {
    if (wants(na)) {
      auto& g = na->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / nb->data[i];
    }
    if (wants(nb)) {
      auto& g = nb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T d = nb->data[i];
        g[i] -= self.grad[i] * na->data[i] / (d * d);
      }
    }
  });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, T factor) {
  std::vector<T> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= factor;
  auto nx = x.node();
  return make_result<T>(x.shape(), std::move(out), {&x}, [nx, factor](TensorNode<T>& self) {
    auto& g = nx->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

template <typename T>
BasicTensor<T> add_scalar(const BasicTensor<T>& x, T offset) {
  std::vector<T> out(x.data().begin(), x.data().end());
  for (auto& v : out) v += offset;
  auto nx = x.node();
  return make_result<T>(x.shape(), std::move(out), {&x}, [nx](TensorNode<T>& self) {
    auto& g = nx->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x) {
  const T inv_sqrt2 = T(0.70710678118654752440);
  std::vector<T> out(x.numel());
  auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = T(0.5) * in[i] * (T(1) + std::erf(in[i] * inv_sqrt2));
  auto nx = x.node();
  return make_result<T>(x.shape(), std::move(out), {&x}, [nx, inv_sqrt2](TensorNode<T>& self) {
    const T inv_sqrt_2pi = T(0.39894228040143267794);
    auto& g = nx->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T v = nx->data[i];
      const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
      const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
      g[i] += self.grad[i] * (cdf + v * pdf);
    }
  });
}

template <typename T>
BasicTensor<T> add_bias(const BasicTensor<T>& x, const BasicTensor<T>& bias) {
  const std::size_t n = last_extent(x.shape());
  if (bias.rank() != 1 || bias.extent(0) != n)
    throw ShapeError("add_bias: bias " + shape_str(bias.shape()) + " does not match " +
                     shape_str(x.shape()));
  std::vector<T> out(x.data().begin(), x.data().end());
  auto b = bias.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i % n];
  auto nx = x.node(), nb = bias.node();
  return make_result<T>(x.shape(), std::move(out), {&x, &bias}, [nx, nb, n](TensorNode<T>& self) {
    if (wants(nx)) {
      auto& g = nx->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (wants(nb)) {
      auto& g = nb->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % n] += self.grad[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra and layout

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0))
    throw ShapeError("matmul: cannot multiply " + shape_str(a.shape()) + " by " +
                     shape_str(b.shape()));
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  std::vector<T> out(m * n, T(0));
  auto A = a.data(), B = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = A[i * k + p];
      const T* brow = B.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  auto na = a.node(), nb = b.node();
  return make_result<T>({m, n}, std::move(out), {&a, &b}, [na, nb, m, k, n](TensorNode<T>& self) {
    const T* G = self.grad.data();
    if (wants(na)) {
      auto& ga = na->grad_buffer();
      const T* Bd = nb->data.data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          T acc = T(0);
          const T* grow = G + i * n;
          const T* brow = Bd + p * n;
          for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
          ga[i * k + p] += acc;
        }
    }
    if (wants(nb)) {
      auto& gb = nb->grad_buffer();
      const T* Ad = na->data.data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const T av = Ad[i * k + p];
          const T* grow = G + i * n;
          T* gbrow = gb.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
        }
    }
  });
}

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& x) {
  if (x.rank() != 2) throw ShapeError("transpose expects rank 2, got " + shape_str(x.shape()));
  const std::size_t r = x.extent(0), c = x.extent(1);
  std::vector<T> out(r * c);
  auto in = x.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = in[i * c + j];
  auto nx = x.node();
  return make_result<T>({c, r}, std::move(out), {&x}, [nx, r, c](TensorNode<T>& self) {
    auto& g = nx->grad_buffer();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
  });
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
  check_extents(shape);
  if (shape_numel(shape) != x.numel())
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  std::vector<T> out(x.data().begin(), x.data().end());
  auto nx = x.node();
  return make_result<T>(std::move(shape), std::move(out), {&x}, [nx](TensorNode<T>& self) {
    auto& g = nx->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

namespace {
struct AxisSplit {
  std::size_t outer, extent, inner;
};
AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit a{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}
}  // namespace

template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) throw ShapeError("concat: axis out of range for " + shape_str(ref));
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != ref.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != ref[i])
        throw ShapeError("concat: " + shape_str(s) + " vs " + shape_str(ref));
    out_shape[axis] += s[axis];
  }
  const auto total = split_at(out_shape, axis);
  std::vector<T> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const auto sp = split_at(p.shape(), axis);
    auto in = p.data();
    const std::size_t block = sp.extent * sp.inner;
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(in.begin() + o * block, block,
                  out.begin() + o * total.extent * total.inner + offset * sp.inner);
    offset += sp.extent;
  }

  auto node = std::make_shared<TensorNode<T>>();
  node->shape = out_shape;
  node->data = std::move(out);
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (any) {
    node->requires_grad = true;
    for (const auto& p : parts) node->parents.push_back(p.node());
    node->backward_fn = [offsets, total](TensorNode<T>& self) {
      for (std::size_t k = 0; k < self.parents.size(); ++k) {
        auto& parent = *self.parents[k];
        if (!parent.requires_grad) continue;
        const std::size_t extent = parent.data.size() / (total.outer * total.inner);
        const std::size_t block = extent * total.inner;
        auto& g = parent.grad_buffer();
        for (std::size_t o = 0; o < total.outer; ++o) {
          const T* src = self.grad.data() + o * total.extent * total.inner + offsets[k] * total.inner;
          T* dst = g.data() + o * block;
          for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
        }
      }
    };
  }
  return BasicTensor<T>::from_node(std::move(node));
}

template <typename T>
BasicTensor<T> slice(const BasicTensor<T>& x, std::size_t axis, std::size_t start,
                     std::size_t length) {
  if (axis >= x.rank() || length == 0 || start + length > x.extent(axis))
    throw ShapeError("slice [" + std::to_string(start) + ", +" + std::to_string(length) +
                     ") on axis " + std::to_string(axis) + " of " + shape_str(x.shape()));
  const auto sp = split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  std::vector<T> out(shape_numel(out_shape));
  auto in = x.data();
  const std::size_t block = length * sp.inner;
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(in.begin() + o * sp.extent * sp.inner + start * sp.inner, block,
                out.begin() + o * block);
  auto nx = x.node();
  return make_result<T>(std::move(out_shape), std::move(out), {&x},
                        [nx, sp, start, block](TensorNode<T>& self) {
                          auto& g = nx->grad_buffer();
                          for (std::size_t o = 0; o < sp.outer; ++o) {
                            T* dst = g.data() + o * sp.extent * sp.inner + start * sp.inner;
                            const T* src = self.grad.data() + o * block;
                            for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
                          }
                        });
}

// ---------------------------------------------------------------------------
// Row-wise ops

template <typename T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& x) {
  const std::size_t n = last_extent(x.shape());
  const std::size_t rows = x.numel() / n;
  std::vector<T> out(x.numel());
  auto in = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = in.data() + r * n;
    T* dst = out.data() + r * n;
    const T mx = *std::max_element(src, src + n);
    T total = T(0);
    for (std::size_t j = 0; j < n; ++j) {
      dst[j] = std::exp(src[j] - mx);
      total += dst[j];
    }
    for (std::size_t j = 0; j < n; ++j) dst[j] /= total;
  }
  auto nx = x.node();
  auto result = make_result<T>(x.shape(), std::move(out), {&x}, nullptr);
  if (result.requires_grad()) {
    // The closure receives its own node, so the saved output is never captured.
    result.node()->backward_fn = [nx, n, rows](TensorNode<T>& self) {
      auto& g = nx->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        const T* y = self.data.data() + r * n;
        const T* dy = self.grad.data() + r * n;
        T dot = T(0);
        for (std::size_t j = 0; j < n; ++j) dot += dy[j] * y[j];
        for (std::size_t j = 0; j < n; ++j) g[r * n + j] += y[j] * (dy[j] - dot);
      }
    };
  }
  return result;
}

template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, T eps) {
  const std::size_t d = last_extent(x.shape());
  if (gamma.numel() != d || beta.numel() != d)
    throw ShapeError("layer_norm: affine params must have " + std::to_string(d) + " entries");
  const std::size_t rows = x.numel() / d;
  std::vector<T> out(x.numel());
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto rstd = std::make_shared<std::vector<T>>(rows);
  auto in = x.data(), gm = gamma.data(), bt = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = in.data() + r * d;
    T mean = T(0);
    for (std::size_t j = 0; j < d; ++j) mean += src[j];
    mean /= T(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) var += (src[j] - mean) * (src[j] - mean);
    var /= T(d);
    const T rs = T(1) / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (src[j] - mean) * rs;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = h * gm[j] + bt[j];
    }
  }
  auto nx = x.node(), ng = gamma.node(), nbeta = beta.node();
  return make_result<T>(
      x.shape(), std::move(out), {&x, &gamma, &beta},
      [nx, ng, nbeta, xhat, rstd, d, rows](TensorNode<T>& self) {
        const T* dy = self.grad.data();
        if (wants(ng)) {
          auto& g = ng->grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) g[j] += dy[r * d + j] * (*xhat)[r * d + j];
        }
        if (wants(nbeta)) {
          auto& g = nbeta->grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) g[j] += dy[r * d + j];
        }
        if (wants(nx)) {
          auto& g = nx->grad_buffer();
          const auto& gm = ng->data;
          for (std::size_t r = 0; r < rows; ++r) {
            T mean_dh = T(0), mean_dh_h = T(0);
            for (std::size_t j = 0; j < d; ++j) {
              const T dh = dy[r * d + j] * gm[j];
              mean_dh += dh;
              mean_dh_h += dh * (*xhat)[r * d + j];
            }
            mean_dh /= T(d);
            mean_dh_h /= T(d);
            for (std::size_t j = 0; j < d; ++j) {
              const T dh = dy[r * d + j] * gm[j];
              g[r * d + j] += (*rstd)[r] * (dh - mean_dh - (*xhat)[r * d + j] * mean_dh_h);
            }
          }
        }
      });
}

template <typename T>
BasicTensor<T> l2_norm_last(const BasicTensor<T>& x) {
  const std::size_t d = last_extent(x.shape());
  const std::size_t rows = x.numel() / d;
  Shape out_shape(x.shape().begin(), x.shape().end() - (x.rank() ? 1 : 0));
  std::vector<T> out(rows);
  auto in = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    T s = T(0);
    for (std::size_t j = 0; j < d; ++j) s += in[r * d + j] * in[r * d + j];
    out[r] = std::sqrt(s);
  }
  auto nx = x.node();
  auto result = make_result<T>(std::move(out_shape), std::move(out), {&x}, nullptr);
  if (result.requires_grad()) {
    result.node()->backward_fn = [nx, d, rows](TensorNode<T>& self) {
      auto& g = nx->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        const T norm = self.data[r];
        if (norm == T(0)) continue;
        for (std::size_t j = 0; j < d; ++j) g[r * d + j] += self.grad[r] * nx->data[r * d + j] / norm;
      }
    };
  }
  return result;
}

template <typename T>
BasicTensor<T> cosine_rows(const BasicTensor<T>& a, const BasicTensor<T>& b, T eps) {
  require_same_shape("cosine_rows", a.shape(), b.shape());
  const std::size_t d = last_extent(a.shape());
  const std::size_t rows = a.numel() / d;
  Shape out_shape(a.shape().begin(), a.shape().end() - (a.rank() ? 1 : 0));
  std::vector<T> out(rows);
  auto na_norm = std::make_shared<std::vector<T>>(rows);
  auto nb_norm = std::make_shared<std::vector<T>>(rows);
  auto x = a.data(), y = b.data();
  for (std::size_t r = 0; r < rows; ++r) {
    T dot = T(0), sa = T(0), sb = T(0);
    for (std::size_t j = 0; j < d; ++j) {
      dot += x[r * d + j] * y[r * d + j];
      sa += x[r * d + j] * x[r * d + j];
      sb += y[r * d + j] * y[r * d + j];
    }
    (*na_norm)[r] = std::sqrt(sa);
    (*nb_norm)[r] = std::sqrt(sb);
    out[r] = dot / std::max((*na_norm)[r] * (*nb_norm)[r], eps);
  }
  auto pa = a.node(), pb = b.node();
  return make_result<T>(
      std::move(out_shape), std::move(out), {&a, &b},
      [pa, pb, na_norm, nb_norm, d, rows, eps](TensorNode<T>& self) {
        for (int side = 0; side < 2; ++side) {
          auto& self_in = side == 0 ? pa : pb;
          auto& other = side == 0 ? pb : pa;
          if (!self_in->requires_grad) continue;
          const auto& own_norm = side == 0 ? *na_norm : *nb_norm;
          const auto& other_norm = side == 0 ? *nb_norm : *na_norm;
          auto& g = self_in->grad_buffer();
          for (std::size_t r = 0; r < rows; ++r) {
            const T prod = own_norm[r] * other_norm[r];
            const T c = self.data[r];
            const T dc = self.grad[r];
            if (prod >= eps) {
              const T inv_sq = own_norm[r] > T(0) ? T(1) / (own_norm[r] * own_norm[r]) : T(0);
              for (std::size_t j = 0; j < d; ++j)
                g[r * d + j] += dc * (other->data[r * d + j] / prod -
                                      c * self_in->data[r * d + j] * inv_sq);
            } else {
              for (std::size_t j = 0; j < d; ++j) g[r * d + j] += dc * other->data[r * d + j] / eps;
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
BasicTensor<T> sum_all(const BasicTensor<T>& x) {
  T s = T(0);
  for (T v : x.data()) s += v;
  auto nx = x.node();
  return make_result<T>({}, {s}, {&x}, [nx](TensorNode<T>& self) {
    auto& g = nx->grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

template <typename T>
BasicTensor<T> mean_all(const BasicTensor<T>& x) {
  return scale(sum_all(x), T(1) / T(x.numel()));
}

template <typename T>
BasicTensor<T> mean_axis(const BasicTensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) throw ShapeError("mean_axis: axis out of range for " + shape_str(x.shape()));
  const auto sp = split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<T> out(sp.outer * sp.inner, T(0));
  auto in = x.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t e = 0; e < sp.extent; ++e)
      for (std::size_t i = 0; i < sp.inner; ++i)
        out[o * sp.inner + i] += in[(o * sp.extent + e) * sp.inner + i];
  const T inv = T(1) / T(sp.extent);
  for (auto& v : out) v *= inv;
  auto nx = x.node();
  return make_result<T>(std::move(out_shape), std::move(out), {&x}, [nx, sp, inv](TensorNode<T>& self) {
    auto& g = nx->grad_buffer();
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t e = 0; e < sp.extent; ++e)
        for (std::size_t i = 0; i < sp.inner; ++i)
          g[(o * sp.extent + e) * sp.inner + i] += self.grad[o * sp.inner + i] * inv;
  });
}

#define PHREG_INSTANTIATE_TENSOR(T)                                                          \
  template class BasicTensor<T>;                                                             \
  template class ComputationTape<T>;                                                         \
  template void backward<T>(const BasicTensor<T>&);                                          \
  template BasicTensor<T> add<T>(const BasicTensor<T>&, const BasicTensor<T>&);              \
  template BasicTensor<T> sub<T>(const BasicTensor<T>&, const BasicTensor<T>&);              \
  template BasicTensor<T> mul<T>(const BasicTensor<T>&, const BasicTensor<T>&);              \
  template BasicTensor<T> div<T>(const BasicTensor<T>&, const BasicTensor<T>&);              \
  template BasicTensor<T> scale<T>(const BasicTensor<T>&, T);                                \
  template BasicTensor<T> add_scalar<T>(const BasicTensor<T>&, T);                           \
  template BasicTensor<T> gelu<T>(const BasicTensor<T>&);                                    \
  template BasicTensor<T> add_bias<T>(const BasicTensor<T>&, const BasicTensor<T>&);         \
  template BasicTensor<T> matmul<T>(const BasicTensor<T>&, const BasicTensor<T>&);           \
  template BasicTensor<T> transpose<T>(const BasicTensor<T>&);                               \
  template BasicTensor<T> reshape<T>(const BasicTensor<T>&, Shape);                          \
  template BasicTensor<T> concat<T>(const std::vector<BasicTensor<T>>&, std::size_t);        \
  template BasicTensor<T> slice<T>(const BasicTensor<T>&, std::size_t, std::size_t,          \
                                   std::size_t);                                             \
  template BasicTensor<T> softmax_rows<T>(const BasicTensor<T>&);                            \
  template BasicTensor<T> layer_norm<T>(const BasicTensor<T>&, const BasicTensor<T>&,        \
                                        const BasicTensor<T>&, T);                           \
  template BasicTensor<T> l2_norm_last<T>(const BasicTensor<T>&);                            \
  template BasicTensor<T> cosine_rows<T>(const BasicTensor<T>&, const BasicTensor<T>&, T);   \
  template BasicTensor<T> sum_all<T>(const BasicTensor<T>&);                                 \
  template BasicTensor<T> mean_all<T>(const BasicTensor<T>&);                                \
  template BasicTensor<T> mean_axis<T>(const BasicTensor<T>&, std::size_t);

PHREG_INSTANTIATE_TENSOR(float)
PHREG_INSTANTIATE_TENSOR(double)

#undef PHREG_INSTANTIATE_TENSOR

}  // namespace phreg
