#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace phreg {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(TensorNode&)> backward_fn;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
  bool is_leaf() const { return parents.empty(); }
};

/// Dense row-major array with reverse-mode differentiation.
///
/// A BasicTensor is a shared handle: copies alias the same storage, like a
/// framework tensor. Use clone() for a deep copy and detach() to cut the graph.
template <typename T>
class BasicTensor {
 public:
  using Scalar = T;
  using Node = TensorNode<T>;

  BasicTensor();
  BasicTensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  static BasicTensor zeros(Shape shape, bool requires_grad = false);
  static BasicTensor full(Shape shape, T value, bool requires_grad = false);
  static BasicTensor scalar(T value);

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t extent(std::size_t axis) const;
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  // Mutable access for optimizers and initializers; never call on a tensor
  // that is already part of a recorded graph.
  std::span<T> mutable_data() { return node_->data; }
  T item() const;
  T at(std::size_t flat_index) const { return node_->data.at(flat_index); }

  bool requires_grad() const { return node_->requires_grad; }
  BasicTensor& set_requires_grad(bool on);
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }
  bool is_leaf() const { return node_->is_leaf(); }

  BasicTensor clone() const;
  BasicTensor detach() const;

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<U>(node_->data[i]);
    return BasicTensor<U>(shape(), std::move(out), requires_grad());
  }

  const std::shared_ptr<Node>& node() const { return node_; }
  static BasicTensor from_node(std::shared_ptr<Node> node);

 private:
  std::shared_ptr<Node> node_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

/// Reverse topological record of the graph reachable from a root.
template <typename T>
class ComputationTape {
 public:
  static ComputationTape record(const BasicTensor<T>& root);

  // Nodes in forward (topological) order; replay walks it backwards.
  const std::vector<TensorNode<T>*>& nodes() const { return order_; }
  void replay() const;

 private:
  std::vector<TensorNode<T>*> order_;
};

/// Seeds d(loss)/d(loss) = 1 and accumulates gradients into every
/// requires_grad leaf. Throws ShapeError if loss is not a single scalar.
template <typename T>
void backward(const BasicTensor<T>& loss);

// Elementwise, identical shapes.
template <typename T> BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> div(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> scale(const BasicTensor<T>& x, T factor);
template <typename T> BasicTensor<T> add_scalar(const BasicTensor<T>& x, T offset);
template <typename T> BasicTensor<T> gelu(const BasicTensor<T>& x);

// x[..., n] + bias[n], broadcast over leading axes.
template <typename T> BasicTensor<T> add_bias(const BasicTensor<T>& x, const BasicTensor<T>& bias);

template <typename T> BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> transpose(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape);
template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::size_t axis);
template <typename T>
BasicTensor<T> slice(const BasicTensor<T>& x, std::size_t axis, std::size_t start, std::size_t length);

// Row-wise over the last axis.
template <typename T> BasicTensor<T> softmax_rows(const BasicTensor<T>& x);
template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, T eps = T(1e-5));
template <typename T> BasicTensor<T> l2_norm_last(const BasicTensor<T>& x);
// Per-row cosine similarity; denominator is max(|a||b|, eps).
template <typename T>
BasicTensor<T> cosine_rows(const BasicTensor<T>& a, const BasicTensor<T>& b, T eps = T(1e-8));

template <typename T> BasicTensor<T> sum_all(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> mean_all(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> mean_axis(const BasicTensor<T>& x, std::size_t axis);

}  // namespace phreg
