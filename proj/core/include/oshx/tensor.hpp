#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "oshx/errors.hpp"

namespace oshx {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);
bool same_shape(const Shape& a, const Shape& b);

namespace detail {

/// One recorded operation in the autodiff graph. Leaves ("leaf") carry data
/// or parameters; interior nodes carry the op identifier, references to the
/// predecessor tensors, and closures holding whatever context the forward
/// replay and the backward rule need (kernel geometry, dropout masks,
/// argmax indices). The graph is acyclic by construction: a node only ever
/// references tensors that existed before it.
template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad; // empty until first accumulation
  bool requires_grad = false;
  std::string op = "leaf";
  std::vector<std::shared_ptr<TensorNode<T>>> inputs;
  /// Pure recomputation of value from the inputs' current values.
  /// Running it on a recorded graph reproduces value bitwise.
  std::function<std::vector<T>(const TensorNode<T>&)> compute;
  /// Accumulates (+=) gradients into the inputs that require them,
  /// reading this node's grad.
  std::function<void(const TensorNode<T>&)> backward;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
  }
};

} // namespace detail

/// N-dimensional row-major tensor handle with reverse-mode autodiff.
/// Copies share the underlying node; values are immutable after creation
/// except through raw(), which is reserved for initializing leaves.
template <typename T>
class TensorT {
public:
  using Node = detail::TensorNode<T>;

  TensorT() = default;

  static TensorT zeros(Shape shape, bool requires_grad = false);
  static TensorT full(Shape shape, T fill, bool requires_grad = false);
  static TensorT from_data(Shape shape, std::vector<T> data,
                           bool requires_grad = false);
  static TensorT scalar(T v, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  int64_t numel() const { return static_cast<int64_t>(node_->value.size()); }

  const std::vector<T>& values() const { return node_->value; }
  /// Mutable access for leaf initialization and data loading only.
  std::vector<T>& raw();

  T item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v);

  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<T>& grad() const;
  void zero_grad() { node_->grad.clear(); }

  /// Reverse-mode sweep from a scalar. After it returns, every reachable
  /// tensor with requires_grad holds dThis/dTensor in grad(); contributions
  /// from multiple uses accumulate additively.
  void backward() const;

  /// Value copy detached from the graph (leaf, no grad tracking).
  TensorT detach() const;

  /// Deep value copy as a fresh leaf, preserving requires_grad.
  TensorT clone() const;

  /// Verifies the recorded-graph invariant: recomputing every non-leaf node
  /// from its inputs' recorded values reproduces the recorded value bitwise.
  bool replay_matches() const;

  const std::string& op() const { return node_->op; }

  std::shared_ptr<Node> node_;
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

namespace detail {

/// Builds a graph node: runs compute once for the forward value and wires
/// the backward rule. Exposed so tests can record ops with deliberately
/// wrong rules.
template <typename T>
TensorT<T> make_op(std::string op, std::vector<TensorT<T>> inputs, Shape out_shape,
                   std::function<std::vector<T>(const TensorNode<T>&)> compute,
                   std::function<void(const TensorNode<T>&)> backward);

} // namespace detail

/// Value-converting copy (f32 <-> f64), always a fresh leaf.
template <typename To, typename From>
TensorT<To> cast(const TensorT<From>& t) {
  std::vector<To> out(t.values().size());
  for (size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<To>(t.values()[i]);
  return TensorT<To>::from_data(t.shape(), std::move(out));
}

} // namespace oshx
