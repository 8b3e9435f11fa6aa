#include "oshx/tensor.hpp"

#include <algorithm>
#include <cstring>
#include <sstream>
#include <unordered_set>

namespace oshx {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << ")";
  return os.str();
}

bool same_shape(const Shape& a, const Shape& b) { return a == b; }

namespace {

template <typename T>
std::shared_ptr<detail::TensorNode<T>> new_leaf(Shape shape, std::vector<T> data,
                                                bool requires_grad) {
  for (int d : shape) {
    if (d <= 0)
      throw ShapeError("tensor dims must be positive, got " + shape_str(shape));
  }
  if (static_cast<int64_t>(data.size()) != shape_numel(shape))
    throw ShapeError("data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  auto n = std::make_shared<detail::TensorNode<T>>();
  n->shape = std::move(shape);
  n->value = std::move(data);
  n->requires_grad = requires_grad;
  return n;
}

} // namespace

template <typename T>
TensorT<T> TensorT<T>::zeros(Shape shape, bool requires_grad) {
  std::vector<T> data(static_cast<size_t>(shape_numel(shape)), T(0));
  TensorT t;
  t.node_ = new_leaf<T>(std::move(shape), std::move(data), requires_grad);
  return t;
}

template <typename T>
TensorT<T> TensorT<T>::full(Shape shape, T fill, bool requires_grad) {
  std::vector<T> data(static_cast<size_t>(shape_numel(shape)), fill);
  TensorT t;
  t.node_ = new_leaf<T>(std::move(shape), std::move(data), requires_grad);
  return t;
}

template <typename T>
TensorT<T> TensorT<T>::from_data(Shape shape, std::vector<T> data,
                                 bool requires_grad) {
  TensorT t;
  t.node_ = new_leaf<T>(std::move(shape), std::move(data), requires_grad);
  return t;
}

template <typename T>
TensorT<T> TensorT<T>::scalar(T v, bool requires_grad) {
  return from_data({1}, {v}, requires_grad);
}

template <typename T>
std::vector<T>& TensorT<T>::raw() {
  if (node_->compute)
    throw UsageError("raw() is only valid on leaf tensors (op=" + node_->op + ")");
  return node_->value;
}

template <typename T>
T TensorT<T>::item() const {
  if (numel() != 1)
    throw UsageError("item() requires a scalar, got shape " + shape_str(shape()));
  return node_->value[0];
}

template <typename T>
void TensorT<T>::set_requires_grad(bool v) {
  node_->requires_grad = v;
}

template <typename T>
const std::vector<T>& TensorT<T>::grad() const {
  if (node_->grad.empty())
    throw UsageError("grad() requested but no gradient has been accumulated");
  return node_->grad;
}

template <typename T>
void TensorT<T>::backward() const {
  if (numel() != 1)
    throw UsageError("backward() requires a scalar loss, got shape " +
                     shape_str(shape()));
  if (!node_->requires_grad)
    throw UsageError("backward() on a tensor that is not connected to any "
                     "parameter requiring gradients");

  // Topological order over the requires-grad subgraph (iterative DFS so deep
  // graphs do not overflow the stack).
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  struct Frame {
    Node* n;
    size_t next_input;
  };
  std::vector<Frame> stack;
  stack.push_back({node_.get(), 0});
  visited.insert(node_.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_input < f.n->inputs.size()) {
      Node* in = f.n->inputs[f.next_input++].get();
      if (in->requires_grad && !visited.count(in)) {
        visited.insert(in);
        stack.push_back({in, 0});
      }
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }

  // Interior gradients are transient per sweep; only leaf gradients
  // accumulate across backward() calls.
  for (Node* n : order)
    if (n->compute) n->grad.clear();
  node_->ensure_grad();
  node_->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward) n->backward(*n);
  }
}

template <typename T>
TensorT<T> TensorT<T>::detach() const {
  return from_data(shape(), node_->value, false);
}

template <typename T>
TensorT<T> TensorT<T>::clone() const {
  return from_data(shape(), node_->value, node_->requires_grad);
}

template <typename T>
bool TensorT<T>::replay_matches() const {
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<Node*> stack{node_.get()};
  visited.insert(node_.get());
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (auto& in : n->inputs) {
      if (!visited.count(in.get())) {
        visited.insert(in.get());
        stack.push_back(in.get());
      }
    }
  }
  for (Node* n : order) {
    if (!n->compute) continue;
    std::vector<T> recomputed = n->compute(*n);
    if (recomputed.size() != n->value.size()) return false;
    if (std::memcmp(recomputed.data(), n->value.data(),
                    recomputed.size() * sizeof(T)) != 0)
      return false;
  }
  return true;
}

namespace detail {

template <typename T>
TensorT<T> make_op(std::string op, std::vector<TensorT<T>> inputs, Shape out_shape,
                   std::function<std::vector<T>(const TensorNode<T>&)> compute,
                   std::function<void(const TensorNode<T>&)> backward) {
  auto n = std::make_shared<TensorNode<T>>();
  n->op = std::move(op);
  n->shape = std::move(out_shape);
  n->inputs.reserve(inputs.size());
  bool needs_grad = false;
  for (auto& t : inputs) {
    needs_grad = needs_grad || t.node_->requires_grad;
    n->inputs.push_back(t.node_);
  }
  n->requires_grad = needs_grad;
  n->compute = std::move(compute);
  n->backward = std::move(backward);
  n->value = n->compute(*n);
  if (static_cast<int64_t>(n->value.size()) != shape_numel(n->shape))
    throw ShapeError("op " + n->op + " produced " +
                     std::to_string(n->value.size()) + " values for shape " +
                     shape_str(n->shape));
  TensorT<T> t;
  t.node_ = std::move(n);
  return t;
}

template TensorT<float> make_op<float>(
    std::string, std::vector<TensorT<float>>, Shape,
    std::function<std::vector<float>(const TensorNode<float>&)>,
    std::function<void(const TensorNode<float>&)>);
template TensorT<double> make_op<double>(
    std::string, std::vector<TensorT<double>>, Shape,
    std::function<std::vector<double>(const TensorNode<double>&)>,
    std::function<void(const TensorNode<double>&)>);

} // namespace detail

template class TensorT<float>;
template class TensorT<double>;

} // namespace oshx
