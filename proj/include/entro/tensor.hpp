#pragma once

// Reverse-mode autodiff over dense row-major NCHW tensors. A TensorT is a
// cheap handle onto a graph node; ops (ops.hpp) create nodes whose closures
// hold the parent handles and the vector-Jacobian product. backward() walks
// the reachable subgraph once in reverse topological order.
//
// Scalar-templated: float is the production type, double exists so tests can
// run the same graph code under finite differences without f32 quantization
// drowning small gradients.

#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "entro/common.hpp"

namespace entro {

using Shape = std::vector<int>;

inline int64_t numel(const Shape& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename S>
class TensorT;

namespace detail {

template <typename S>
struct Node {
  Shape shape;
  std::vector<S> value;
  bool requires_grad = false;
  std::vector<S> grad;  // allocated on first accumulation
  std::vector<TensorT<S>> parents;
  std::function<void(Node<S>&)> vjp;  // reads this->grad, accumulates into parents
  bool consumed = false;              // a backward pass already ran through here
};

}  // namespace detail

template <typename S>
class TensorT {
 public:
  using Scalar = S;

  TensorT() = default;

  static TensorT zeros(Shape shape, bool requires_grad = false) {
    return from_data(std::move(shape), {}, requires_grad);
  }

  static TensorT full(Shape shape, S v, bool requires_grad = false) {
    TensorT t = zeros(std::move(shape), requires_grad);
    for (S& x : t.node_->value) x = v;
    return t;
  }

  static TensorT from_data(Shape shape, std::vector<S> data, bool requires_grad = false) {
    const int64_t n = numel(shape);
    for (int d : shape)
      if (d < 0) throw ShapeError("tensor dim must be >= 0, got " + shape_str(shape));
    if (!data.empty() && static_cast<int64_t>(data.size()) != n)
      throw ShapeError("data size " + std::to_string(data.size()) + " does not match shape " +
                       shape_str(shape));
    auto node = std::make_shared<detail::Node<S>>();
    node->shape = std::move(shape);
    if (data.empty())
      node->value.assign(static_cast<size_t>(n), S(0));
    else
      node->value = std::move(data);
    node->requires_grad = requires_grad;
    TensorT t;
    t.node_ = std::move(node);
    return t;
  }

  static TensorT randn(Shape shape, Rng& rng, double stddev, bool requires_grad = false) {
    TensorT t = zeros(std::move(shape), requires_grad);
    for (S& x : t.node_->value) x = static_cast<S>(rng.normal() * stddev);
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int64_t size() const { return static_cast<int64_t>(node_->value.size()); }

  const std::vector<S>& values() const { return node_->value; }

  // Direct mutation is only sound for leaves that no graph has recorded yet
  // (parameter init, optimizer updates, input staging).
  std::vector<S>& mutable_values() { return node_->value; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool b) { node_->requires_grad = b; }

  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<S>& grad() const {
    if (node_->grad.empty()) throw ValueError("tensor has no gradient");
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  S item() const {
    if (size() != 1)
      throw ShapeError("item() needs a single-element tensor, got " + shape_str(shape()));
    return node_->value[0];
  }

  // Value copy with no graph linkage.
  TensorT detached(bool requires_grad = false) const {
    return from_data(node_->shape, node_->value, requires_grad);
  }

  detail::Node<S>* node() const { return node_.get(); }

  void accumulate_grad(const S* g, int64_t n) {
    auto& buf = node_->grad;
    if (buf.empty()) buf.assign(node_->value.size(), S(0));
    for (int64_t i = 0; i < n; ++i) buf[static_cast<size_t>(i)] += g[i];
  }

 private:
  std::shared_ptr<detail::Node<S>> node_;
};

namespace detail {

// True if gradient needs to flow into t: either a trainable leaf or an
// interior node whose own vjp will keep propagating.
template <typename S>
bool wants_grad(const TensorT<S>& t) {
  return t.requires_grad() || static_cast<bool>(t.node()->vjp);
}

template <typename S>
TensorT<S> make_node(Shape shape, std::vector<S> value, std::vector<TensorT<S>> parents,
                     std::function<void(Node<S>&)> vjp) {
  bool track = false;
  for (const auto& p : parents) track = track || wants_grad(p);
  TensorT<S> out = TensorT<S>::from_data(std::move(shape), std::move(value));
  if (track) {
    out.node()->parents = std::move(parents);
    out.node()->vjp = std::move(vjp);
  }
  return out;
}

}  // namespace detail

// Reverse accumulation from a scalar loss. Each reachable node is visited
// exactly once; gradients of shared subexpressions accumulate. A second call
// through the same graph is an error (stale activations would silently give
// doubled gradients otherwise).
template <typename S>
void backward(const TensorT<S>& loss) {
  if (!loss.defined()) throw ValueError("backward: undefined tensor");
  if (loss.size() != 1)
    throw ShapeError("backward needs a scalar loss, got " + shape_str(loss.shape()));
  detail::Node<S>* root = loss.node();
  if (!root->vjp && !root->requires_grad)
    throw ValueError("backward: loss is detached from any recorded graph");
  if (root->consumed) throw ValueError("backward: graph already consumed; rebuild the graph");

  // Iterative DFS postorder; reversed it is a topological order in which
  // every node appears before its parents.
  std::vector<detail::Node<S>*> order;
  std::unordered_set<detail::Node<S>*> seen;
  struct Frame {
    detail::Node<S>* node;
    size_t next_parent;
  };
  std::vector<Frame> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      detail::Node<S>* p = f.node->parents[f.next_parent++].node();
      if (!seen.count(p) && (p->vjp || p->requires_grad)) {
        if (p->vjp && p->consumed)
          throw ValueError("backward: graph already consumed; rebuild the graph");
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }

  root->grad.assign(1, S(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node<S>* n = *it;
    n->consumed = true;
    if (n->vjp && !n->grad.empty()) n->vjp(*n);
  }
}

// Max relative error between backward() gradients and central differences of
// f at `point`. Denominator max(|analytic|, |numeric|, 1e-6).
template <typename S>
double finite_diff_check(const std::function<TensorT<S>(const TensorT<S>&)>& f,
                         const TensorT<S>& point, double eps) {
  if (eps <= 0.0) throw ValueError("finite_diff_check: eps must be positive");
  TensorT<S> x = point.detached(/*requires_grad=*/true);
  TensorT<S> loss = f(x);
  if (loss.size() != 1)
    throw ShapeError("finite_diff_check: f must return a scalar, got " + shape_str(loss.shape()));
  backward(loss);
  std::vector<S> analytic = x.has_grad() ? x.grad() : std::vector<S>(x.values().size(), S(0));

  double worst = 0.0;
  std::vector<S> base = point.values();
  for (size_t i = 0; i < base.size(); ++i) {
    std::vector<S> bumped = base;
    bumped[i] = static_cast<S>(static_cast<double>(base[i]) + eps);
    const double up = static_cast<double>(f(TensorT<S>::from_data(point.shape(), bumped)).item());
    bumped[i] = static_cast<S>(static_cast<double>(base[i]) - eps);
    const double down = static_cast<double>(f(TensorT<S>::from_data(point.shape(), bumped)).item());
    const double numeric = (up - down) / (2.0 * eps);
    const double a = static_cast<double>(analytic[i]);
    const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-6});
    worst = std::max(worst, std::fabs(a - numeric) / denom);
  }
  return worst;
}

using Tensor = TensorT<float>;

}  // namespace entro
