#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "hyperprune/common.hpp"
#include "hyperprune/random.hpp"

namespace hyperprune {

template <typename Scalar>
class Tensor;

namespace detail {

/// One recorded differentiable operation (or leaf). Interior nodes keep their
/// inputs alive through `parents`; `pull` scatters this node's gradient into
/// them. A forward pass forms a DAG of these; backward() linearizes it.
template <typename Scalar>
struct TensorNode {
  Shape shape;
  VecX<Scalar> value;
  VecX<Scalar> grad;  // empty until the first accumulation
  bool requires_grad = false;
  bool is_leaf = true;
  bool backward_ran = false;  // set on a loss node once swept
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> pull;

  void accumulate(const VecX<Scalar>& g) {
    if (grad.size() == 0) grad = VecX<Scalar>::Zero(value.size());
    grad += g;
  }
};

}  // namespace detail

/// Dense row-major tensor handle with reverse-mode differentiation record.
/// Value semantics on the handle; the node is shared.
template <typename Scalar>
class Tensor {
 public:
  using Node = detail::TensorNode<Scalar>;

  Tensor() = default;

  bool valid() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return n_->shape; }
  std::int64_t size() const { return n_->value.size(); }
  int dim(int i) const { return n_->shape.at(static_cast<size_t>(i)); }
  int ndim() const { return static_cast<int>(n_->shape.size()); }

  VecX<Scalar>& data() { return n_->value; }
  const VecX<Scalar>& data() const { return n_->value; }

  bool requires_grad() const { return n_->requires_grad; }
  bool is_leaf() const { return n_->is_leaf; }
  bool has_grad() const { return n_->grad.size() != 0; }
  const VecX<Scalar>& grad() const {
    if (!has_grad()) throw StateError("tensor has no gradient");
    return n_->grad;
  }
  void clear_grad() { n_->grad.resize(0); }
  void reset_backward() { n_->backward_ran = false; }

  Scalar item() const {
    if (size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
    return n_->value[0];
  }

  /// Same value, cut off from the graph.
  Tensor detach() const {
    Tensor t = leaf(shape(), false);
    t.data() = data();
    return t;
  }

  Node* node() const { return n_.get(); }
  std::shared_ptr<Node> node_ptr() const { return n_; }

  // ---- factories ----

  static Tensor leaf(const Shape& shape, bool requires_grad = false) {
    Tensor t;
    t.n_ = std::make_shared<Node>();
    t.n_->shape = shape;
    t.n_->value = VecX<Scalar>::Zero(numel(shape));
    t.n_->requires_grad = requires_grad;
    return t;
  }

  static Tensor from(const Shape& shape, std::vector<Scalar> values,
                     bool requires_grad = false) {
    check_shape(numel(shape) == static_cast<std::int64_t>(values.size()),
                "value count does not match shape " + shape_str(shape));
    Tensor t = leaf(shape, requires_grad);
    for (size_t i = 0; i < values.size(); ++i) t.data()[static_cast<Eigen::Index>(i)] = values[i];
    return t;
  }

  static Tensor zeros(const Shape& shape, bool requires_grad = false) {
    return leaf(shape, requires_grad);
  }

  static Tensor full(const Shape& shape, Scalar v, bool requires_grad = false) {
    Tensor t = leaf(shape, requires_grad);
    t.data().setConstant(v);
    return t;
  }

  static Tensor ones(const Shape& shape, bool requires_grad = false) {
    return full(shape, Scalar(1), requires_grad);
  }

  static Tensor scalar(Scalar v, bool requires_grad = false) {
    return full({1}, v, requires_grad);
  }

  static Tensor uniform(const Shape& shape, Scalar lo, Scalar hi, Rng& rng,
                        bool requires_grad = false) {
    Tensor t = leaf(shape, requires_grad);
    for (Eigen::Index i = 0; i < t.data().size(); ++i)
      t.data()[i] = static_cast<Scalar>(rng.uniform(lo, hi));
    return t;
  }

  static Tensor normal(const Shape& shape, Scalar mean, Scalar stddev, Rng& rng,
                       bool requires_grad = false) {
    Tensor t = leaf(shape, requires_grad);
    for (Eigen::Index i = 0; i < t.data().size(); ++i)
      t.data()[i] = mean + stddev * static_cast<Scalar>(rng.normal());
    return t;
  }

  /// Builder for differentiable ops. `pull` may be empty for value-only ops.
  static Tensor op(const Shape& shape, VecX<Scalar> value,
                   std::vector<Tensor> parents,
                   std::function<void(Node&)> pull, const char* name) {
    if (value.size() != numel(shape))
      throw ShapeError(std::string(name) + ": value size does not match shape");
    if (!value.allFinite())
      throw NumericError(std::string(name) + " produced a non-finite value");
    Tensor t;
    t.n_ = std::make_shared<Node>();
    t.n_->shape = shape;
    t.n_->value = std::move(value);
    t.n_->is_leaf = false;
    bool rg = false;
    for (const auto& p : parents) {
      t.n_->parents.push_back(p.n_);
      rg = rg || p.requires_grad();
    }
    t.n_->requires_grad = rg;
    if (rg) t.n_->pull = std::move(pull);
    return t;
  }

 private:
  std::shared_ptr<Node> n_;
};

/// Ordered record of the executed ops reachable from a root tensor.
/// Parents precede children; backward() sweeps the reverse order once.
template <typename Scalar>
class Graph {
 public:
  using Node = detail::TensorNode<Scalar>;

  explicit Graph(const Tensor<Scalar>& root) : root_(root) {
    if (!root.valid()) throw StateError("graph root is empty");
    // Iterative postorder DFS over parent edges; emits parents first, so
    // `order_` is topological and deterministic for a given forward pass.
    std::unordered_set<Node*> seen;
    std::vector<std::pair<std::shared_ptr<Node>, size_t>> stack;
    stack.emplace_back(root.node_ptr(), 0);
    seen.insert(root.node());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        auto parent = node->parents[next++];
        if (parent->requires_grad && seen.insert(parent.get()).second)
          stack.emplace_back(parent, 0);
      } else {
        order_.push_back(node);
        stack.pop_back();
      }
    }
  }

  size_t num_ops() const { return order_.size(); }

  /// Seed d(root)/d(root)=1 and propagate to every requires_grad leaf.
  void backward() {
    if (ran_ || root_.node()->backward_ran)
      throw StateError("backward already ran on this graph; reset first");
    if (root_.size() != 1) throw ShapeError("backward root must be scalar");
    ran_ = true;
    root_.node()->backward_ran = true;
    if (!root_.requires_grad()) return;
    root_.node()->accumulate(VecX<Scalar>::Ones(1));
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      Node& n = **it;
      if (n.pull && n.grad.size() != 0) n.pull(n);
    }
  }

 private:
  Tensor<Scalar> root_;
  std::vector<std::shared_ptr<Node>> order_;
  bool ran_ = false;
};

/// Reverse-mode sweep from a scalar loss.
template <typename Scalar>
void backward(const Tensor<Scalar>& loss) {
  Graph<Scalar>(loss).backward();
}

/// p <- p - lr * grad(p), gradients cleared. Leaves only.
template <typename Scalar>
void sgd_step(std::vector<Tensor<Scalar>>& params, Scalar lr) {
  for (auto& p : params) {
    if (!p.is_leaf()) throw StateError("sgd_step on non-leaf tensor");
    if (!p.has_grad()) throw StateError("sgd_step: parameter has no gradient");
  }
  for (auto& p : params) {
    p.data() -= lr * p.grad();
    if (!p.data().allFinite()) throw NumericError("sgd_step produced a non-finite parameter");
    p.clear_grad();
  }
}

template <typename Scalar>
void clear_grads(std::vector<Tensor<Scalar>>& params) {
  for (auto& p : params) p.clear_grad();
}

/// Central finite differences (f(x+eps*e_i) - f(x-eps*e_i)) / (2*eps).
template <typename Scalar, typename F>
Tensor<Scalar> finite_diff_grad(F&& f, const Tensor<Scalar>& x, Scalar eps) {
  if (!(eps > Scalar(0))) throw std::invalid_argument("finite_diff_grad: eps must be > 0");
  Tensor<Scalar> g = Tensor<Scalar>::leaf(x.shape(), false);
  Tensor<Scalar> probe = x.detach();
  for (Eigen::Index i = 0; i < probe.data().size(); ++i) {
    const Scalar saved = probe.data()[i];
    probe.data()[i] = saved + eps;
    const Scalar fp = f(probe);
    probe.data()[i] = saved - eps;
    const Scalar fm = f(probe);
    probe.data()[i] = saved;
    g.data()[i] = (fp - fm) / (Scalar(2) * eps);
  }
  return g;
}

/// Same, with the step scaled per element: eps_i = base * (1 + |x_i|).
template <typename Scalar, typename F>
Tensor<Scalar> finite_diff_grad_scaled(F&& f, const Tensor<Scalar>& x, Scalar base) {
  if (!(base > Scalar(0))) throw std::invalid_argument("finite_diff_grad_scaled: base must be > 0");
  Tensor<Scalar> g = Tensor<Scalar>::leaf(x.shape(), false);
  Tensor<Scalar> probe = x.detach();
  for (Eigen::Index i = 0; i < probe.data().size(); ++i) {
    const Scalar saved = probe.data()[i];
    const Scalar eps = base * (Scalar(1) + std::abs(saved));
    probe.data()[i] = saved + eps;
    const Scalar fp = f(probe);
    probe.data()[i] = saved - eps;
    const Scalar fm = f(probe);
    probe.data()[i] = saved;
    g.data()[i] = (fp - fm) / (Scalar(2) * eps);
  }
  return g;
}

}  // namespace hyperprune
