#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace doprompt {

#ifdef DOPROMPT_REAL_DOUBLE
using Real = double;
#else
using Real = float;
#endif

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

// One vertex of the computation graph. Leaves have no inputs; op outputs keep
// their inputs alive until the graph is dropped.
struct Node {
  Shape shape;
  std::vector<Real> value;
  std::vector<Real> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;
};

}  // namespace detail

/// Dense row-major tensor with an optional gradient. Copies share storage;
/// use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<Real> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Real value, bool requires_grad = false);
  static Tensor scalar(Real value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const Real> values() const;
  // Writes bypass the graph; meant for initialization and optimizer updates.
  std::span<Real> mutable_values();
  Real item() const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const Real> grad() const;
  // Allocates a zero gradient if none exists.
  std::span<Real> mutable_grad();
  void zero_grad();
  void clear_grad();

  /// Reverse-mode sweep from this scalar. Gradients accumulate into leaves;
  /// every reachable tensor that requires grad ends up with a populated grad.
  void backward() const;

  /// Same values, no graph edge back to this tensor.
  Tensor detach() const;
  /// Deep copy of values as a fresh leaf.
  Tensor clone(bool requires_grad = false) const;

  const char* op_name() const;
  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

  // Graph construction hook used by op implementations.
  static Tensor from_node(std::shared_ptr<detail::Node> node);
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

bool grad_enabled();

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Nodes that backward() visits from `root`, in replay order reversed
/// (inputs before consumers).
std::vector<const detail::Node*> topological_order(const Tensor& root);

}  // namespace doprompt
