#include "doprompt/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

#include "doprompt/errors.hpp"

namespace doprompt {

namespace {
thread_local bool t_grad_enabled = true;
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<Real> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("tensor: shape " + shape_string(shape) + " holds " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeError("tensor: zero-sized dimension in " + shape_string(shape));
  }
  node_ = std::make_shared<detail::Node>();
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<Real>(n, Real(0)), requires_grad);
}

Tensor Tensor::full(Shape shape, Real value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<Real>(n, value), requires_grad);
}

Tensor Tensor::scalar(Real value) { return Tensor({}, {value}); }

Tensor Tensor::from_node(std::shared_ptr<detail::Node> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

static const detail::Node& checked(const std::shared_ptr<detail::Node>& node) {
  if (!node) throw ContractError("tensor: use of undefined tensor");
  return *node;
}

const Shape& Tensor::shape() const { return checked(node_).shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) {
    throw IndexError("tensor: axis " + std::to_string(axis) + " out of range for " +
                     shape_string(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return checked(node_).value.size(); }

std::span<const Real> Tensor::values() const { return checked(node_).value; }

std::span<Real> Tensor::mutable_values() {
  checked(node_);
  return node_->value;
}

Real Tensor::item() const {
  if (numel() != 1) throw ContractError("tensor: item() on " + shape_string(shape()));
  return node_->value[0];
}

bool Tensor::requires_grad() const { return checked(node_).requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  checked(node_);
  if (!node_->inputs.empty()) throw ContractError("tensor: requires_grad is fixed for op outputs");
  node_->requires_grad = flag;
}

bool Tensor::is_leaf() const { return checked(node_).inputs.empty(); }

bool Tensor::has_grad() const { return !checked(node_).grad.empty(); }

std::span<const Real> Tensor::grad() const {
  if (!has_grad()) throw ContractError("tensor: gradient is absent");
  return node_->grad;
}

std::span<Real> Tensor::mutable_grad() {
  checked(node_);
  if (node_->grad.empty()) node_->grad.assign(node_->value.size(), Real(0));
  return node_->grad;
}

void Tensor::zero_grad() {
  checked(node_);
  node_->grad.assign(node_->value.size(), Real(0));
}

void Tensor::clear_grad() {
  checked(node_);
  node_->grad.clear();
  node_->grad.shrink_to_fit();
}

const char* Tensor::op_name() const { return checked(node_).op; }

Tensor Tensor::detach() const {
  const detail::Node& n = checked(node_);
  return Tensor(n.shape, n.value, false);
}

Tensor Tensor::clone(bool requires_grad) const {
  const detail::Node& n = checked(node_);
  return Tensor(n.shape, n.value, requires_grad);
}

std::vector<const detail::Node*> topological_order(const Tensor& root) {
  std::vector<const detail::Node*> order;
  if (!root.defined() || !root.requires_grad()) return order;
  std::unordered_set<const detail::Node*> seen;
  // Iterative post-order DFS; deep graphs must not exhaust the stack.
  std::vector<std::pair<const detail::Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      const detail::Node* child = node->inputs[next++].get();
      if (child && child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

void Tensor::backward() const {
  const detail::Node& root = checked(node_);
  if (root.value.size() != 1 || !root.shape.empty()) {
    throw ContractError("backward: loss must be a scalar, got shape " + shape_string(root.shape));
  }
  if (!root.requires_grad) throw ContractError("backward: loss does not depend on any parameter");
  const auto order = topological_order(*this);
  for (const detail::Node* cnode : order) {
    auto* node = const_cast<detail::Node*>(cnode);
    if (!node->inputs.empty()) {
      // Interior gradients are per-sweep; leaves accumulate across sweeps.
      node->grad.assign(node->value.size(), Real(0));
    } else if (node->grad.empty()) {
      node->grad.assign(node->value.size(), Real(0));
    }
  }
  node_->grad[0] += Real(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* node = const_cast<detail::Node*>(*it);
    if (node->backward) node->backward(*node);
  }
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

}  // namespace doprompt
