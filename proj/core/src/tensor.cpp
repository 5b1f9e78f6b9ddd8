#include "pem/tensor.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace pem {

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

namespace detail {

std::vector<double>& grad_buffer(Node& node) {
  if (node.grad.empty()) node.grad.assign(node.value.size(), 0.0);
  return node.grad;
}

}  // namespace detail

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  for (std::size_t extent : shape) {
    if (extent == 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape));
  }
  if (values.size() != pem::numel(shape)) {
    throw ShapeError("value count " + std::to_string(values.size()) +
                     " does not match shape " + to_string(shape));
  }
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericError("tensor built from a non-finite value");
  }
  node_ = std::make_shared<detail::Node>();
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::ones(Shape shape, bool requires_grad) {
  return full(std::move(shape), 1.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = pem::numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({}, {value}, requires_grad);
}

Tensor Tensor::from_node(std::shared_ptr<detail::Node> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

const Shape& Tensor::shape() const {
  if (!node_) throw std::logic_error("undefined tensor");
  return node_->shape;
}

std::size_t Tensor::size(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + to_string(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return node_ ? node_->value.size() : 0; }

std::span<const double> Tensor::values() const {
  if (!node_) throw std::logic_error("undefined tensor");
  return node_->value;
}

std::span<double> Tensor::mutable_values() {
  if (!node_) throw std::logic_error("undefined tensor");
  if (!node_->is_leaf) throw std::logic_error("only leaf tensors can be modified in place");
  return node_->value;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() needs a single-element tensor, got " + to_string(shape()));
  return node_->value[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
bool Tensor::is_leaf() const { return !node_ || node_->is_leaf; }
bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!node_) throw std::logic_error("undefined tensor");
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_) node_->grad.clear();
}

Tensor Tensor::detach() const {
  if (!node_) return {};
  auto node = std::make_shared<detail::Node>();
  node->shape = node_->shape;
  node->value = node_->value;
  return from_node(std::move(node));
}

void backward(const Tensor& loss) {
  if (!loss.defined()) throw std::logic_error("backward on undefined tensor");
  if (loss.numel() != 1) {
    throw ShapeError("backward needs a scalar loss, got shape " + to_string(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw std::logic_error("loss does not depend on any tensor that requires grad");
  }

  // Iterative post-order DFS; `on_stack` detects cycles, which the op
  // constructors cannot create.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> done;
  std::unordered_set<detail::Node*> on_stack;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  auto* root = loss.node_ptr().get();
  stack.emplace_back(root, 0);
  on_stack.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (!parent->requires_grad || done.count(parent)) continue;
      assert(!on_stack.count(parent) && "cycle in autograd graph");
      if (on_stack.count(parent)) throw std::logic_error("cycle in autograd graph");
      on_stack.insert(parent);
      stack.emplace_back(parent, 0);
    } else {
      on_stack.erase(node);
      done.insert(node);
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (detail::Node* node : order) {
    if (!node->is_leaf) node->grad.clear();
  }
  detail::grad_buffer(*root)[0] += 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->is_leaf || !node->backward || node->grad.empty()) continue;
    node->backward(*node);
  }
  for (detail::Node* node : order) {
    if (!node->is_leaf) {
      node->grad.clear();
      node->grad.shrink_to_fit();
    }
  }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor ParameterStore::add(std::string name, const Tensor& init) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  auto node = std::make_shared<detail::Node>();
  node->shape = init.shape();
  node->value.assign(init.values().begin(), init.values().end());
  node->requires_grad = true;
  Tensor param = Tensor::from_node(std::move(node));
  index_.emplace(name, params_.size());
  params_.push_back({std::move(name), param});
  return param;
}

Tensor ParameterStore::get(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw std::out_of_range("unknown parameter: " + std::string(name));
  return params_[it->second].tensor;
}

bool ParameterStore::contains(std::string_view name) const {
  return index_.count(std::string(name)) != 0;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t total = 0;
  for (const auto& p : params_) total += p.tensor.numel();
  return total;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
}

}  // namespace pem
