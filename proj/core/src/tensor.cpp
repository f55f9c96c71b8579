#include "dcaunet/tensor.hpp"

#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "dcaunet/autograd.hpp"
#include "dcaunet/errors.hpp"

namespace dcaunet {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
  return s;
}

namespace {

std::atomic<bool> g_finite_checks{true};

void check_shape(const Shape& shape) {
  for (auto e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + to_string(shape));
  }
}

std::shared_ptr<detail::Node> new_leaf(Shape shape, std::vector<double> values) {
  check_shape(shape);
  if (numel(shape) != values.size()) {
    throw DimensionError("value count " + std::to_string(values.size()) +
                         " does not match shape " + to_string(shape));
  }
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->value = std::make_shared<std::vector<double>>(std::move(values));
  return n;
}

}  // namespace

void set_finite_checks(bool enabled) { g_finite_checks.store(enabled); }
bool finite_checks_enabled() { return g_finite_checks.load(); }

std::span<double> detail::Node::grad_buffer() {
  if (grad.empty()) grad.assign(value->size(), 0.0);
  return grad;
}

Tensor::Tensor(Shape shape, double fill) {
  const auto n = dcaunet::numel(shape);
  node_ = new_leaf(std::move(shape), std::vector<double>(n, fill));
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : node_(new_leaf(std::move(shape), std::move(values))) {}

Tensor Tensor::scalar(double value) { return Tensor(Shape{1}, std::vector<double>{value}); }

Tensor Tensor::from_node(std::shared_ptr<detail::Node> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

const Shape& Tensor::shape() const {
  if (!node_) throw UsageError("use of an undefined tensor");
  return node_->shape;
}

std::size_t Tensor::numel() const { return dcaunet::numel(shape()); }

std::size_t Tensor::dim(int axis) const {
  const auto r = static_cast<int>(rank());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         to_string(shape()));
  }
  return shape()[static_cast<std::size_t>(a)];
}

std::span<const double> Tensor::values() const {
  if (!node_) throw UsageError("use of an undefined tensor");
  return *node_->value;
}

std::span<double> Tensor::mutable_values() {
  if (!node_) throw UsageError("use of an undefined tensor");
  if (!node_->is_leaf()) throw UsageError("in-place write to a non-leaf tensor");
  return *node_->value;
}

std::vector<double> Tensor::to_vector() const {
  auto v = values();
  return {v.begin(), v.end()};
}

double Tensor::item() const {
  if (numel() != 1) throw UsageError("item() on tensor of shape " + to_string(shape()));
  return values()[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  if (!node_) throw UsageError("use of an undefined tensor");
  if (!node_->is_leaf()) throw UsageError("requires_grad can only be set on leaves");
  node_->requires_grad = on;
  return *this;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw UsageError("tensor has no gradient");
  return node_->grad;
}

std::span<double> Tensor::mutable_grad() {
  if (!node_) throw UsageError("use of an undefined tensor");
  return node_->grad_buffer();
}

void Tensor::zero_grad() {
  if (node_) node_->grad.clear();
}

Tensor Tensor::detach() const { return Tensor(shape(), to_vector()); }

const char* Tensor::op_name() const { return node_ ? node_->op : "undefined"; }

namespace detail {

namespace {

void scan_finite(const char* op, const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string("non-finite value produced by ") + op);
  }
}

bool any_requires_grad(const std::vector<Tensor>& inputs) {
  for (const auto& t : inputs) {
    if (t.defined() && t.requires_grad()) return true;
  }
  return false;
}

}  // namespace

Tensor make_result(const char* op, Shape shape, std::vector<double> values,
                   std::vector<Tensor> inputs, std::function<void(Node&)> backward) {
  if (finite_checks_enabled()) scan_finite(op, values);
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::make_shared<std::vector<double>>(std::move(values));
  n->op = op;
  if (any_requires_grad(inputs)) {
    n->requires_grad = true;
    for (auto& t : inputs) n->inputs.push_back(t.defined() ? t.node() : nullptr);
    n->backward = std::move(backward);
  }
  return Tensor::from_node(std::move(n));
}

Tensor make_view(const char* op, Shape shape, const Tensor& source,
                 std::function<void(Node&)> backward) {
  if (numel(shape) != source.numel()) {
    throw DimensionError(std::string(op) + ": cannot view " + to_string(source.shape()) + " as " +
                         to_string(shape));
  }
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = source.node()->value;
  n->op = op;
  if (source.requires_grad()) {
    n->requires_grad = true;
    n->inputs.push_back(source.node());
    n->backward = std::move(backward);
  }
  return Tensor::from_node(std::move(n));
}

}  // namespace detail

GradTape GradTape::record(const Tensor& loss) {
  if (!loss.defined()) throw UsageError("backward on an undefined tensor");
  if (loss.numel() != 1) {
    throw UsageError("backward requires a scalar loss, got shape " + to_string(loss.shape()));
  }
  if (!loss.requires_grad()) throw UsageError("loss is not connected to any differentiable leaf");
  GradTape tape(loss);
  // Iterative post-order DFS yields a topological order.
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child && child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      tape.order_.push_back(node);
      stack.pop_back();
    }
  }
  return tape;
}

void GradTape::replay() {
  for (auto* n : order_) {
    if (!n->is_leaf()) n->grad.assign(n->value->size(), 0.0);
  }
  auto* root = order_.back();
  auto g = root->grad_buffer();
  g[0] += 1.0;
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward) n->backward(*n);
  }
}

void backward(const Tensor& loss) { GradTape::record(loss).replay(); }

void zero_grad(std::span<Tensor> tensors) {
  for (auto& t : tensors) t.zero_grad();
}

}  // namespace dcaunet
