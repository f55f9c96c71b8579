#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace dcaunet {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);
// Row-major strides, in elements.
std::vector<std::size_t> strides_of(const Shape& shape);

namespace detail {

// One vertex of the autograd graph. Values may be shared between a node and
// its reshapes; gradients never are.
struct Node {
  Shape shape;
  std::shared_ptr<std::vector<double>> value;
  std::vector<double> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this->grad and accumulates into inputs' grads.
  std::function<void(Node&)> backward;

  bool is_leaf() const { return inputs.empty(); }
  std::span<double> grad_buffer();
};

}  // namespace detail

// Dense row-major float64 tensor with optional participation in reverse-mode
// differentiation. Copies share the underlying node (handle semantics).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double value);
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
  static Tensor full(Shape shape, double v) { return Tensor(std::move(shape), v); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  // Negative axes count from the back.
  std::size_t dim(int axis) const;

  std::span<const double> values() const;
  // In-place access; only legal on leaves (parameters, buffers, inputs).
  std::span<double> mutable_values();
  std::vector<double> to_vector() const;
  double item() const;
  double operator[](std::size_t flat) const { return values()[flat]; }

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on = true);
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  // New leaf holding a copy of the values, cut from the graph.
  Tensor detach() const;
  Tensor clone() const { return detach(); }
  const char* op_name() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  static Tensor from_node(std::shared_ptr<detail::Node> node);

 private:
  std::shared_ptr<detail::Node> node_;
};

// Finite-value scanning after every kernel; on by default.
void set_finite_checks(bool enabled);
bool finite_checks_enabled();

namespace detail {

// Builds an op result. Records inputs and the backward closure only if some
// input participates in differentiation.
Tensor make_result(const char* op, Shape shape, std::vector<double> values,
                   std::vector<Tensor> inputs,
                   std::function<void(Node&)> backward);
Tensor make_view(const char* op, Shape shape, const Tensor& source,
                 std::function<void(Node&)> backward);

}  // namespace detail

}  // namespace dcaunet
