#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "dcaunet/tensor.hpp"

namespace dcaunet {

// Topologically ordered record of the kernels that produced a scalar loss.
// Replay walks it back to front, visiting each node exactly once.
class GradTape {
 public:
  static GradTape record(const Tensor& loss);

  std::size_t size() const { return order_.size(); }
  // Nodes in forward (topological) order; the loss is last.
  std::span<detail::Node* const> nodes() const { return order_; }

  // Seeds d(loss)/d(loss) = 1 and propagates. Interior gradients are reset on
  // every replay; leaf gradients accumulate.
  void replay();

 private:
  explicit GradTape(Tensor loss) : loss_(std::move(loss)) {}
  Tensor loss_;
  std::vector<detail::Node*> order_;
};

void backward(const Tensor& loss);

void zero_grad(std::span<Tensor> tensors);

}  // namespace dcaunet
