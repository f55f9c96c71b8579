#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dcaunet/nn.hpp"
#include "dcaunet/tensor.hpp"

namespace dcaunet {

struct GradCheckOptions {
  double step = 1e-5;           // central difference h
  double floor = 1e-6;          // denominator floor of the relative error
  std::size_t max_per_tensor = 0;  // 0: every element; else a seeded sample
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_name;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0, worst_numeric = 0.0;
  std::size_t checked = 0;
};

// |a - n| / max(|a|, |n|, floor).
double relative_error(double analytic, double numeric, double floor);

// Compares backward() of `loss_fn` against central differences for every
// element (or a sample) of each input. Inputs must be leaves; they are
// perturbed in place and restored.
GradCheckResult check_gradients(const std::function<Tensor()>& loss_fn, const std::vector<NamedParam>& inputs,
                                const GradCheckOptions& opts = {});

// sum(out * R) with a fixed random R: a scalar loss that exercises every
// output element with a distinct weight.
Tensor projection_loss(const Tensor& out, std::uint64_t seed);

}  // namespace dcaunet
