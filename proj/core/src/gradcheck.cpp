#include "dcaunet/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "dcaunet/autograd.hpp"
#include "dcaunet/errors.hpp"
#include "dcaunet/random.hpp"

namespace dcaunet {

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

GradCheckResult check_gradients(const std::function<Tensor()>& loss_fn, const std::vector<NamedParam>& inputs,
                                const GradCheckOptions& opts) {
  for (const auto& p : inputs) {
    if (!p.tensor.requires_grad()) throw UsageError("check_gradients: " + p.name + " does not require grad");
  }
  for (const auto& p : inputs) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
  backward(loss_fn());
  std::vector<std::vector<double>> analytic;
  for (const auto& p : inputs) {
    const auto g = p.tensor.has_grad() ? p.tensor.grad() : std::span<const double>{};
    analytic.emplace_back(g.begin(), g.end());
    if (analytic.back().empty()) analytic.back().assign(p.tensor.numel(), 0.0);
  }

  Rng rng(derive_seed(opts.seed, 0x6763));
  GradCheckResult res;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    Tensor x = inputs[t].tensor;
    const std::size_t n = x.numel();
    std::vector<std::size_t> idx;
    if (opts.max_per_tensor == 0 || opts.max_per_tensor >= n) {
      for (std::size_t i = 0; i < n; ++i) idx.push_back(i);
    } else {
      for (std::size_t k = 0; k < opts.max_per_tensor; ++k)
        idx.push_back(static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n - 1))));
    }
    for (auto i : idx) {
      auto v = x.mutable_values();
      const double orig = v[i];
      v[i] = orig + opts.step;
      const double fp = loss_fn().item();
      x.mutable_values()[i] = orig - opts.step;
      const double fm = loss_fn().item();
      x.mutable_values()[i] = orig;
      const double num = (fp - fm) / (2.0 * opts.step);
      const double err = relative_error(analytic[t][i], num, opts.floor);
      ++res.checked;
      if (err > res.max_rel_error || res.checked == 1) {
        res.max_rel_error = err;
        res.worst_name = inputs[t].name;
        res.worst_index = i;
        res.worst_analytic = analytic[t][i];
        res.worst_numeric = num;
      }
    }
  }
  return res;
}

Tensor projection_loss(const Tensor& out, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x70726f6a));
  std::vector<double> r(out.numel());
  for (auto& v : r) v = rng.normal();
  return sum(mul(out, Tensor(out.shape(), std::move(r))));
}

}  // namespace dcaunet
