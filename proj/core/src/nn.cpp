#include "dcaunet/nn.hpp"

#include <cmath>

#include "dcaunet/errors.hpp"

namespace dcaunet {

void ParamList::add(std::string name, const Tensor& t, ParamKind kind) {
  if (!t.defined()) return;
  if (find(name)) throw UsageError("duplicate parameter name " + name);
  entries_.push_back({std::move(name), t, kind});
}

const NamedParam* ParamList::find(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

std::size_t ParamList::trainable_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) {
    if (e.kind != ParamKind::buffer) n += e.tensor.numel();
  }
  return n;
}

Tensor truncated_normal_tensor(Shape shape, double stddev, Rng& rng) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.truncated_normal(stddev);
  return Tensor(std::move(shape), std::move(v));
}

Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.normal(0.0, stddev);
  return Tensor(std::move(shape), std::move(v));
}

Linear::Linear(std::size_t in, std::size_t out, bool with_bias, Rng& rng)
    : weight(parameter(truncated_normal_tensor({in, out}, 0.02, rng))) {
  if (with_bias) bias = parameter(Tensor::zeros({out}));
}

void Linear::collect(ParamList& params, const std::string& prefix) const {
  params.add(prefix + ".weight", weight, ParamKind::weight);
  params.add(prefix + ".bias", bias, ParamKind::bias);
}

Conv2d::Conv2d(std::size_t in, std::size_t out, std::size_t kernel, Conv2dOptions o,
               bool with_bias, Rng& rng)
    : opts(o) {
  if (in % o.groups != 0 || out % o.groups != 0) {
    throw DimensionError("conv: channels " + std::to_string(in) + "->" + std::to_string(out) +
                         " not divisible by groups " + std::to_string(o.groups));
  }
  const std::size_t fan_in = kernel * kernel * (in / o.groups);
  // He-normal over the fan-in.
  weight = parameter(normal_tensor({kernel, kernel, in / o.groups, out},
                                   std::sqrt(2.0 / static_cast<double>(fan_in)), rng));
  if (with_bias) bias = parameter(Tensor::zeros({out}));
}

void Conv2d::collect(ParamList& params, const std::string& prefix) const {
  params.add(prefix + ".weight", weight, ParamKind::weight);
  params.add(prefix + ".bias", bias, ParamKind::bias);
}

LayerNorm::LayerNorm(std::size_t c, double e)
    : gain(parameter(Tensor::ones({c}))), bias(parameter(Tensor::zeros({c}))), eps(e) {}

void LayerNorm::collect(ParamList& params, const std::string& prefix) const {
  params.add(prefix + ".gain", gain, ParamKind::norm);
  params.add(prefix + ".bias", bias, ParamKind::norm);
}

BatchNorm::BatchNorm(std::size_t c, double e, double m)
    : gain(parameter(Tensor::ones({c}))),
      bias(parameter(Tensor::zeros({c}))),
      running_mean(Tensor::zeros({c})),
      running_var(Tensor::ones({c})),
      eps(e),
      momentum(m) {}

Tensor BatchNorm::operator()(const Tensor& x, const ForwardContext& ctx) {
  BatchNormOptions o;
  o.eps = eps;
  o.momentum = momentum;
  o.training = ctx.training();
  o.update_running_stats = ctx.update_running_stats;
  return batch_norm(x, gain, bias, running_mean, running_var, o);
}

void BatchNorm::collect(ParamList& params, const std::string& prefix) const {
  params.add(prefix + ".gain", gain, ParamKind::norm);
  params.add(prefix + ".bias", bias, ParamKind::norm);
  params.add(prefix + ".running_mean", running_mean, ParamKind::buffer);
  params.add(prefix + ".running_var", running_var, ParamKind::buffer);
}

}  // namespace dcaunet
