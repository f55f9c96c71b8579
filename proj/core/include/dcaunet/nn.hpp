#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "dcaunet/ops.hpp"
#include "dcaunet/random.hpp"
#include "dcaunet/tensor.hpp"

namespace dcaunet {

// Optimizer grouping. Only `weight` entries receive weight decay; `buffer`
// entries are serialized but never trained.
enum class ParamKind { weight, bias, norm, buffer };

struct NamedParam {
  std::string name;
  Tensor tensor;
  ParamKind kind;
};

class ParamList {
 public:
  void add(std::string name, const Tensor& t, ParamKind kind);
  const std::vector<NamedParam>& entries() const& { return entries_; }
  std::vector<NamedParam>& entries() & { return entries_; }
  // by value on temporaries, so `for (e : net.parameters().entries())` is safe
  std::vector<NamedParam> entries() && { return std::move(entries_); }
  const NamedParam* find(const std::string& name) const;
  std::size_t trainable_count() const;  // scalar parameters, buffers excluded

 private:
  std::vector<NamedParam> entries_;
};

struct AttentionRecord {
  std::string layer;
  std::size_t block_index = 0;
  double lambda = 0.0;
  // (N, h, HW, N_win). s2 and diff are undefined for standard attention.
  Tensor s1, s2, diff;
};

struct GateRecord {
  std::string layer;
  Tensor channel_gate;  // (N,1,1,C) or undefined when ablated
  Tensor spatial_gate;  // (N,H,W,1) or undefined when ablated
};

// Receives detached copies of intermediate maps during a forward pass.
struct Probe {
  std::vector<AttentionRecord> attention;
  std::vector<GateRecord> gates;
};

enum class Mode { train, eval };

struct ForwardContext {
  Mode mode = Mode::eval;
  bool update_running_stats = true;
  Probe* probe = nullptr;
  std::string scope;  // layer-name prefix for probe records

  bool training() const { return mode == Mode::train; }
  ForwardContext child(const std::string& name) const {
    ForwardContext c = *this;
    c.scope = scope.empty() ? name : scope + "." + name;
    return c;
  }
};

// Marks a freshly initialized tensor as a trainable leaf.
inline Tensor parameter(Tensor t) {
  t.set_requires_grad(true);
  return t;
}

Tensor truncated_normal_tensor(Shape shape, double stddev, Rng& rng);
Tensor normal_tensor(Shape shape, double stddev, Rng& rng);

struct Linear {
  Tensor weight;  // (in, out)
  Tensor bias;    // (out) or undefined

  Linear() = default;
  Linear(std::size_t in, std::size_t out, bool with_bias, Rng& rng);
  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
  void collect(ParamList& params, const std::string& prefix) const;
  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }
};

struct Conv2d {
  Tensor weight;  // (KH, KW, Cin/groups, Cout)
  Tensor bias;
  Conv2dOptions opts;

  Conv2d() = default;
  Conv2d(std::size_t in, std::size_t out, std::size_t kernel, Conv2dOptions opts, bool with_bias,
         Rng& rng);
  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, opts); }
  void collect(ParamList& params, const std::string& prefix) const;
};

struct LayerNorm {
  Tensor gain, bias;
  double eps = 1e-5;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t c, double eps = 1e-5);
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias, eps); }
  void collect(ParamList& params, const std::string& prefix) const;
};

struct BatchNorm {
  Tensor gain, bias, running_mean, running_var;
  double eps = 1e-5;
  double momentum = 0.1;

  BatchNorm() = default;
  explicit BatchNorm(std::size_t c, double eps = 1e-5, double momentum = 0.1);
  Tensor operator()(const Tensor& x, const ForwardContext& ctx);
  void collect(ParamList& params, const std::string& prefix) const;
};

}  // namespace dcaunet
