#include "dcaunet/csff.hpp"

#include "dcaunet/errors.hpp"

namespace dcaunet {

namespace {

Conv2dOptions same3x3() {
  Conv2dOptions o;
  o.padding = 1;
  return o;
}

const CsffConfig& checked(const CsffConfig& c) {
  c.validate();
  return c;
}

}  // namespace

void CsffConfig::validate() const {
  if (channels == 0 || channels % kChannelReduction != 0) {
    throw ConfigError("csff: channels " + std::to_string(channels) + " must be a positive multiple of " +
                      std::to_string(kChannelReduction));
  }
}

CsffState::CsffState(const CsffConfig& c, Rng& rng)
    : cfg(checked(c)),
      refine_e(c.channels, c.channels, 3, same3x3(), false, rng),
      refine_d(c.channels, c.channels, 3, same3x3(), false, rng),
      fuse(2 * c.channels, c.channels, 3, same3x3(), false, rng),
      bn_e(c.channels),
      bn_d(c.channels),
      bn_f(c.channels),
      mlp1(c.channels, c.channels / kChannelReduction, false, rng),
      mlp2(c.channels / kChannelReduction, c.channels, false, rng),
      spatial(2, 1, 3, same3x3(), false, rng) {}

void CsffState::collect(ParamList& params, const std::string& prefix) const {
  refine_e.collect(params, prefix + ".refine_e");
  bn_e.collect(params, prefix + ".bn_e");
  refine_d.collect(params, prefix + ".refine_d");
  bn_d.collect(params, prefix + ".bn_d");
  fuse.collect(params, prefix + ".fuse");
  bn_f.collect(params, prefix + ".bn_f");
  if (cfg.use_channel_attn) {
    mlp1.collect(params, prefix + ".channel_mlp.fc1");
    mlp2.collect(params, prefix + ".channel_mlp.fc2");
  }
  if (cfg.use_spatial_attn) spatial.collect(params, prefix + ".spatial_conv");
}

std::pair<Tensor, Tensor> channel_attention(const Tensor& x_f, const CsffState& state) {
  if (x_f.rank() != 4) throw DimensionError("channel_attention expects (N,H,W,C), got " + to_string(x_f.shape()));
  auto mlp = [&](const Tensor& t) { return state.mlp2(relu(state.mlp1(t))); };
  const Tensor avg = mean(x_f, {1, 2}, true);
  const Tensor mx = max(x_f, {1, 2}, true);
  const Tensor gate = sigmoid(add(mlp(avg), mlp(mx)));
  return {gate, mul(gate, x_f)};
}

std::pair<Tensor, Tensor> spatial_attention(const Tensor& x_c, const CsffState& state) {
  if (x_c.rank() != 4) throw DimensionError("spatial_attention expects (N,H,W,C), got " + to_string(x_c.shape()));
  const Tensor avg = mean(x_c, {3}, true);
  const Tensor mx = max(x_c, {3}, true);
  const Tensor gate = sigmoid(state.spatial(concat({avg, mx}, 3)));
  return {gate, mul(gate, x_c)};
}

Tensor csff_fuse(const Tensor& x_e, const Tensor& x_d, CsffState& state, const ForwardContext& ctx) {
  if (x_e.shape() != x_d.shape()) {
    throw DimensionError("csff: encoder shape " + to_string(x_e.shape()) +
                         " differs from decoder shape " + to_string(x_d.shape()));
  }
  if (x_e.rank() != 4 || x_e.dim(3) != state.cfg.channels) {
    throw DimensionError("csff: expected (N,H,W," + std::to_string(state.cfg.channels) + "), got " +
                         to_string(x_e.shape()));
  }
  const Tensor e = relu(state.bn_e(state.refine_e(x_e), ctx));
  const Tensor d = relu(state.bn_d(state.refine_d(x_d), ctx));
  return relu(state.bn_f(state.fuse(concat({e, d}, 3)), ctx));
}

Tensor csff_forward(const Tensor& x_e, const Tensor& x_d, CsffState& state, const ForwardContext& ctx) {
  Tensor x = csff_fuse(x_e, x_d, state, ctx);
  GateRecord record;
  if (state.cfg.use_channel_attn) {
    auto [gate, gated] = channel_attention(x, state);
    if (ctx.probe) record.channel_gate = gate.detach();
    x = gated;
  }
  if (state.cfg.use_spatial_attn) {
    auto [gate, gated] = spatial_attention(x, state);
    if (ctx.probe) record.spatial_gate = gate.detach();
    x = gated;
  }
  if (ctx.probe) {
    record.layer = ctx.scope;
    ctx.probe->gates.push_back(std::move(record));
  }
  return x;
}

}  // namespace dcaunet
