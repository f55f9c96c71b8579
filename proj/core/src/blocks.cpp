#include "dcaunet/blocks.hpp"

#include <algorithm>

#include "dcaunet/errors.hpp"

namespace dcaunet {

namespace {

Conv2dOptions depthwise_opts(std::size_t channels) {
  Conv2dOptions o;
  o.padding = 1;
  o.groups = channels;
  return o;
}

void zero_fill(Tensor& t) {
  if (!t.defined()) return;
  auto v = t.mutable_values();
  std::fill(v.begin(), v.end(), 0.0);
}

}  // namespace

DcaBlockState::DcaBlockState(const DcaConfig& cfg, Rng& rng)
    : dca_cfg(cfg),
      dwconv(cfg.channels, cfg.channels, 3, depthwise_opts(cfg.channels), true, rng),
      norm1(cfg.channels),
      norm2(cfg.channels),
      dca(cfg, rng),
      fc1(cfg.channels, kMlpExpansion * cfg.channels, true, rng),
      fc2(kMlpExpansion * cfg.channels, cfg.channels, true, rng) {}

void DcaBlockState::collect(ParamList& params, const std::string& prefix) const {
  dwconv.collect(params, prefix + ".dwconv");
  norm1.collect(params, prefix + ".norm1");
  dca.collect(params, prefix + ".dca");
  norm2.collect(params, prefix + ".norm2");
  fc1.collect(params, prefix + ".mlp.fc1");
  fc2.collect(params, prefix + ".mlp.fc2");
}

void DcaBlockState::zero_residual_branches() {
  zero_fill(dwconv.weight);
  zero_fill(dwconv.bias);
  zero_fill(dca.w_o);
  zero_fill(fc2.weight);
  zero_fill(fc2.bias);
}

Tensor dca_block_forward(const Tensor& z, const DcaBlockState& state, const ForwardContext& ctx) {
  const Tensor z1 = add(state.dwconv(z), z);
  const Tensor z2 = add(dca_forward(state.norm1(z1), state.dca_cfg, state.dca, ctx.child("dca")), z1);
  const Tensor hidden = gelu(state.fc1(state.norm2(z2)));
  return add(state.fc2(hidden), z2);
}

PatchEmbedState::PatchEmbedState(std::size_t in_channels, std::size_t channels, Rng& rng,
                                 std::size_t p)
    : proj(in_channels, channels, p, Conv2dOptions{p, 0, 1}, true, rng), norm(channels), patch(p) {}

void PatchEmbedState::collect(ParamList& params, const std::string& prefix) const {
  proj.collect(params, prefix + ".proj");
  norm.collect(params, prefix + ".norm");
}

Tensor patch_embed(const Tensor& image, const PatchEmbedState& state) {
  if (image.rank() != 4) throw DimensionError("patch_embed expects (N,H,W,C), got " + to_string(image.shape()));
  if (image.dim(1) % state.patch != 0 || image.dim(2) % state.patch != 0) {
    throw GeometryError("patch_embed: input " + std::to_string(image.dim(1)) + "x" +
                        std::to_string(image.dim(2)) + " not divisible by patch size " +
                        std::to_string(state.patch));
  }
  return state.norm(state.proj(image));
}

PatchMergeState::PatchMergeState(std::size_t channels, Rng& rng)
    : norm(4 * channels), reduce(4 * channels, 2 * channels, false, rng) {}

void PatchMergeState::collect(ParamList& params, const std::string& prefix) const {
  norm.collect(params, prefix + ".norm");
  reduce.collect(params, prefix + ".reduce");
}

Tensor patch_merge(const Tensor& x, const PatchMergeState& state) {
  if (x.rank() != 4 || x.dim(1) % 2 != 0 || x.dim(2) % 2 != 0) {
    throw GeometryError("patch_merge needs even spatial extents, got " + to_string(x.shape()));
  }
  return state.reduce(state.norm(space_to_depth(x, 2)));
}

UpsampleState::UpsampleState(std::size_t channels, std::size_t out_channels, std::size_t f,
                             Rng& rng)
    : expand(channels, f * f * out_channels, false, rng), norm(out_channels), factor(f) {}

void UpsampleState::collect(ParamList& params, const std::string& prefix) const {
  expand.collect(params, prefix + ".expand");
  norm.collect(params, prefix + ".norm");
}

Tensor upsample(const Tensor& x, const UpsampleState& state) {
  if (x.rank() != 4) throw DimensionError("upsample expects (N,H,W,C), got " + to_string(x.shape()));
  return state.norm(pixel_shuffle(state.expand(x), state.factor));
}

}  // namespace dcaunet
