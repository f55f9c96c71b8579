#pragma once

#include <cstddef>
#include <string>

#include "dcaunet/dca.hpp"
#include "dcaunet/nn.hpp"

namespace dcaunet {

inline constexpr std::size_t kMlpExpansion = 4;

// z1 = dwconv3x3(z) + z
// z2 = DCA(LN(z1)) + z1
// z  = MLP(LN(z2)) + z2, MLP = Linear(C,4C) -> GELU -> Linear(4C,C)
struct DcaBlockState {
  DcaConfig dca_cfg;
  Conv2d dwconv;
  LayerNorm norm1, norm2;
  DcaState dca;
  Linear fc1, fc2;

  DcaBlockState() = default;
  DcaBlockState(const DcaConfig& cfg, Rng& rng);
  void collect(ParamList& params, const std::string& prefix) const;
  // Zeroes the last projection of every residual branch.
  void zero_residual_branches();
};

Tensor dca_block_forward(const Tensor& z, const DcaBlockState& state,
                         const ForwardContext& ctx = {});

// Non-overlapping 4x4 stride-4 convolution followed by LayerNorm.
struct PatchEmbedState {
  Conv2d proj;
  LayerNorm norm;
  std::size_t patch = 4;

  PatchEmbedState() = default;
  PatchEmbedState(std::size_t in_channels, std::size_t channels, Rng& rng,
                  std::size_t patch = 4);
  void collect(ParamList& params, const std::string& prefix) const;
};

Tensor patch_embed(const Tensor& image, const PatchEmbedState& state);

// 2x2 pixel group -> 4C -> LayerNorm -> Linear(4C, 2C).
struct PatchMergeState {
  LayerNorm norm;
  Linear reduce;

  PatchMergeState() = default;
  PatchMergeState(std::size_t channels, Rng& rng);
  void collect(ParamList& params, const std::string& prefix) const;
};

Tensor patch_merge(const Tensor& x, const PatchMergeState& state);

// Linear(C, factor^2 * C / factor) -> pixel shuffle by `factor` -> LayerNorm.
// factor 2 halves the channels (decoder step); factor 4 keeps them (final
// expansion to input resolution).
struct UpsampleState {
  Linear expand;
  LayerNorm norm;
  std::size_t factor = 2;

  UpsampleState() = default;
  UpsampleState(std::size_t channels, std::size_t out_channels, std::size_t factor, Rng& rng);
  void collect(ParamList& params, const std::string& prefix) const;
};

Tensor upsample(const Tensor& x, const UpsampleState& state);

}  // namespace dcaunet
