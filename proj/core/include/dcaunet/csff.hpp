#pragma once

#include <cstddef>
#include <string>
#include <utility>

#include "dcaunet/nn.hpp"

namespace dcaunet {

inline constexpr std::size_t kChannelReduction = 4;

struct CsffConfig {
  std::size_t channels = 32;
  bool use_channel_attn = true;
  bool use_spatial_attn = true;
  void validate() const;
};

// Channel-spatial fusion of an encoder skip X_e and an upsampled decoder map
// X_d of equal shape:
//   X~e = ReLU(BN(conv3x3(X_e))), X~d = ReLU(BN(conv3x3(X_d)))
//   X_f = ReLU(BN(conv3x3(concat(X~e, X~d))))                   2C -> C
//   M_c = sigmoid(MLP(avgpool_hw X_f) + MLP(maxpool_hw X_f)),  X_c = M_c * X_f
//   M_s = sigmoid(conv3x3([mean_c X_c, max_c X_c])),           X_o = M_s * X_c
struct CsffState {
  CsffConfig cfg;
  Conv2d refine_e, refine_d, fuse;
  BatchNorm bn_e, bn_d, bn_f;
  Linear mlp1, mlp2;  // C -> C/4 -> C, bias-free, shared by both pools
  Conv2d spatial;     // 3x3, 2 -> 1, bias-free

  CsffState() = default;
  CsffState(const CsffConfig& cfg, Rng& rng);
  void collect(ParamList& params, const std::string& prefix) const;
};

// Returns (M_c of shape (N,1,1,C), M_c * x_f).
std::pair<Tensor, Tensor> channel_attention(const Tensor& x_f, const CsffState& state);
// Returns (M_s of shape (N,H,W,1), M_s * x_c).
std::pair<Tensor, Tensor> spatial_attention(const Tensor& x_c, const CsffState& state);

// Refinement and concat fusion, without the attention gates.
Tensor csff_fuse(const Tensor& x_e, const Tensor& x_d, CsffState& state, const ForwardContext& ctx);

Tensor csff_forward(const Tensor& x_e, const Tensor& x_d, CsffState& state,
                    const ForwardContext& ctx = {});

}  // namespace dcaunet
