#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include "dcaunet/nn.hpp"

namespace dcaunet {

enum class AttentionKind { standard, differential };

struct LambdaStrategy {
  enum class Kind { fixed, dynamic };
  Kind kind = Kind::dynamic;
  double value = 0.0;  // used when kind == fixed

  static LambdaStrategy dynamic() { return {}; }
  static LambdaStrategy fixed(double v) { return {Kind::fixed, v}; }
};

// λ_init(l) = 0.8 - 0.6 exp(-0.3 (l - 1)); throws UsageError for l < 1.
double lambda_init(std::int64_t block_index);

struct DcaConfig {
  std::size_t channels = 32;
  std::size_t head_dim = 16;  // d; each head is 2d wide
  std::size_t window = 7;     // M
  std::size_t block_index = 1;
  AttentionKind attention = AttentionKind::differential;
  LambdaStrategy lambda = LambdaStrategy::dynamic();
  double rms_eps = 1e-6;

  // h = C / (2d)
  std::size_t heads() const { return channels / (2 * head_dim); }
  double lambda_init_value() const;
  // Throws ConfigError on C not divisible by 2d or zero extents.
  void validate() const;
};

struct DcaState {
  // Packed per-head projections; head i owns columns [2d*i, 2d*(i+1)) of the
  // differential variant, [d*i, d*(i+1)) of standard query/key.
  Tensor w_q, w_k, w_v, w_o;
  Tensor lambda_q1, lambda_k1, lambda_q2, lambda_k2;  // (d), one set per layer
  Tensor rms_gain;                                     // (h, 2d)

  DcaState() = default;
  DcaState(const DcaConfig& cfg, Rng& rng);
  void collect(ParamList& params, const std::string& prefix) const;
};

// (N,H,W,C) -> (N, HW/M^2, C), mean of each non-overlapping M x M window in
// row-major window order.
Tensor summarize_windows(const Tensor& x, std::size_t window);

// λ = exp(λq1·λk1) - exp(λq2·λk2) + λ_init, as a differentiable (1)-tensor.
Tensor lambda_value(const DcaConfig& cfg, const DcaState& state);

// Cross attention between pixel queries and window-summary keys/values.
// x: (N,H,W,C) or (H,W,C); returns the same shape.
Tensor dca_forward(const Tensor& x, const DcaConfig& cfg, const DcaState& state,
                   const ForwardContext& ctx = {});

struct AttentionFlops {
  std::uint64_t score_flops = 0;             // QK^T multiply-adds, all heads
  std::uint64_t value_flops = 0;             // SV multiply-adds, all heads
  std::uint64_t pixelwise_score_flops = 0;   // same with N keys instead of N_win
  std::uint64_t pixelwise_value_flops = 0;
  double ratio_vs_pixelwise = 1.0;           // pixelwise / windowed score cost
};

AttentionFlops dca_attention_flops(const DcaConfig& cfg, std::size_t height, std::size_t width);

}  // namespace dcaunet
