#include "dcaunet/dca.hpp"

#include <algorithm>
#include <cmath>

#include "dcaunet/errors.hpp"

namespace dcaunet {

double lambda_init(std::int64_t block_index) {
  if (block_index < 1) {
    throw UsageError("lambda_init: block index must be >= 1, got " + std::to_string(block_index));
  }
  // 0.2 - 0.6 expm1(.) equals 0.8 - 0.6 exp(.) but is exact at l = 1; the clamp
  // keeps the value strictly below 0.8 once exp underflows.
  const double v = 0.2 - 0.6 * std::expm1(-0.3 * static_cast<double>(block_index - 1));
  return std::min(v, std::nextafter(0.8, 0.0));
}

double DcaConfig::lambda_init_value() const {
  if (lambda.kind == LambdaStrategy::Kind::fixed) return lambda.value;
  return lambda_init(static_cast<std::int64_t>(block_index));
}

void DcaConfig::validate() const {
  if (channels == 0 || head_dim == 0 || window == 0) {
    throw ConfigError("dca: channels, head_dim and window must be positive");
  }
  if (channels % (2 * head_dim) != 0) {
    throw ConfigError("dca: channels " + std::to_string(channels) +
                      " not divisible by 2*head_dim = " + std::to_string(2 * head_dim));
  }
  if (block_index < 1) throw ConfigError("dca: block_index must be >= 1");
  if (rms_eps <= 0.0) throw ConfigError("dca: rms_eps must be positive");
}

DcaState::DcaState(const DcaConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t c = cfg.channels, d = cfg.head_dim, h = cfg.heads();
  const std::size_t qk_width = cfg.attention == AttentionKind::differential ? h * 2 * d : h * d;
  w_q = parameter(truncated_normal_tensor({c, qk_width}, 0.02, rng));
  w_k = parameter(truncated_normal_tensor({c, qk_width}, 0.02, rng));
  w_v = parameter(truncated_normal_tensor({c, h * 2 * d}, 0.02, rng));
  w_o = parameter(truncated_normal_tensor({c, c}, 0.02, rng));
  if (cfg.attention == AttentionKind::differential) {
    lambda_q1 = parameter(normal_tensor({d}, 0.1, rng));
    lambda_k1 = parameter(normal_tensor({d}, 0.1, rng));
    lambda_q2 = parameter(normal_tensor({d}, 0.1, rng));
    lambda_k2 = parameter(normal_tensor({d}, 0.1, rng));
    rms_gain = parameter(Tensor::ones({h, 2 * d}));
  }
}

void DcaState::collect(ParamList& params, const std::string& prefix) const {
  params.add(prefix + ".w_q", w_q, ParamKind::weight);
  params.add(prefix + ".w_k", w_k, ParamKind::weight);
  params.add(prefix + ".w_v", w_v, ParamKind::weight);
  params.add(prefix + ".w_o", w_o, ParamKind::weight);
  // The λ vectors parameterize a scalar gate; decaying them would pull λ
  // toward λ_init.
  params.add(prefix + ".lambda_q1", lambda_q1, ParamKind::norm);
  params.add(prefix + ".lambda_k1", lambda_k1, ParamKind::norm);
  params.add(prefix + ".lambda_q2", lambda_q2, ParamKind::norm);
  params.add(prefix + ".lambda_k2", lambda_k2, ParamKind::norm);
  params.add(prefix + ".rms_gain", rms_gain, ParamKind::norm);
}

Tensor summarize_windows(const Tensor& x, std::size_t window) {
  if (x.rank() != 4) throw DimensionError("summarize_windows expects (N,H,W,C), got " + to_string(x.shape()));
  const auto& s = x.shape();
  if (window == 0 || s[1] % window != 0 || s[2] % window != 0) {
    throw GeometryError("window size M=" + std::to_string(window) + " does not divide H=" +
                        std::to_string(s[1]) + ", W=" + std::to_string(s[2]));
  }
  Pool2dOptions o;
  o.kind = PoolKind::avg;
  o.window = window;
  auto pooled = pool2d(x, o);
  const std::size_t n_win = (s[1] / window) * (s[2] / window);
  return reshape(pooled, {s[0], n_win, s[3]});
}

Tensor lambda_value(const DcaConfig& cfg, const DcaState& state) {
  if (!state.lambda_q1.defined()) throw UsageError("lambda_value: state has no lambda vectors");
  auto a = exp(dot(state.lambda_q1, state.lambda_k1));
  auto b = exp(dot(state.lambda_q2, state.lambda_k2));
  return add_scalar(sub(a, b), cfg.lambda_init_value());
}

namespace {

// (B, T, h*w) -> (B, h, T, w)
Tensor split_heads(const Tensor& t, std::size_t heads) {
  const auto& s = t.shape();
  return permute(reshape(t, {s[0], s[1], heads, s[2] / heads}), {0, 2, 1, 3});
}

// (B, h, T, w) -> (B, T, h*w)
Tensor merge_heads(const Tensor& t) {
  const auto& s = t.shape();
  return reshape(permute(t, {0, 2, 1, 3}), {s[0], s[2], s[1] * s[3]});
}

}  // namespace

Tensor dca_forward(const Tensor& x, const DcaConfig& cfg, const DcaState& state,
                   const ForwardContext& ctx) {
  cfg.validate();
  const bool unbatched = x.rank() == 3;
  if (!unbatched && x.rank() != 4) {
    throw DimensionError("dca_forward expects (N,H,W,C) or (H,W,C), got " + to_string(x.shape()));
  }
  const Tensor x4 = unbatched ? reshape(x, {1, x.dim(0), x.dim(1), x.dim(2)}) : x;
  const std::size_t b = x4.dim(0), h = x4.dim(1), w = x4.dim(2), c = x4.dim(3);
  if (c != cfg.channels) {
    throw DimensionError("dca_forward: input has " + std::to_string(c) + " channels, config " +
                         std::to_string(cfg.channels));
  }
  const std::size_t heads = cfg.heads(), d = cfg.head_dim, n = h * w;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

  const Tensor queries = reshape(x4, {b, n, c});
  const Tensor summary = summarize_windows(x4, cfg.window);

  const Tensor q = split_heads(linear(queries, state.w_q), heads);
  const Tensor k = split_heads(linear(summary, state.w_k), heads);
  const Tensor v = split_heads(linear(summary, state.w_v), heads);

  Tensor heads_out;
  AttentionRecord record;
  if (cfg.attention == AttentionKind::differential) {
    const Tensor q1 = slice(q, 3, 0, d), q2 = slice(q, 3, d, 2 * d);
    const Tensor k1 = slice(k, 3, 0, d), k2 = slice(k, 3, d, 2 * d);
    const Tensor s1 = softmax_lastdim(scale(matmul(q1, transpose(k1)), inv_sqrt_d));
    const Tensor s2 = softmax_lastdim(scale(matmul(q2, transpose(k2)), inv_sqrt_d));
    const Tensor lam = lambda_value(cfg, state);
    const Tensor diff = sub(s1, mul(lam, s2));
    const Tensor head = matmul(diff, v);
    const Tensor gain = reshape(state.rms_gain, {1, heads, 1, 2 * d});
    heads_out = scale(mul(rms_norm(head, cfg.rms_eps), gain), 1.0 - cfg.lambda_init_value());
    if (ctx.probe) {
      record.lambda = lam.item();
      record.s1 = s1.detach();
      record.s2 = s2.detach();
      record.diff = diff.detach();
    }
  } else {
    const Tensor s = softmax_lastdim(scale(matmul(q, transpose(k)), inv_sqrt_d));
    heads_out = matmul(s, v);
    if (ctx.probe) record.s1 = s.detach();
  }
  if (ctx.probe) {
    record.layer = ctx.scope;
    record.block_index = cfg.block_index;
    ctx.probe->attention.push_back(std::move(record));
  }
  const Tensor out = linear(merge_heads(heads_out), state.w_o);
  return unbatched ? reshape(out, {h, w, c}) : reshape(out, {b, h, w, c});
}

AttentionFlops dca_attention_flops(const DcaConfig& cfg, std::size_t height, std::size_t width) {
  cfg.validate();
  if (height % cfg.window != 0 || width % cfg.window != 0) {
    throw GeometryError("window size M=" + std::to_string(cfg.window) + " does not divide H=" +
                        std::to_string(height) + ", W=" + std::to_string(width));
  }
  const std::uint64_t n = static_cast<std::uint64_t>(height) * width;
  const std::uint64_t n_win = n / (static_cast<std::uint64_t>(cfg.window) * cfg.window);
  const std::uint64_t heads = cfg.heads(), d = cfg.head_dim;
  const std::uint64_t maps = cfg.attention == AttentionKind::differential ? 2 : 1;
  AttentionFlops f;
  f.score_flops = heads * maps * n * n_win * d;
  f.value_flops = heads * n * n_win * 2 * d;
  f.pixelwise_score_flops = heads * maps * n * n * d;
  f.pixelwise_value_flops = heads * n * n * 2 * d;
  f.ratio_vs_pixelwise =
      static_cast<double>(f.pixelwise_score_flops) / static_cast<double>(f.score_flops);
  return f;
}

}  // namespace dcaunet
