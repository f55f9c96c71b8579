#include "dcaunet/net.hpp"

#include <algorithm>
#include <cmath>

#include "dcaunet/errors.hpp"

namespace dcaunet {

std::size_t NetworkConfig::stage_window(std::size_t stage) const {
  return std::min(window, stage_extent(stage));
}

void NetworkConfig::validate() const {
  const std::size_t stages = num_stages();
  if (stages == 0) throw ConfigError("network: at least one stage is required");
  if (in_channels == 0) throw ConfigError("network: in_channels must be positive");
  if (num_classes < 2) throw ConfigError("network: num_classes must be >= 2");
  if (base_width == 0 || head_dim == 0 || window == 0) {
    throw ConfigError("network: base_width, head_dim and window must be positive");
  }
  const std::size_t reduction = std::size_t{4} << (stages - 1);
  if (input_size == 0 || input_size % reduction != 0) {
    throw GeometryError("network: input size " + std::to_string(input_size) +
                        " must be divisible by " + std::to_string(reduction) + " for " +
                        std::to_string(stages) + " stages");
  }
  for (std::size_t s = 0; s < stages; ++s) {
    if (stage_depths[s] == 0) throw ConfigError("network: stage depths must be positive");
    const std::size_t c = stage_width(s);
    if (c % (2 * head_dim) != 0) {
      throw ConfigError("network: stage " + std::to_string(s + 1) + " width " + std::to_string(c) +
                        " not divisible by 2*head_dim = " + std::to_string(2 * head_dim));
    }
    if (c % kChannelReduction != 0) {
      throw ConfigError("network: stage " + std::to_string(s + 1) + " width " + std::to_string(c) +
                        " not divisible by the channel reduction " +
                        std::to_string(kChannelReduction));
    }
    const std::size_t extent = stage_extent(s), m = stage_window(s);
    if (extent % m != 0) {
      throw GeometryError("network: window M=" + std::to_string(window) + " does not divide stage " +
                          std::to_string(s + 1) + " grid " + std::to_string(extent) + "x" +
                          std::to_string(extent));
    }
  }
  if (lambda.kind == LambdaStrategy::Kind::fixed && !std::isfinite(lambda.value)) {
    throw ConfigError("network: fixed lambda must be finite");
  }
}

namespace {

const NetworkConfig& checked(const NetworkConfig& c) {
  c.validate();
  return c;
}

DcaConfig block_config(const NetworkConfig& cfg, std::size_t stage, std::size_t index) {
  DcaConfig d;
  d.channels = cfg.stage_width(stage);
  d.head_dim = cfg.head_dim;
  d.window = cfg.stage_window(stage);
  d.block_index = index;
  d.attention = cfg.attention;
  d.lambda = cfg.lambda;
  return d;
}

std::size_t count_params(const auto& module) {
  ParamList p;
  module.collect(p, "m");
  return p.trainable_count();
}

std::uint64_t u64(std::size_t v) { return static_cast<std::uint64_t>(v); }

std::uint64_t conv_flops(std::size_t out_pixels, std::size_t k, std::size_t cin_per_group,
                         std::size_t cout) {
  return u64(out_pixels) * k * k * cin_per_group * cout;
}

std::uint64_t block_flops(const DcaConfig& d, std::size_t extent, NetworkSummary& summary) {
  const std::size_t n = extent * extent, c = d.channels;
  const std::size_t n_win = n / (d.window * d.window);
  const std::size_t qk_w = d.attention == AttentionKind::differential ? c : d.heads() * d.head_dim;
  const auto att = dca_attention_flops(d, extent, extent);
  summary.attention_score_flops += att.score_flops;
  summary.pixelwise_attention_score_flops += att.pixelwise_score_flops;
  std::uint64_t f = conv_flops(n, 3, 1, c);                  // depthwise
  f += u64(n) * c * qk_w + u64(n_win) * c * (qk_w + c);      // Q, K, V projections
  f += att.score_flops + att.value_flops;
  f += u64(n) * c * c;                                       // W_O
  f += 2 * u64(n) * c * kMlpExpansion * c;                   // MLP
  return f;
}

}  // namespace

Network::Network(NetworkConfig cfg) : cfg_(checked(cfg)) {
  Rng rng(derive_seed(cfg_.init_seed, 0x6e6574));
  const std::size_t stages = cfg_.num_stages();
  embed_ = PatchEmbedState(cfg_.in_channels, cfg_.base_width, rng);
  std::size_t block_index = 1;
  for (std::size_t s = 0; s < stages; ++s) {
    if (s > 0) merges_.emplace_back(cfg_.stage_width(s - 1), rng);
    auto& blocks = encoder_.emplace_back();
    for (std::size_t b = 0; b < cfg_.stage_depths[s]; ++b)
      blocks.emplace_back(block_config(cfg_, s, block_index++), rng);
  }
  for (std::size_t j = 0; j + 1 < stages; ++j) {
    const std::size_t s = stages - 2 - j;
    ups_.emplace_back(cfg_.stage_width(s + 1), cfg_.stage_width(s), 2, rng);
    CsffConfig cc;
    cc.channels = cfg_.stage_width(s);
    cc.use_channel_attn = cfg_.use_channel_attn;
    cc.use_spatial_attn = cfg_.use_spatial_attn;
    fusions_.emplace_back(cc, rng);
    auto& blocks = decoder_.emplace_back();
    for (std::size_t b = 0; b < cfg_.decoder_depth; ++b)
      blocks.emplace_back(block_config(cfg_, s, block_index++), rng);
  }
  final_expand_ = UpsampleState(cfg_.base_width, cfg_.base_width, 4, rng);
  head_ = Linear(cfg_.base_width, cfg_.num_classes, true, rng);
}

std::size_t Network::dca_block_count() const {
  std::size_t n = 0;
  for (const auto& s : encoder_) n += s.size();
  for (const auto& s : decoder_) n += s.size();
  return n;
}

DcaBlockState& Network::encoder_block(std::size_t stage, std::size_t index) {
  return encoder_.at(stage).at(index);
}

Tensor Network::forward(const Tensor& image, const ForwardContext& ctx) {
  const bool unbatched = image.rank() == 3;
  if (!unbatched && image.rank() != 4) {
    throw DimensionError("network expects (N,H,W,C) or (H,W,C) input, got " + to_string(image.shape()));
  }
  const Tensor x0 = unbatched ? reshape(image, {1, image.dim(0), image.dim(1), image.dim(2)}) : image;
  if (x0.dim(1) != cfg_.input_size || x0.dim(2) != cfg_.input_size || x0.dim(3) != cfg_.in_channels) {
    throw DimensionError("network configured for " + std::to_string(cfg_.input_size) + "x" +
                         std::to_string(cfg_.input_size) + "x" + std::to_string(cfg_.in_channels) +
                         " input, got " + to_string(image.shape()));
  }
  const std::size_t stages = cfg_.num_stages();
  std::vector<Tensor> skips;
  Tensor x = patch_embed(x0, embed_);
  for (std::size_t s = 0; s < stages; ++s) {
    if (s > 0) x = patch_merge(x, merges_[s - 1]);
    for (std::size_t b = 0; b < encoder_[s].size(); ++b) {
      x = dca_block_forward(x, encoder_[s][b],
                            ctx.child("encoder" + std::to_string(s) + ".block" + std::to_string(b)));
    }
    skips.push_back(x);
  }
  for (std::size_t j = 0; j + 1 < stages; ++j) {
    const std::size_t s = stages - 2 - j;
    const std::string scope = "decoder" + std::to_string(j);
    x = upsample(x, ups_[j]);
    x = csff_forward(skips[s], x, fusions_[j], ctx.child(scope + ".csff"));
    for (std::size_t b = 0; b < decoder_[j].size(); ++b)
      x = dca_block_forward(x, decoder_[j][b], ctx.child(scope + ".block" + std::to_string(b)));
  }
  const Tensor logits = head_(upsample(x, final_expand_));
  if (!unbatched) return logits;
  return reshape(logits, {cfg_.input_size, cfg_.input_size, cfg_.num_classes});
}

ParamList Network::parameters() const {
  ParamList p;
  embed_.collect(p, "embed");
  for (std::size_t s = 0; s < encoder_.size(); ++s) {
    if (s > 0) merges_[s - 1].collect(p, "merge" + std::to_string(s - 1));
    for (std::size_t b = 0; b < encoder_[s].size(); ++b)
      encoder_[s][b].collect(p, "encoder" + std::to_string(s) + ".block" + std::to_string(b));
  }
  for (std::size_t j = 0; j < decoder_.size(); ++j) {
    const std::string scope = "decoder" + std::to_string(j);
    ups_[j].collect(p, scope + ".up");
    fusions_[j].collect(p, scope + ".csff");
    for (std::size_t b = 0; b < decoder_[j].size(); ++b)
      decoder_[j][b].collect(p, scope + ".block" + std::to_string(b));
  }
  final_expand_.collect(p, "final_expand");
  head_.collect(p, "head");
  return p;
}

NetworkSummary Network::summarize() const {
  NetworkSummary sum;
  auto add_row = [&](std::string name, std::size_t params, std::uint64_t flops) {
    sum.param_count += params;
    sum.flops_per_forward += flops;
    sum.modules.push_back({std::move(name), params, flops});
  };
  const std::size_t stages = cfg_.num_stages();
  const std::size_t e0 = cfg_.stage_extent(0), c0 = cfg_.base_width;
  add_row("embed", count_params(embed_), conv_flops(e0 * e0, 4, cfg_.in_channels, c0));
  for (std::size_t s = 0; s < stages; ++s) {
    const std::size_t e = cfg_.stage_extent(s), c = cfg_.stage_width(s);
    if (s > 0) {
      add_row("merge" + std::to_string(s - 1), count_params(merges_[s - 1]),
              u64(e * e) * (2 * c) * c);  // (4 C_prev) -> (2 C_prev), C_prev = c/2
    }
    for (std::size_t b = 0; b < encoder_[s].size(); ++b) {
      add_row("encoder" + std::to_string(s) + ".block" + std::to_string(b),
              count_params(encoder_[s][b]), block_flops(encoder_[s][b].dca_cfg, e, sum));
    }
  }
  for (std::size_t j = 0; j + 1 < stages; ++j) {
    const std::size_t s = stages - 2 - j;
    const std::size_t e = cfg_.stage_extent(s), c = cfg_.stage_width(s);
    const std::string scope = "decoder" + std::to_string(j);
    const std::size_t e_in = cfg_.stage_extent(s + 1);
    add_row(scope + ".up", count_params(ups_[j]), u64(e_in * e_in) * (2 * c) * (2 * c));
    std::uint64_t cf = 2 * conv_flops(e * e, 3, c, c) + conv_flops(e * e, 3, 2 * c, c);
    if (cfg_.use_channel_attn) cf += 2 * (2 * u64(c) * (c / kChannelReduction));
    if (cfg_.use_spatial_attn) cf += conv_flops(e * e, 3, 2, 1);
    add_row(scope + ".csff", count_params(fusions_[j]), cf);
    for (std::size_t b = 0; b < decoder_[j].size(); ++b) {
      add_row(scope + ".block" + std::to_string(b), count_params(decoder_[j][b]),
              block_flops(decoder_[j][b].dca_cfg, e, sum));
    }
  }
  add_row("final_expand", count_params(final_expand_), u64(e0 * e0) * c0 * (16 * c0));
  const std::size_t full = cfg_.input_size * cfg_.input_size;
  add_row("head", count_params(head_), u64(full) * c0 * cfg_.num_classes);
  return sum;
}

}  // namespace dcaunet
