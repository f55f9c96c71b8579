#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "dcaunet/blocks.hpp"
#include "dcaunet/csff.hpp"
#include "dcaunet/dca.hpp"

namespace dcaunet {

struct NetworkConfig {
  std::size_t input_size = 224;
  std::size_t in_channels = 1;
  std::size_t num_classes = 9;
  std::size_t base_width = 32;  // C1; stage s has C1 * 2^s channels
  std::vector<std::size_t> stage_depths{2, 2, 2, 2};
  std::size_t decoder_depth = 1;  // DCA blocks after each fusion
  std::size_t head_dim = 16;
  // Pooling window M. A stage whose grid is smaller than M summarizes the
  // whole grid into one token.
  std::size_t window = 7;
  AttentionKind attention = AttentionKind::differential;
  LambdaStrategy lambda = LambdaStrategy::dynamic();
  bool use_channel_attn = true;
  bool use_spatial_attn = true;
  std::uint64_t init_seed = 0;

  std::size_t num_stages() const { return stage_depths.size(); }
  std::size_t stage_width(std::size_t stage) const { return base_width << stage; }
  std::size_t stage_extent(std::size_t stage) const { return (input_size / 4) >> stage; }
  std::size_t stage_window(std::size_t stage) const;
  // Throws GeometryError / ConfigError before anything is allocated.
  void validate() const;
};

struct ModuleCost {
  std::string name;
  std::size_t params = 0;
  std::uint64_t flops = 0;  // multiply-adds
};

struct NetworkSummary {
  std::size_t param_count = 0;
  std::uint64_t flops_per_forward = 0;
  std::uint64_t attention_score_flops = 0;
  std::uint64_t pixelwise_attention_score_flops = 0;
  std::vector<ModuleCost> modules;
};

// U-shaped encoder/decoder: patch embed -> DCA stages with patch merging ->
// upsample + CSFF + DCA block per decoder stage -> 4x expansion -> 1x1 head.
class Network {
 public:
  explicit Network(NetworkConfig cfg);

  const NetworkConfig& config() const { return cfg_; }

  // image: (N,H,W,in_ch) or (H,W,in_ch); returns logits with num_classes
  // channels at the input resolution.
  Tensor forward(const Tensor& image, const ForwardContext& ctx = {});

  // Registry of every trainable parameter and buffer, stable names and order.
  ParamList parameters() const;
  NetworkSummary summarize() const;

  std::size_t dca_block_count() const;
  DcaBlockState& encoder_block(std::size_t stage, std::size_t index);
  CsffState& fusion(std::size_t decoder_stage) { return fusions_.at(decoder_stage); }

 private:
  NetworkConfig cfg_;
  PatchEmbedState embed_;
  std::vector<std::vector<DcaBlockState>> encoder_;
  std::vector<PatchMergeState> merges_;
  std::vector<UpsampleState> ups_;
  std::vector<CsffState> fusions_;
  std::vector<std::vector<DcaBlockState>> decoder_;
  UpsampleState final_expand_;
  Linear head_;
};

}  // namespace dcaunet
