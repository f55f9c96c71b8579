#include <gtest/gtest.h>

#include <set>

#include "dcaunet/errors.hpp"
#include "dcaunet/net.hpp"
#include "support.hpp"

using namespace dcaunet;
using testing_support::random_tensor;

namespace {

NetworkConfig toy(std::size_t size = 64, std::size_t c1 = 8) {
  NetworkConfig c;
  c.input_size = size;
  c.num_classes = 4;
  c.base_width = c1;
  c.stage_depths = {1, 1, 1, 1};
  c.head_dim = 2;
  c.window = 4;
  c.init_seed = 3;
  return c;
}

}  // namespace

TEST(Network, DefaultShapeContract) {
  NetworkConfig c;  // 224 input, 9 classes, M = 7
  c.base_width = 8;
  c.head_dim = 2;
  c.stage_depths = {1, 1, 1, 1};
  Network net(c);
  EXPECT_EQ(net.forward(Tensor::zeros({224, 224, 1})).shape(), (Shape{224, 224, 9}));
}

TEST(Network, SmallInputNeedsDividingWindow) {
  auto c = toy();
  c.window = 7;  // stage grids 16, 8, 4, 2
  EXPECT_THROW(Network{c}, GeometryError);
  c.window = 4;
  Network net(c);
  EXPECT_EQ(net.forward(random_tensor({1, 64, 64, 1}, 1)).shape(), (Shape{1, 64, 64, 4}));
}

TEST(Network, RejectsBadGeometryBeforeAllocation) {
  auto c = toy(28);
  EXPECT_THROW(c.validate(), GeometryError);
  c = toy();
  c.base_width = 6;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Network, EncoderStageGridsHalve) {
  Network net(toy());
  Probe p;
  ForwardContext ctx;
  ctx.probe = &p;
  net.forward(random_tensor({1, 64, 64, 1}, 2), ctx);
  ASSERT_EQ(p.attention.size(), 7u);  // 4 encoder + 3 decoder blocks
  const std::size_t expect_hw[] = {256, 64, 16, 4, 16, 64, 256};
  const std::size_t expect_win[] = {16, 4, 1, 1, 1, 4, 16};
  for (std::size_t i = 0; i < 7; ++i) {
    EXPECT_EQ(p.attention[i].s1.dim(2), expect_hw[i]) << p.attention[i].layer;
    EXPECT_EQ(p.attention[i].s1.dim(3), expect_win[i]) << p.attention[i].layer;
    EXPECT_EQ(p.attention[i].block_index, i + 1);
  }
  EXPECT_EQ(p.gates.size(), 3u);
}

TEST(Network, IdenticalBatchRowsGiveIdenticalLogits) {
  Network net(toy());
  Tensor one = random_tensor({1, 64, 64, 1}, 4);
  auto v = one.to_vector();
  v.insert(v.end(), v.begin(), v.end());
  const auto out = net.forward(Tensor({2, 64, 64, 1}, v));
  const std::size_t half = out.numel() / 2;
  for (std::size_t i = 0; i < half; ++i) ASSERT_EQ(out[i], out[half + i]);
}

TEST(Network, DeterministicForGivenSeed) {
  Network a(toy()), b(toy());
  Tensor x = random_tensor({1, 64, 64, 1}, 5);
  EXPECT_EQ(a.forward(x).to_vector(), b.forward(x).to_vector());
  auto other = toy();
  other.init_seed = 4;
  Network c(other);
  EXPECT_NE(a.forward(x).to_vector(), c.forward(x).to_vector());
}

TEST(Network, RegistryNamesUniqueAndDecayGroupsSane) {
  Network net(toy());
  std::set<std::string> names;
  const ParamList params = net.parameters();
  for (const auto& e : params.entries()) {
    EXPECT_TRUE(names.insert(e.name).second) << e.name;
    if (e.name.find("norm") != std::string::npos || e.name.find("bn_") != std::string::npos) {
      EXPECT_NE(e.kind, ParamKind::weight) << e.name;
    }
    if (e.name.find("running_") != std::string::npos) {
      EXPECT_EQ(e.kind, ParamKind::buffer) << e.name;
    }
  }
}

TEST(Network, OneStageHandCount) {
  NetworkConfig c;
  c.input_size = 16;
  c.in_channels = 1;
  c.num_classes = 3;
  c.base_width = 8;
  c.stage_depths = {1};
  c.head_dim = 2;
  c.window = 2;
  Network net(c);
  const std::size_t C = 8, d = 2, K = 3;
  const std::size_t embed = 4 * 4 * 1 * C + C + 2 * C;
  const std::size_t dca = 4 * C * C + 4 * d + C;  // q, k, v, o projections, λ vectors, RMS gain
  const std::size_t block = (9 * C + C) + 2 * (2 * C) + dca + (C * 4 * C + 4 * C) + (4 * C * C + C);
  const std::size_t expand = C * 16 * C + 2 * C;
  const std::size_t head = C * K + K;
  EXPECT_EQ(net.parameters().trainable_count(), embed + block + expand + head);
  EXPECT_EQ(net.summarize().param_count, embed + block + expand + head);
}

TEST(Network, DoublingWidthRoughlyQuadruplesParameters) {
  NetworkConfig c;
  c.base_width = 32;
  const auto p1 = Network(c).summarize().param_count;
  c.base_width = 64;
  const auto p2 = Network(c).summarize().param_count;
  const double ratio = static_cast<double>(p2) / static_cast<double>(p1);
  EXPECT_GT(ratio, 3.5);
  EXPECT_LT(ratio, 4.1);
}

TEST(Network, SummaryAttentionRatio) {
  NetworkConfig c;
  const auto s = Network(c).summarize();
  EXPECT_EQ(s.pixelwise_attention_score_flops, 49 * s.attention_score_flops);
  EXPECT_GT(s.flops_per_forward, s.attention_score_flops);
  std::size_t sum = 0;
  for (const auto& m : s.modules) sum += m.params;
  EXPECT_EQ(sum, s.param_count);
}

TEST(Network, StandardAttentionVariantBuilds) {
  auto c = toy();
  c.attention = AttentionKind::standard;
  Network net(c);
  for (const auto& e : net.parameters().entries()) EXPECT_EQ(e.name.find("lambda"), std::string::npos) << e.name;
  EXPECT_EQ(net.forward(random_tensor({1, 64, 64, 1}, 6)).shape(), (Shape{1, 64, 64, 4}));
}
