#include <gtest/gtest.h>

#include <cmath>

#include "dcaunet/blocks.hpp"
#include "dcaunet/errors.hpp"
#include "dcaunet/gradcheck.hpp"
#include "support.hpp"

using namespace dcaunet;
using testing_support::max_abs_diff;
using testing_support::random_leaf;
using testing_support::random_tensor;

namespace {

DcaConfig block_cfg(std::size_t c, std::size_t d, std::size_t m) {
  DcaConfig cfg;
  cfg.channels = c;
  cfg.head_dim = d;
  cfg.window = m;
  cfg.block_index = 2;
  return cfg;
}

}  // namespace

TEST(DcaBlock, ZeroedBranchesGiveIdentity) {
  Rng rng(1);
  DcaBlockState st(block_cfg(8, 2, 2), rng);
  st.zero_residual_branches();
  Tensor z = random_tensor({2, 4, 4, 8}, 2);
  EXPECT_EQ(dca_block_forward(z, st).to_vector(), z.to_vector());
}

TEST(DcaBlock, ShapeContract) {
  for (auto [c, d, m, h] : {std::tuple{8u, 2u, 7u, 14u}, {16u, 4u, 2u, 6u}, {12u, 3u, 3u, 9u}}) {
    Rng rng(c);
    DcaBlockState st(block_cfg(c, d, m), rng);
    EXPECT_EQ(st.fc1.out_features(), 4 * c);
    EXPECT_EQ(dca_block_forward(random_tensor({1, h, h, c}, 3), st).shape(), (Shape{1, h, h, c}));
  }
}

TEST(DcaBlock, FullGradientCheck) {
  Rng rng(4);
  DcaBlockState st(block_cfg(8, 2, 7), rng);
  ParamList pl;
  st.collect(pl, "block");
  std::vector<NamedParam> inputs(pl.entries().begin(), pl.entries().end());
  Tensor z = random_leaf({1, 14, 14, 8}, 5);
  inputs.push_back({"z", z, ParamKind::weight});
  // Some key-projection gradients sit near 1e-6, where central differences at
  // h=1e-5 are roundoff dominated (the error grows as h shrinks). Floor 1e-4
  // means an absolute tolerance of 1e-8 for those entries.
  GradCheckOptions opts;
  opts.floor = 1e-4;
  const auto r = check_gradients([&] { return projection_loss(dca_block_forward(z, st), 6); }, inputs, opts);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst_name << "[" << r.worst_index << "] analytic " << r.worst_analytic
                                    << " numeric " << r.worst_numeric;
  EXPECT_GT(r.checked, 1568u);
}

TEST(PatchEmbed, DefaultResolution) {
  Rng rng(7);
  PatchEmbedState st(1, 32, rng);
  EXPECT_EQ(patch_embed(Tensor::zeros({1, 224, 224, 1}), st).shape(), (Shape{1, 56, 56, 32}));
}

TEST(PatchEmbed, ConstantImageGivesConstantGrid) {
  Rng rng(8);
  PatchEmbedState st(2, 8, rng);
  const auto pre = st.proj(Tensor::full({1, 8, 8, 2}, 0.3));
  for (std::size_t p = 1; p < 4; ++p)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(pre[p * 8 + c], pre[c]);
}

TEST(PatchEmbed, UnfoldThenLinearOracle) {
  Rng rng(9);
  const std::size_t cin = 3, c = 8;
  PatchEmbedState st(cin, c, rng);
  for (double& v : st.norm.gain.mutable_values()) v = rng.uniform(0.5, 1.5);
  for (double& v : st.norm.bias.mutable_values()) v = rng.uniform(-0.5, 0.5);
  Tensor img = random_tensor({1, 8, 8, cin}, 10);
  const auto out = patch_embed(img, st);
  ASSERT_EQ(out.shape(), (Shape{1, 2, 2, c}));
  for (std::size_t py = 0; py < 2; ++py)
    for (std::size_t px = 0; px < 2; ++px) {
      std::vector<double> patch;
      for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 4; ++x)
          for (std::size_t ch = 0; ch < cin; ++ch) patch.push_back(img[((py * 4 + y) * 8 + px * 4 + x) * cin + ch]);
      std::vector<double> tok(c);
      for (std::size_t o = 0; o < c; ++o) {
        tok[o] = st.proj.bias[o];
        for (std::size_t k = 0; k < patch.size(); ++k) tok[o] += patch[k] * st.proj.weight[k * c + o];
      }
      double m = 0, v = 0;
      for (double t : tok) m += t / c;
      for (double t : tok) v += (t - m) * (t - m) / c;
      for (std::size_t o = 0; o < c; ++o) {
        const double e = (tok[o] - m) / std::sqrt(v + st.norm.eps) * st.norm.gain[o] + st.norm.bias[o];
        EXPECT_NEAR(out[(py * 2 + px) * c + o], e, 1e-12);
      }
    }
}

TEST(PatchEmbed, RejectsIndivisibleInput) {
  Rng rng(10);
  PatchEmbedState st(1, 8, rng);
  EXPECT_THROW(patch_embed(Tensor::zeros({1, 10, 10, 1}), st), GeometryError);
}

TEST(PatchMerge, HalvesGridDoublesWidth) {
  Rng rng(11);
  PatchMergeState m(8, rng);
  UpsampleState up(16, 8, 2, rng);
  Tensor x = random_tensor({1, 56, 56, 8}, 12);
  const auto merged = patch_merge(x, m);
  EXPECT_EQ(merged.shape(), (Shape{1, 28, 28, 16}));
  EXPECT_EQ(upsample(merged, up).shape(), x.shape());
}

TEST(Upsample, FinalExpansionKeepsWidth) {
  Rng rng(13);
  UpsampleState up(8, 8, 4, rng);
  EXPECT_EQ(upsample(random_tensor({2, 3, 3, 8}, 14), up).shape(), (Shape{2, 12, 12, 8}));
}

TEST(Blocks, MergeAndUpsampleGradients) {
  Rng rng(15);
  PatchMergeState m(4, rng);
  UpsampleState up(8, 4, 2, rng);
  ParamList pl;
  m.collect(pl, "merge");
  up.collect(pl, "up");
  std::vector<NamedParam> inputs(pl.entries().begin(), pl.entries().end());
  Tensor x = random_leaf({1, 4, 4, 4}, 16);
  inputs.push_back({"x", x, ParamKind::weight});
  const auto r = check_gradients([&] { return projection_loss(upsample(patch_merge(x, m), up), 17); }, inputs);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst_name;
}
