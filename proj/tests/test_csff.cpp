#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dcaunet/csff.hpp"
#include "dcaunet/errors.hpp"
#include "dcaunet/gradcheck.hpp"
#include "support.hpp"

using namespace dcaunet;
using testing_support::max_abs_diff;
using testing_support::random_leaf;
using testing_support::random_tensor;
using testing_support::sigmoid;

namespace {

CsffState make_state(std::size_t c, std::uint64_t seed, bool ca = true, bool sa = true) {
  CsffConfig cfg;
  cfg.channels = c;
  cfg.use_channel_attn = ca;
  cfg.use_spatial_attn = sa;
  Rng rng(seed);
  return CsffState(cfg, rng);
}

void zero(Tensor& t) {
  for (double& v : t.mutable_values()) v = 0.0;
}

}  // namespace

TEST(Csff, ZeroedGatesHalveTwice) {
  auto st = make_state(8, 1);
  zero(st.mlp1.weight);
  zero(st.mlp2.weight);
  zero(st.spatial.weight);
  Tensor xe = random_tensor({1, 4, 4, 8}, 2), xd = random_tensor({1, 4, 4, 8}, 3);
  const auto fused = csff_fuse(xe, xd, st, {});
  const auto out = csff_forward(xe, xd, st, {});
  for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_NEAR(out[i], 0.25 * fused[i], 1e-15);
}

TEST(Csff, SpatiallyConstantInputGivesUniformSpatialGate) {
  auto st = make_state(8, 4);
  Tensor x = Tensor::zeros({1, 5, 5, 8});
  for (std::size_t p = 0; p < 25; ++p)
    for (std::size_t c = 0; c < 8; ++c) x.mutable_values()[p * 8 + c] = 0.1 * c - 0.3;
  // zero padding makes the border differ; the interior must be uniform
  const auto [gate, out] = spatial_attention(x, st);
  for (std::size_t y = 1; y < 4; ++y)
    for (std::size_t xx = 1; xx < 4; ++xx) EXPECT_NEAR(gate[y * 5 + xx], gate[6], 1e-15);
}

TEST(Csff, IdenticalChannelsGiveEqualChannelGate) {
  auto st = make_state(8, 5);
  Tensor x({1, 3, 3, 8});
  Rng rng(6);
  for (std::size_t p = 0; p < 9; ++p) {
    const double v = rng.uniform(-1, 1);
    for (std::size_t c = 0; c < 8; ++c) x.mutable_values()[p * 8 + c] = v;
  }
  // an MLP acting on an all-equal vector still mixes rows; equal outputs need
  // permutation-symmetric weights, so make every row of fc1 identical
  for (std::size_t r = 1; r < 8; ++r)
    for (std::size_t o = 0; o < 2; ++o) st.mlp1.weight.mutable_values()[r * 2 + o] = st.mlp1.weight[o];
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t c = 1; c < 8; ++c) st.mlp2.weight.mutable_values()[h * 8 + c] = st.mlp2.weight[h * 8];
  const auto gate = channel_attention(x, st).first;
  for (std::size_t c = 1; c < 8; ++c) EXPECT_DOUBLE_EQ(gate[c], gate[0]);
}

TEST(Csff, GatesStrictlyInsideUnitInterval) {
  auto st = make_state(8, 7);
  Probe p;
  ForwardContext ctx;
  ctx.probe = &p;
  csff_forward(random_tensor({2, 4, 4, 8}, 8, 5.0), random_tensor({2, 4, 4, 8}, 9, 5.0), st, ctx);
  ASSERT_EQ(p.gates.size(), 1u);
  for (const Tensor* g : {&p.gates[0].channel_gate, &p.gates[0].spatial_gate}) {
    ASSERT_TRUE(g->defined());
    for (double v : g->values()) {
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
  }
  EXPECT_EQ(p.gates[0].channel_gate.shape(), (Shape{2, 1, 1, 8}));
  EXPECT_EQ(p.gates[0].spatial_gate.shape(), (Shape{2, 4, 4, 1}));
}

TEST(Csff, ChannelAttentionHandExample) {
  // 2x2x4, hidden width 1
  auto st = make_state(4, 10);
  Tensor x = random_tensor({1, 2, 2, 4}, 11);
  std::vector<double> avg(4, 0.0), mx(4, -INFINITY);
  for (std::size_t p = 0; p < 4; ++p)
    for (std::size_t c = 0; c < 4; ++c) {
      avg[c] += x[p * 4 + c] / 4;
      mx[c] = std::max(mx[c], x[p * 4 + c]);
    }
  auto mlp = [&](const std::vector<double>& v) {
    double hid = 0;
    for (std::size_t c = 0; c < 4; ++c) hid += v[c] * st.mlp1.weight[c];
    hid = std::max(hid, 0.0);
    std::vector<double> o(4);
    for (std::size_t c = 0; c < 4; ++c) o[c] = hid * st.mlp2.weight[c];
    return o;
  };
  const auto a = mlp(avg), m = mlp(mx);
  const auto [gate, out] = channel_attention(x, st);
  for (std::size_t c = 0; c < 4; ++c) {
    const double g = sigmoid(a[c] + m[c]);
    EXPECT_NEAR(gate[c], g, 1e-15);
    for (std::size_t p = 0; p < 4; ++p) EXPECT_NEAR(out[p * 4 + c], g * x[p * 4 + c], 1e-15);
  }
}

TEST(Csff, SpatialAttentionPerPixelOracle) {
  auto st = make_state(4, 12);
  Tensor x = random_tensor({1, 4, 4, 3}, 13);  // the spatial gate is width-agnostic
  std::vector<double> pooled(16 * 2);
  for (std::size_t p = 0; p < 16; ++p) {
    double s = 0, m = -INFINITY;
    for (std::size_t c = 0; c < 3; ++c) {
      s += x[p * 3 + c];
      m = std::max(m, x[p * 3 + c]);
    }
    pooled[p * 2] = s / 3;
    pooled[p * 2 + 1] = m;
  }
  const auto [gate, out] = spatial_attention(x, st);
  for (int y = 0; y < 4; ++y)
    for (int xx = 0; xx < 4; ++xx) {
      double acc = 0;
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          const int iy = y + ky - 1, ix = xx + kx - 1;
          if (iy < 0 || ix < 0 || iy >= 4 || ix >= 4) continue;
          for (int ch = 0; ch < 2; ++ch) acc += pooled[(iy * 4 + ix) * 2 + ch] * st.spatial.weight[(ky * 3 + kx) * 2 + ch];
        }
      EXPECT_NEAR(gate[y * 4 + xx], sigmoid(acc), 1e-15);
    }
}

TEST(Csff, ChannelConstantInputPoolsAgree) {
  Tensor x({1, 2, 2, 5});
  for (std::size_t p = 0; p < 4; ++p)
    for (std::size_t c = 0; c < 5; ++c) x.mutable_values()[p * 5 + c] = 0.5 * p;
  EXPECT_EQ(mean(x, {3}, true).to_vector(), max(x, {3}, true).to_vector());
}

TEST(Csff, GatedOutputNeverExceedsFusedMagnitude) {
  auto st = make_state(8, 14);
  Tensor xe = random_tensor({1, 4, 4, 8}, 15, 3.0), xd = random_tensor({1, 4, 4, 8}, 16, 3.0);
  const auto f = csff_fuse(xe, xd, st, {}), o = csff_forward(xe, xd, st, {});
  for (std::size_t i = 0; i < o.numel(); ++i) EXPECT_LE(std::abs(o[i]), std::abs(f[i]));
}

TEST(Csff, AblationsSkipGates) {
  Tensor xe = random_tensor({1, 4, 4, 8}, 17), xd = random_tensor({1, 4, 4, 8}, 18);
  auto plain = make_state(8, 19, false, false);
  EXPECT_EQ(csff_forward(xe, xd, plain, {}).to_vector(), csff_fuse(xe, xd, plain, {}).to_vector());
  ParamList pl;
  plain.collect(pl, "f");
  for (const auto& e : pl.entries()) {
    EXPECT_EQ(e.name.find("channel_mlp"), std::string::npos);
    EXPECT_EQ(e.name.find("spatial_conv"), std::string::npos);
  }
  auto no_sa = make_state(8, 19, true, false), no_ca = make_state(8, 19, false, true);
  const auto f = csff_fuse(xe, xd, no_sa, {});
  EXPECT_EQ(csff_forward(xe, xd, no_sa, {}).to_vector(), channel_attention(f, no_sa).second.to_vector());
  EXPECT_EQ(csff_forward(xe, xd, no_ca, {}).to_vector(), spatial_attention(f, no_ca).second.to_vector());
}

TEST(Csff, ChannelPermutationEquivariance) {
  const std::size_t C = 8;
  auto a = make_state(C, 20), b = make_state(C, 20);
  std::vector<std::size_t> perm(C);
  std::iota(perm.begin(), perm.end(), 0);
  std::reverse(perm.begin(), perm.end());
  std::swap(perm[1], perm[5]);
  // out channel j of the permuted model is channel perm[j] of the original
  auto conv_perm = [&](const Tensor& src, Tensor& dst, std::size_t cin_blocks) {
    const std::size_t k = src.dim(0) * src.dim(1), cin = src.dim(2), cout = src.dim(3);
    for (std::size_t t = 0; t < k; ++t)
      for (std::size_t i = 0; i < cin; ++i)
        for (std::size_t o = 0; o < cout; ++o) {
          const std::size_t blk = i / C, si = cin_blocks ? blk * C + perm[i % C] : i;
          dst.mutable_values()[(t * cin + i) * cout + o] = src[(t * cin + si) * cout + perm[o]];
        }
  };
  conv_perm(a.refine_e.weight, b.refine_e.weight, 1);
  conv_perm(a.refine_d.weight, b.refine_d.weight, 1);
  conv_perm(a.fuse.weight, b.fuse.weight, 2);
  for (auto [sa, sb] : {std::pair{&a.bn_e, &b.bn_e}, {&a.bn_d, &b.bn_d}, {&a.bn_f, &b.bn_f}}) {
    for (std::size_t j = 0; j < C; ++j) {
      sa->gain.mutable_values()[j] = 0.5 + 0.1 * j;
      sa->bias.mutable_values()[j] = 0.05 * j - 0.2;
    }
    for (std::size_t j = 0; j < C; ++j) {
      sb->gain.mutable_values()[j] = sa->gain[perm[j]];
      sb->bias.mutable_values()[j] = sa->bias[perm[j]];
    }
  }
  const std::size_t hid = C / 4;
  for (std::size_t j = 0; j < C; ++j)
    for (std::size_t h = 0; h < hid; ++h) {
      b.mlp1.weight.mutable_values()[j * hid + h] = a.mlp1.weight[perm[j] * hid + h];
      b.mlp2.weight.mutable_values()[h * C + j] = a.mlp2.weight[h * C + perm[j]];
    }
  Tensor xe = random_tensor({2, 4, 4, C}, 21), xd = random_tensor({2, 4, 4, C}, 22);
  auto permute_channels = [&](const Tensor& t) {
    Tensor r(t.shape());
    for (std::size_t p = 0; p < t.numel() / C; ++p)
      for (std::size_t j = 0; j < C; ++j) r.mutable_values()[p * C + j] = t[p * C + perm[j]];
    return r;
  };
  ForwardContext ctx;
  ctx.mode = Mode::train;
  const auto oa = csff_forward(xe, xd, a, ctx);
  const auto ob = csff_forward(permute_channels(xe), permute_channels(xd), b, ctx);
  EXPECT_LT(max_abs_diff(ob.to_vector(), permute_channels(oa).to_vector()), 1e-12);
}

TEST(Csff, FullGradientCheck) {
  auto st = make_state(8, 23);
  ParamList pl;
  st.collect(pl, "csff");
  std::vector<NamedParam> inputs;
  for (const auto& e : pl.entries())
    if (e.kind != ParamKind::buffer) inputs.push_back(e);
  Tensor xe = random_leaf({1, 8, 8, 8}, 24), xd = random_leaf({1, 8, 8, 8}, 25);
  inputs.push_back({"x_e", xe, ParamKind::weight});
  inputs.push_back({"x_d", xd, ParamKind::weight});
  ForwardContext ctx;  // eval mode: BN uses fixed running statistics
  const auto r = check_gradients([&] { return projection_loss(csff_forward(xe, xd, st, ctx), 26); }, inputs);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst_name << "[" << r.worst_index << "]";
}

TEST(Csff, RejectsMismatchedInputs) {
  auto st = make_state(8, 27);
  EXPECT_THROW(csff_forward(Tensor::zeros({1, 4, 4, 8}), Tensor::zeros({1, 2, 2, 8}), st), DimensionError);
  CsffConfig bad;
  bad.channels = 6;
  EXPECT_THROW(bad.validate(), ConfigError);
}
