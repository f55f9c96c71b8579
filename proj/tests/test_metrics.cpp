#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "dcaunet/errors.hpp"
#include "dcaunet/metrics.hpp"
#include "dcaunet/random.hpp"

using namespace dcaunet;

namespace {

LabelMask square(std::size_t h, std::size_t w, std::size_t y0, std::size_t x0, std::size_t side, int cls = 1) {
  LabelMask m(h, w);
  for (std::size_t y = y0; y < y0 + side; ++y)
    for (std::size_t x = x0; x < x0 + side; ++x) m.at(y, x) = cls;
  return m;
}

// Test-side brute force: boundary by explicit 4-neighbour scan, all pairs.
std::vector<std::pair<int, int>> border(const LabelMask& m, int cls) {
  std::vector<std::pair<int, int>> b;
  const int h = static_cast<int>(m.height), w = static_cast<int>(m.width);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (m.at(y, x) != cls) continue;
      const int dy[] = {-1, 1, 0, 0}, dx[] = {0, 0, -1, 1};
      for (int k = 0; k < 4; ++k) {
        const int ny = y + dy[k], nx = x + dx[k];
        if (ny < 0 || nx < 0 || ny >= h || nx >= w || m.at(ny, nx) != cls) {
          b.emplace_back(y, x);
          break;
        }
      }
    }
  return b;
}

double brute_hd(const LabelMask& p, const LabelMask& r, int cls, double pct) {
  const auto bp = border(p, cls), br = border(r, cls);
  std::vector<double> all;
  auto directed = [&](const auto& from, const auto& to) {
    for (auto [y, x] : from) {
      double best = INFINITY;
      for (auto [v, u] : to) best = std::min(best, std::hypot(double(y - v), double(x - u)));
      all.push_back(best);
    }
  };
  directed(bp, br);
  directed(br, bp);
  std::sort(all.begin(), all.end());
  const double pos = pct / 100.0 * static_cast<double>(all.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, all.size() - 1);
  return all[lo] + (pos - static_cast<double>(lo)) * (all[hi] - all[lo]);
}

LabelMask random_mask(Rng& rng, std::size_t h, std::size_t w, int k) {
  LabelMask m(h, w);
  const double density = rng.uniform(0.05, 0.6);
  for (auto& v : m.labels) v = rng.bernoulli(density) ? static_cast<int>(rng.uniform_int(1, k - 1)) : 0;
  return m;
}

}  // namespace

TEST(Dice, IdenticalAndDisjoint) {
  const auto a = square(8, 8, 1, 1, 3), b = square(8, 8, 5, 5, 3);
  EXPECT_EQ(dice(a, a, 1), 1.0);
  EXPECT_EQ(dice(a, b, 1), 0.0);
  EXPECT_EQ(dice(LabelMask(4, 4), LabelMask(4, 4), 1), 1.0);  // both empty
}

TEST(Dice, TwoByTwoShiftedOnePixel) {
  EXPECT_EQ(dice(square(6, 6, 2, 2, 2), square(6, 6, 2, 3, 2), 1), 0.5);
}

TEST(Dice, SymmetricAndBounded) {
  Rng rng(1);
  for (int t = 0; t < 50; ++t) {
    const auto a = random_mask(rng, 12, 9, 3), b = random_mask(rng, 12, 9, 3);
    const double d = dice(a, b, 1);
    EXPECT_EQ(d, dice(b, a, 1));
    EXPECT_GE(d, 0.0);
    EXPECT_LE(d, 1.0);
  }
}

TEST(Hausdorff, IdenticalIsZero) {
  const auto a = square(10, 10, 2, 3, 4);
  EXPECT_EQ(*hausdorff(a, a, 1, {100}), 0.0);
  EXPECT_EQ(*hausdorff(a, a, 1, {95}), 0.0);
}

TEST(Hausdorff, ThreeFourShift) {
  LabelMask p(10, 10), r(10, 10);
  p.at(1, 1) = 1;
  r.at(4, 5) = 1;
  EXPECT_EQ(*hausdorff(p, r, 1, {100}), 5.0);
  EXPECT_EQ(*hausdorff(p, r, 1, {95}), 5.0);
}

TEST(Hausdorff, NestedSquares) {
  // outer 6x6 ring of class 1 vs a centred 2x2 block of class 1
  const auto outer = square(10, 10, 2, 2, 6), inner = square(10, 10, 4, 4, 2);
  const double expect = brute_hd(outer, inner, 1, 100);
  EXPECT_NEAR(expect, std::hypot(2.0, 2.0), 1e-15);  // corner (2,2) to (4,4)
  EXPECT_EQ(*hausdorff(outer, inner, 1, {100}), expect);
}

TEST(Hausdorff, MissingClassIsNullopt) {
  EXPECT_FALSE(hausdorff(square(6, 6, 1, 1, 2), LabelMask(6, 6), 1).has_value());
}

TEST(Hausdorff, SpacingScalesDistance) {
  LabelMask p(10, 10), r(10, 10);
  p.at(1, 1) = 1;
  r.at(4, 5) = 1;
  r.spacing = p.spacing = 0.5;
  EXPECT_EQ(*hausdorff(p, r, 1, {100}), 2.5);
}

TEST(Hausdorff, MatchesBruteForceOnRandomMasks) {
  Rng rng(2);
  for (int t = 0; t < 200; ++t) {
    const std::size_t h = rng.uniform_int(1, 32), w = rng.uniform_int(1, 32);
    const auto a = random_mask(rng, h, w, 3), b = random_mask(rng, h, w, 3);
    for (int cls : {1, 2}) {
      if (!a.contains(cls) || !b.contains(cls)) {
        EXPECT_FALSE(hausdorff(a, b, cls).has_value());
        continue;
      }
      for (double pct : {100.0, 95.0}) {
        EXPECT_EQ(*hausdorff(a, b, cls, {pct}), brute_hd(a, b, cls, pct)) << h << "x" << w << " pct " << pct;
      }
      EXPECT_EQ(*hausdorff(a, b, cls, {100}), *hausdorff(b, a, cls, {100}));
      EXPECT_GE(*hausdorff(a, b, cls), 0.0);
    }
  }
}

TEST(DistanceTransform, MatchesBruteForce) {
  Rng rng(3);
  const std::size_t h = 13, w = 17;
  std::vector<bool> seeds(h * w);
  for (std::size_t i = 0; i < seeds.size(); ++i) seeds[i] = rng.bernoulli(0.08);
  seeds[5] = true;
  const auto dt = squared_distance_transform(seeds, h, w);
  for (std::size_t i = 0; i < h * w; ++i) {
    double best = INFINITY;
    for (std::size_t j = 0; j < h * w; ++j)
      if (seeds[j]) {
        const double dy = double(i / w) - double(j / w), dx = double(i % w) - double(j % w);
        best = std::min(best, dy * dy + dx * dx);
      }
    EXPECT_EQ(dt[i], best);
  }
}

TEST(Boundary, RingOfSquare) {
  const auto b = boundary_pixels(square(5, 5, 1, 1, 3), 1);
  EXPECT_EQ(b.size(), 8u);  // 3x3 square minus its centre
  EXPECT_EQ(boundary_pixels(square(2, 2, 0, 0, 2), 1).size(), 4u);  // image edge counts as outside
}

TEST(Report, PerfectPredictionsTable) {
  std::vector<LabelMask> refs{square(8, 8, 1, 1, 3), square(8, 8, 2, 2, 4, 2)};
  refs[0].at(6, 6) = 2;
  const auto rep = evaluate_masks(refs, refs, 3);
  EXPECT_EQ(rep.mean_dsc, 1.0);
  EXPECT_EQ(rep.mean_hd, 0.0);
  EXPECT_EQ(rep.classes.size(), 2u);
  EXPECT_EQ(rep.classes[0].dsc_cases, 1u);  // class 1 only in the first case
  EXPECT_EQ(rep.classes[1].dsc_cases, 2u);
  const auto tsv = report_to_tsv(rep);
  EXPECT_NE(tsv.find("mean\t100.00\t0.00"), std::string::npos) << tsv;
  EXPECT_NE(report_to_json(rep, R"({"seed":7})").find("\"seed\": 7"), std::string::npos);
}

TEST(Report, MissingPredictionCounted) {
  const auto ref = square(8, 8, 1, 1, 3);
  const auto rep = evaluate_masks({LabelMask(8, 8)}, {ref}, 2);
  EXPECT_EQ(rep.classes[0].dsc, 0.0);
  EXPECT_EQ(rep.classes[0].hd_cases, 0u);
  EXPECT_EQ(rep.classes[0].hd_missing, 1u);
}

TEST(LabelMaskTest, ValidateRejectsOutOfRange) {
  auto m = square(4, 4, 0, 0, 2, 3);
  EXPECT_NO_THROW(m.validate(4));
  EXPECT_THROW(m.validate(3), ConfigError);
}
