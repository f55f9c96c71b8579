#include "dcaunet/reference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "dcaunet/errors.hpp"

namespace dcaunet::reference {

std::vector<double> global_token_dca(const std::vector<double>& x, std::size_t n, std::size_t h,
                                     std::size_t w, const DcaConfig& cfg, const DcaState& state) {
  if (cfg.attention != AttentionKind::differential) throw UsageError("reference: differential attention only");
  const std::size_t c = cfg.channels, d = cfg.head_dim, heads = cfg.heads(), hw = h * w;
  if (x.size() != n * hw * c) throw DimensionError("reference: input size mismatch");
  const auto wv = state.w_v.values(), wo = state.w_o.values(), gain = state.rms_gain.values();

  double lam = cfg.lambda_init_value();
  {
    double a = 0, b = 0;
    for (std::size_t i = 0; i < d; ++i) {
      a += state.lambda_q1[i] * state.lambda_k1[i];
      b += state.lambda_q2[i] * state.lambda_k2[i];
    }
    lam += std::exp(a) - std::exp(b);
  }
  const double li = cfg.lambda_init_value();

  std::vector<double> out(x.size());
  for (std::size_t b = 0; b < n; ++b) {
    std::vector<double> token(c, 0.0);
    for (std::size_t p = 0; p < hw; ++p)
      for (std::size_t k = 0; k < c; ++k) token[k] += x[(b * hw + p) * c + k];
    for (auto& t : token) t /= static_cast<double>(hw);

    std::vector<double> cat(c, 0.0);
    for (std::size_t hd = 0; hd < heads; ++hd) {
      std::vector<double> head(2 * d, 0.0);
      for (std::size_t j = 0; j < 2 * d; ++j) {
        double v = 0;
        for (std::size_t k = 0; k < c; ++k) v += token[k] * wv[k * c + hd * 2 * d + j];
        head[j] = (1.0 - lam) * v;
      }
      double ms = 0;
      for (double v : head) ms += v * v;
      ms /= static_cast<double>(2 * d);
      const double inv = 1.0 / std::sqrt(ms + cfg.rms_eps);
      for (std::size_t j = 0; j < 2 * d; ++j)
        cat[hd * 2 * d + j] = head[j] * inv * gain[hd * 2 * d + j] * (1.0 - li);
    }
    std::vector<double> y(c, 0.0);
    for (std::size_t o = 0; o < c; ++o)
      for (std::size_t k = 0; k < c; ++k) y[o] += cat[k] * wo[k * c + o];
    for (std::size_t p = 0; p < hw; ++p)
      std::copy(y.begin(), y.end(), out.begin() + static_cast<std::ptrdiff_t>((b * hw + p) * c));
  }
  return out;
}

double dice(const LabelMask& pred, const LabelMask& ref, std::int32_t class_id) {
  if (pred.height != ref.height || pred.width != ref.width) throw DimensionError("reference dice: shape mismatch");
  double inter = 0, p = 0, r = 0;
  for (std::size_t y = 0; y < pred.height; ++y)
    for (std::size_t x = 0; x < pred.width; ++x) {
      const bool a = pred.at(y, x) == class_id, b = ref.at(y, x) == class_id;
      p += a;
      r += b;
      inter += a && b;
    }
  return p + r == 0 ? 1.0 : 2 * inter / (p + r);
}

namespace {

std::vector<std::pair<long, long>> edge_pixels(const LabelMask& m, std::int32_t cls) {
  std::vector<std::pair<long, long>> out;
  const long h = static_cast<long>(m.height), w = static_cast<long>(m.width);
  auto is = [&](long y, long x) {
    return y >= 0 && x >= 0 && y < h && x < w && m.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) == cls;
  };
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x)
      if (is(y, x) && !(is(y - 1, x) && is(y + 1, x) && is(y, x - 1) && is(y, x + 1))) out.emplace_back(y, x);
  return out;
}

}  // namespace

std::optional<double> hausdorff(const LabelMask& pred, const LabelMask& ref, std::int32_t class_id,
                                double percentile) {
  const auto a = edge_pixels(pred, class_id), b = edge_pixels(ref, class_id);
  if (a.empty() || b.empty()) return std::nullopt;
  std::vector<double> d;
  auto directed = [&](const auto& from, const auto& to) {
    for (auto [y, x] : from) {
      long best = std::numeric_limits<long>::max();
      for (auto [v, u] : to) best = std::min(best, (y - v) * (y - v) + (x - u) * (x - u));
      d.push_back(std::sqrt(static_cast<double>(best)));
    }
  };
  directed(a, b);
  directed(b, a);
  std::sort(d.begin(), d.end());
  double r;
  if (percentile >= 100.0) {
    r = d.back();
  } else {
    const double pos = percentile / 100.0 * static_cast<double>(d.size() - 1);
    const auto lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, d.size() - 1);
    r = d[lo] + (d[hi] - d[lo]) * (pos - static_cast<double>(lo));
  }
  return r * ref.spacing;
}

}  // namespace dcaunet::reference
