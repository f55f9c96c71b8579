#pragma once

// Helpers and naive oracles shared by the unit tests. Everything here is
// written with plain loops and independent of the library kernels.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dcaunet/random.hpp"
#include "dcaunet/tensor.hpp"

namespace testing_support {

using dcaunet::Shape;
using dcaunet::Tensor;

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double scale = 1.0) {
  dcaunet::Rng rng(seed);
  Tensor t(std::move(shape));
  for (double& v : t.mutable_values()) v = rng.uniform(-scale, scale);
  return t;
}

inline Tensor random_leaf(Shape shape, std::uint64_t seed, double scale = 1.0) {
  Tensor t = random_tensor(std::move(shape), seed, scale);
  t.set_requires_grad(true);
  return t;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// NHWC cross-correlation with zero padding. w is (KH, KW, Cin/groups, Cout).
inline std::vector<double> naive_conv2d(const std::vector<double>& x, std::size_t n, std::size_t h,
                                        std::size_t w, std::size_t cin, const std::vector<double>& wt,
                                        std::size_t kh, std::size_t kw, std::size_t cout,
                                        const std::vector<double>& bias, std::size_t stride,
                                        std::size_t pad, std::size_t groups, std::size_t& oh,
                                        std::size_t& ow) {
  oh = (h + 2 * pad - kh) / stride + 1;
  ow = (w + 2 * pad - kw) / stride + 1;
  const std::size_t cpg_in = cin / groups, cpg_out = cout / groups;
  std::vector<double> out(n * oh * ow * cout, 0.0);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox)
        for (std::size_t co = 0; co < cout; ++co) {
          const std::size_t g = co / cpg_out;
          double acc = bias.empty() ? 0.0 : bias[co];
          for (std::size_t ky = 0; ky < kh; ++ky)
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
              const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
              for (std::size_t ci = 0; ci < cpg_in; ++ci) {
                const double xv = x[((b * h + iy) * w + ix) * cin + g * cpg_in + ci];
                const double wv = wt[((ky * kw + kx) * cpg_in + ci) * cout + co];
                acc += xv * wv;
              }
            }
          out[((b * oh + oy) * ow + ox) * cout + co] = acc;
        }
  return out;
}

inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("dcaunet_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testing_support
