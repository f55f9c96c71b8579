#pragma once

#include <cstddef>
#include <vector>

#include "dcaunet/tensor.hpp"

// Differentiable kernels. Image tensors are channels-last (N, H, W, C).
namespace dcaunet {

// NumPy-style broadcast of two shapes; throws DimensionError naming both.
Shape broadcast_shapes(const Shape& a, const Shape& b);

// --- elementwise, broadcasting ------------------------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
// Exact (erf) form.
Tensor gelu(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor square(const Tensor& x);
Tensor sqrt(const Tensor& x);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& x) { return neg(x); }
inline Tensor operator*(const Tensor& x, double s) { return scale(x, s); }
inline Tensor operator*(double s, const Tensor& x) { return scale(x, s); }
inline Tensor operator+(const Tensor& x, double s) { return add_scalar(x, s); }
inline Tensor operator-(const Tensor& x, double s) { return add_scalar(x, -s); }

// --- reductions ---------------------------------------------------------------
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum(const Tensor& x, std::vector<int> axes, bool keepdim = false);
Tensor mean(const Tensor& x, std::vector<int> axes, bool keepdim = false);
// Gradient goes to the first maximal element in row-major scan order.
Tensor max(const Tensor& x, std::vector<int> axes, bool keepdim = false);
Tensor dot(const Tensor& a, const Tensor& b);

// --- layout -------------------------------------------------------------------
// Shares storage with the input.
Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes);
// Swaps the two trailing axes.
Tensor transpose(const Tensor& x);
Tensor slice(const Tensor& x, int axis, std::size_t begin, std::size_t end);
Tensor concat(const std::vector<Tensor>& parts, int axis);

// (N,H,W,C*r*r) -> (N,H*r,W*r,C). Input channel (i*r+j)*C+c lands at
// sub-pixel (i,j), channel c.
Tensor pixel_shuffle(const Tensor& x, std::size_t r);
// Inverse of pixel_shuffle: (N,H,W,C) -> (N,H/r,W/r,r*r*C).
Tensor space_to_depth(const Tensor& x, std::size_t r);

// --- linear algebra -----------------------------------------------------------
// a[..., m, k] x b[..., k, n]; leading axes broadcast.
Tensor matmul(const Tensor& a, const Tensor& b);
// x[..., in] * weight[in, out] (+ bias[out]). Bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = {});

Tensor softmax_lastdim(const Tensor& x);
Tensor log_softmax_lastdim(const Tensor& x);

// --- convolution / pooling ----------------------------------------------------
struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
};

// Cross-correlation with zero padding. x: (N,H,W,Cin); weight: (KH,KW,Cin/groups,Cout);
// bias: (Cout) or undefined.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              const Conv2dOptions& opts);

enum class PoolKind { avg, max };

struct Pool2dOptions {
  PoolKind kind = PoolKind::avg;
  std::size_t window = 2;
  std::size_t stride = 0;  // 0 means equal to window
};

// (H - window) must be a multiple of stride in both axes.
Tensor pool2d(const Tensor& x, const Pool2dOptions& opts);

// --- normalization ------------------------------------------------------------
// Over the last axis. gain/bias of shape (C) or undefined.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
// x / sqrt(mean(x^2) + eps) over the last axis, no gain.
Tensor rms_norm(const Tensor& x, double eps = 1e-6);

struct BatchNormOptions {
  double eps = 1e-5;
  double momentum = 0.1;
  bool training = true;
  bool update_running_stats = true;
};

// Per-channel over all leading axes. running_mean/running_var are leaf buffers
// updated in place when training && update_running_stats.
Tensor batch_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, Tensor& running_mean,
                  Tensor& running_var, const BatchNormOptions& opts);

}  // namespace dcaunet
