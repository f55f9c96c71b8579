#include "dcaunet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>

#include "dcaunet/errors.hpp"

namespace dcaunet {

using detail::Node;
using Offsets = std::shared_ptr<const std::vector<std::size_t>>;

namespace {

// Gradient buffer of input i, or an empty span if it does not need one.
std::span<double> grad_of(Node& n, std::size_t i) {
  if (i >= n.inputs.size() || !n.inputs[i] || !n.inputs[i]->requires_grad) return {};
  return n.inputs[i]->grad_buffer();
}

const std::vector<double>& value_of(Node& n, std::size_t i) { return *n.inputs[i]->value; }

std::size_t normalize_axis(int axis, std::size_t rank, const char* op) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for rank " + std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

// offsets[k] = flat index into `in` of output element k when `in` is
// broadcast (right-aligned) to `out`.
std::vector<std::size_t> broadcast_offsets(const Shape& in, const Shape& out) {
  const std::size_t r = out.size();
  std::vector<std::size_t> st(r, 0);
  const auto ins = strides_of(in);
  const std::size_t lead = r - in.size();
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (in[i] != 1) st[lead + i] = ins[i];
  }
  std::vector<std::size_t> res(numel(out));
  std::vector<std::size_t> idx(r, 0);
  std::size_t cur = 0;
  for (std::size_t k = 0; k < res.size(); ++k) {
    res[k] = cur;
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      cur += st[d];
      if (idx[d] < out[d]) break;
      cur -= st[d] * out[d];
      idx[d] = 0;
    }
  }
  return res;
}

template <class F, class GA, class GB>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, F f, GA ga, GB gb) {
  const Shape out_shape = broadcast_shapes(a.shape(), b.shape());
  const std::size_t n = numel(out_shape);
  Offsets oa, ob;
  if (a.shape() != out_shape)
    oa = std::make_shared<const std::vector<std::size_t>>(broadcast_offsets(a.shape(), out_shape));
  if (b.shape() != out_shape)
    ob = std::make_shared<const std::vector<std::size_t>>(broadcast_offsets(b.shape(), out_shape));
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = f(av[oa ? (*oa)[i] : i], bv[ob ? (*ob)[i] : i]);
  }
  return detail::make_result(op, out_shape, std::move(out), {a, b}, [oa, ob, ga, gb](Node& self) {
    const auto& x = value_of(self, 0);
    const auto& y = value_of(self, 1);
    auto gx = grad_of(self, 0);
    auto gy = grad_of(self, 1);
    const auto& g = self.grad;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const std::size_t ia = oa ? (*oa)[i] : i;
      const std::size_t ib = ob ? (*ob)[i] : i;
      if (!gx.empty()) gx[ia] += ga(x[ia], y[ib], g[i]);
      if (!gy.empty()) gy[ib] += gb(x[ia], y[ib], g[i]);
    }
  });
}

// df(x, y) is dy/dx given input x and output y.
template <class F, class DF>
Tensor unary(const char* op, const Tensor& x, F f, DF df) {
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return detail::make_result(op, x.shape(), std::move(out), {x}, [df](Node& self) {
    const auto& xs = value_of(self, 0);
    const auto& ys = *self.value;
    auto gx = grad_of(self, 0);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * df(xs[i], ys[i]);
  });
}

struct ReducePlan {
  Shape kept;     // reduced axes set to 1
  Shape squeezed; // reduced axes removed (at least {1})
  std::size_t count = 1;
};

ReducePlan plan_reduce(const Shape& in, std::vector<int> axes, const char* op) {
  ReducePlan p;
  p.kept = in;
  std::vector<bool> reduce(in.size(), false);
  if (axes.empty()) std::fill(reduce.begin(), reduce.end(), true);
  for (int a : axes) reduce[normalize_axis(a, in.size(), op)] = true;
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (reduce[i]) {
      p.count *= in[i];
      p.kept[i] = 1;
    } else {
      p.squeezed.push_back(in[i]);
    }
  }
  if (p.squeezed.empty()) p.squeezed.push_back(1);
  return p;
}

void matmul_kernel(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                   std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// da[m,k] += dc[m,n] * b[k,n]^T
void matmul_grad_a(const double* dc, const double* b, double* da, std::size_t m, std::size_t k,
                   std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* g = dc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += g[j] * brow[j];
      da[i * k + p] += acc;
    }
  }
}

// db[k,n] += a[m,k]^T * dc[m,n]
void matmul_grad_b(const double* a, const double* dc, double* db, std::size_t m, std::size_t k,
                   std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* g = dc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      double* drow = db + p * n;
      for (std::size_t j = 0; j < n; ++j) drow[j] += av * g[j];
    }
  }
}

}  // namespace

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t ea = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t eb = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      throw DimensionError("shapes " + to_string(a) + " and " + to_string(b) +
                           " are not broadcastable");
    }
    out[i] = std::max(ea, eb);
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double g) { return g; }, [](double, double, double g) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double g) { return g; }, [](double, double, double g) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y, double g) { return g * y; },
      [](double x, double, double g) { return g * x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y, double g) { return g / y; },
      [](double x, double y, double g) { return -g * x / (y * y); });
}

Tensor neg(const Tensor& x) {
  return unary(
      "neg", x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}

Tensor scale(const Tensor& x, double s) {
  return unary(
      "scale", x, [s](double v) { return v * s; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& x, double s) {
  return unary(
      "add_scalar", x, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& x) {
  return unary(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      "sigmoid", x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor gelu(const Tensor& x) {
  return unary(
      "gelu", x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0)); },
      [](double v, double) {
        const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
        const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * std::numbers::pi);
        return cdf + v * pdf;
      });
}

Tensor exp(const Tensor& x) {
  return unary(
      "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(
      "log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor square(const Tensor& x) {
  return unary(
      "square", x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor sqrt(const Tensor& x) {
  return unary(
      "sqrt", x, [](double v) { return std::sqrt(v); },
      [](double, double y) { return 0.5 / y; });
}

Tensor sum(const Tensor& x) {
  const auto xv = x.values();
  double acc = 0.0;
  for (double v : xv) acc += v;
  return detail::make_result("sum", Shape{1}, {acc}, {x}, [](Node& self) {
    auto gx = grad_of(self, 0);
    const double g = self.grad[0];
    for (auto& v : gx) v += g;
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor sum(const Tensor& x, std::vector<int> axes, bool keepdim) {
  auto plan = plan_reduce(x.shape(), std::move(axes), "sum");
  auto off = std::make_shared<const std::vector<std::size_t>>(broadcast_offsets(plan.kept, x.shape()));
  const auto xv = x.values();
  std::vector<double> out(numel(plan.kept), 0.0);
  for (std::size_t i = 0; i < xv.size(); ++i) out[(*off)[i]] += xv[i];
  return detail::make_result("sum_axes", keepdim ? plan.kept : plan.squeezed, std::move(out), {x},
                             [off](Node& self) {
                               auto gx = grad_of(self, 0);
                               for (std::size_t i = 0; i < gx.size(); ++i)
                                 gx[i] += self.grad[(*off)[i]];
                             });
}

Tensor mean(const Tensor& x, std::vector<int> axes, bool keepdim) {
  auto plan = plan_reduce(x.shape(), axes, "mean");
  return scale(sum(x, std::move(axes), keepdim), 1.0 / static_cast<double>(plan.count));
}

Tensor max(const Tensor& x, std::vector<int> axes, bool keepdim) {
  auto plan = plan_reduce(x.shape(), std::move(axes), "max");
  const auto off = broadcast_offsets(plan.kept, x.shape());
  const auto xv = x.values();
  const std::size_t n_out = numel(plan.kept);
  std::vector<double> out(n_out, -std::numeric_limits<double>::infinity());
  auto arg = std::make_shared<std::vector<std::size_t>>(n_out, 0);
  std::vector<bool> seen(n_out, false);
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const std::size_t o = off[i];
    if (!seen[o] || xv[i] > out[o]) {
      seen[o] = true;
      out[o] = xv[i];
      (*arg)[o] = i;
    }
  }
  return detail::make_result("max", keepdim ? plan.kept : plan.squeezed, std::move(out), {x},
                             [arg](Node& self) {
                               auto gx = grad_of(self, 0);
                               if (gx.empty()) return;
                               for (std::size_t o = 0; o < arg->size(); ++o)
                                 gx[(*arg)[o]] += self.grad[o];
                             });
}

Tensor dot(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("dot: shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) +
                         " differ");
  }
  return sum(mul(a, b));
}

Tensor reshape(const Tensor& x, Shape shape) {
  return detail::make_view("reshape", std::move(shape), x, [](Node& self) {
    auto gx = grad_of(self, 0);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
  });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  const Shape& in = x.shape();
  if (axes.size() != in.size()) {
    throw DimensionError("permute: " + std::to_string(axes.size()) + " axes for shape " +
                         to_string(in));
  }
  std::vector<bool> used(in.size(), false);
  Shape out_shape(in.size());
  for (std::size_t j = 0; j < axes.size(); ++j) {
    if (axes[j] >= in.size() || used[axes[j]]) throw DimensionError("permute: invalid axis order");
    used[axes[j]] = true;
    out_shape[j] = in[axes[j]];
  }
  const auto ins = strides_of(in);
  std::vector<std::size_t> st(in.size());
  for (std::size_t j = 0; j < axes.size(); ++j) st[j] = ins[axes[j]];
  const std::size_t n = numel(in);
  auto off = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> idx(in.size(), 0);
  std::size_t cur = 0;
  for (std::size_t k = 0; k < n; ++k) {
    (*off)[k] = cur;
    for (std::size_t d = in.size(); d-- > 0;) {
      ++idx[d];
      cur += st[d];
      if (idx[d] < out_shape[d]) break;
      cur -= st[d] * out_shape[d];
      idx[d] = 0;
    }
  }
  const auto xv = x.values();
  std::vector<double> out(n);
  for (std::size_t k = 0; k < n; ++k) out[k] = xv[(*off)[k]];
  return detail::make_result("permute", out_shape, std::move(out), {x}, [off](Node& self) {
    auto gx = grad_of(self, 0);
    for (std::size_t k = 0; k < self.grad.size(); ++k) gx[(*off)[k]] += self.grad[k];
  });
}

Tensor transpose(const Tensor& x) {
  const std::size_t r = x.rank();
  if (r < 2) throw DimensionError("transpose: rank " + std::to_string(r) + " < 2");
  std::vector<std::size_t> axes(r);
  for (std::size_t i = 0; i < r; ++i) axes[i] = i;
  std::swap(axes[r - 1], axes[r - 2]);
  return permute(x, axes);
}

Tensor slice(const Tensor& x, int axis, std::size_t begin, std::size_t end) {
  const auto& in = x.shape();
  const std::size_t a = normalize_axis(axis, in.size(), "slice");
  if (begin >= end || end > in[a]) {
    throw DimensionError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") invalid for extent " + std::to_string(in[a]));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < a; ++i) outer *= in[i];
  for (std::size_t i = a + 1; i < in.size(); ++i) inner *= in[i];
  const std::size_t len = end - begin, ext = in[a];
  Shape out_shape = in;
  out_shape[a] = len;
  const auto xv = x.values();
  std::vector<double> out(outer * len * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((o * ext + begin) * inner), len * inner,
                out.begin() + static_cast<std::ptrdiff_t>(o * len * inner));
  }
  return detail::make_result("slice", out_shape, std::move(out), {x},
                             [outer, inner, len, ext, begin](Node& self) {
                               auto gx = grad_of(self, 0);
                               for (std::size_t o = 0; o < outer; ++o) {
                                 const double* g = self.grad.data() + o * len * inner;
                                 double* d = gx.data() + (o * ext + begin) * inner;
                                 for (std::size_t i = 0; i < len * inner; ++i) d[i] += g[i];
                               }
                             });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& first = parts.front().shape();
  const std::size_t a = normalize_axis(axis, first.size(), "concat");
  std::vector<std::size_t> lens;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == a || s[i] == first[i];
    if (!ok) {
      throw DimensionError("concat: shape " + to_string(s) + " incompatible with " +
                           to_string(first) + " along axis " + std::to_string(a));
    }
    lens.push_back(s[a]);
    total += s[a];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < a; ++i) outer *= first[i];
  for (std::size_t i = a + 1; i < first.size(); ++i) inner *= first[i];
  Shape out_shape = first;
  out_shape[a] = total;
  std::vector<double> out(outer * total * inner);
  std::size_t start = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto pv = parts[p].values();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * lens[p] * inner), lens[p] * inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * total + start) * inner));
    }
    start += lens[p];
  }
  return detail::make_result("concat", out_shape, std::move(out), parts,
                             [lens, outer, inner, total](Node& self) {
                               std::size_t start = 0;
                               for (std::size_t p = 0; p < lens.size(); ++p) {
                                 auto gp = grad_of(self, p);
                                 if (!gp.empty()) {
                                   for (std::size_t o = 0; o < outer; ++o) {
                                     const double* g =
                                         self.grad.data() + (o * total + start) * inner;
                                     double* d = gp.data() + o * lens[p] * inner;
                                     for (std::size_t i = 0; i < lens[p] * inner; ++i) d[i] += g[i];
                                   }
                                 }
                                 start += lens[p];
                               }
                             });
}

Tensor pixel_shuffle(const Tensor& x, std::size_t r) {
  if (x.rank() != 4) throw DimensionError("pixel_shuffle expects (N,H,W,C), got " + to_string(x.shape()));
  const auto& s = x.shape();
  if (r == 0 || s[3] % (r * r) != 0) {
    throw GeometryError("pixel_shuffle: channels " + std::to_string(s[3]) +
                        " not divisible by r^2 = " + std::to_string(r * r));
  }
  const std::size_t c = s[3] / (r * r);
  auto t = reshape(x, {s[0], s[1], s[2], r, r, c});
  t = permute(t, {0, 1, 3, 2, 4, 5});
  return reshape(t, {s[0], s[1] * r, s[2] * r, c});
}

Tensor space_to_depth(const Tensor& x, std::size_t r) {
  if (x.rank() != 4) throw DimensionError("space_to_depth expects (N,H,W,C), got " + to_string(x.shape()));
  const auto& s = x.shape();
  if (r == 0 || s[1] % r != 0 || s[2] % r != 0) {
    throw GeometryError("space_to_depth: extents " + std::to_string(s[1]) + "x" +
                        std::to_string(s[2]) + " not divisible by " + std::to_string(r));
  }
  auto t = reshape(x, {s[0], s[1] / r, r, s[2] / r, r, s[3]});
  t = permute(t, {0, 1, 3, 2, 4, 5});
  return reshape(t, {s[0], s[1] / r, s[2] / r, r * r * s[3]});
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() < 2 || bs.size() < 2 || as[as.size() - 1] != bs[bs.size() - 2]) {
    throw DimensionError("matmul: incompatible shapes " + to_string(as) + " and " + to_string(bs));
  }
  const std::size_t m = as[as.size() - 2], k = as.back(), n = bs.back();
  const Shape ba(as.begin(), as.end() - 2), bb(bs.begin(), bs.end() - 2);
  Shape bo;
  try {
    bo = broadcast_shapes(ba, bb);
  } catch (const DimensionError&) {
    throw DimensionError("matmul: batch extents of " + to_string(as) + " and " + to_string(bs) +
                         " are not broadcastable");
  }
  const std::size_t batches = numel(bo);
  auto oa = std::make_shared<const std::vector<std::size_t>>(broadcast_offsets(ba, bo));
  auto ob = std::make_shared<const std::vector<std::size_t>>(broadcast_offsets(bb, bo));
  Shape out_shape = bo;
  out_shape.push_back(m);
  out_shape.push_back(n);
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(batches * m * n, 0.0);
  for (std::size_t i = 0; i < batches; ++i) {
    matmul_kernel(av.data() + (*oa)[i] * m * k, bv.data() + (*ob)[i] * k * n,
                  out.data() + i * m * n, m, k, n);
  }
  return detail::make_result("matmul", out_shape, std::move(out), {a, b},
                             [oa, ob, m, k, n](Node& self) {
                               const auto& x = value_of(self, 0);
                               const auto& y = value_of(self, 1);
                               auto gx = grad_of(self, 0);
                               auto gy = grad_of(self, 1);
                               for (std::size_t i = 0; i < oa->size(); ++i) {
                                 const double* dc = self.grad.data() + i * m * n;
                                 if (!gx.empty())
                                   matmul_grad_a(dc, y.data() + (*ob)[i] * k * n,
                                                 gx.data() + (*oa)[i] * m * k, m, k, n);
                                 if (!gy.empty())
                                   matmul_grad_b(x.data() + (*oa)[i] * m * k, dc,
                                                 gy.data() + (*ob)[i] * k * n, m, k, n);
                               }
                             });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (ws.size() != 2 || xs.empty() || xs.back() != ws[0]) {
    throw DimensionError("linear: input " + to_string(xs) + " incompatible with weight " +
                         to_string(ws));
  }
  const std::size_t in = ws[0], outf = ws[1];
  if (bias.defined() && bias.shape() != Shape{outf}) {
    throw DimensionError("linear: bias " + to_string(bias.shape()) + " for " +
                         std::to_string(outf) + " outputs");
  }
  const std::size_t rows = x.numel() / in;
  Shape out_shape = xs;
  out_shape.back() = outf;
  std::vector<double> out(rows * outf, 0.0);
  if (bias.defined()) {
    const auto bv = bias.values();
    for (std::size_t r = 0; r < rows; ++r) std::copy(bv.begin(), bv.end(), out.begin() + static_cast<std::ptrdiff_t>(r * outf));
  }
  matmul_kernel(x.values().data(), weight.values().data(), out.data(), rows, in, outf);
  return detail::make_result("linear", out_shape, std::move(out), {x, weight, bias},
                             [rows, in, outf](Node& self) {
                               const double* dc = self.grad.data();
                               auto gx = grad_of(self, 0);
                               auto gw = grad_of(self, 1);
                               auto gb = grad_of(self, 2);
                               if (!gx.empty())
                                 matmul_grad_a(dc, value_of(self, 1).data(), gx.data(), rows, in, outf);
                               if (!gw.empty())
                                 matmul_grad_b(value_of(self, 0).data(), dc, gw.data(), rows, in, outf);
                               if (!gb.empty()) {
                                 for (std::size_t r = 0; r < rows; ++r)
                                   for (std::size_t j = 0; j < outf; ++j) gb[j] += dc[r * outf + j];
                               }
                             });
}

Tensor softmax_lastdim(const Tensor& x) {
  if (x.rank() == 0) throw DimensionError("softmax: empty last dimension");
  const std::size_t len = x.shape().back();
  const std::size_t rows = x.numel() / len;
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * len;
    double* o = out.data() + r * len;
    const double mx = *std::max_element(row, row + len);
    double z = 0.0;
    for (std::size_t j = 0; j < len; ++j) z += (o[j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < len; ++j) o[j] /= z;
  }
  return detail::make_result("softmax", x.shape(), std::move(out), {x}, [rows, len](Node& self) {
    auto gx = grad_of(self, 0);
    const auto& y = *self.value;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* yr = y.data() + r * len;
      const double* g = self.grad.data() + r * len;
      double dotp = 0.0;
      for (std::size_t j = 0; j < len; ++j) dotp += g[j] * yr[j];
      for (std::size_t j = 0; j < len; ++j) gx[r * len + j] += yr[j] * (g[j] - dotp);
    }
  });
}

Tensor log_softmax_lastdim(const Tensor& x) {
  if (x.rank() == 0) throw DimensionError("log_softmax: empty last dimension");
  const std::size_t len = x.shape().back();
  const std::size_t rows = x.numel() / len;
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * len;
    double* o = out.data() + r * len;
    const double mx = *std::max_element(row, row + len);
    double z = 0.0;
    for (std::size_t j = 0; j < len; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < len; ++j) o[j] = row[j] - lse;
  }
  return detail::make_result("log_softmax", x.shape(), std::move(out), {x},
                             [rows, len](Node& self) {
                               auto gx = grad_of(self, 0);
                               const auto& y = *self.value;
                               for (std::size_t r = 0; r < rows; ++r) {
                                 const double* g = self.grad.data() + r * len;
                                 double gs = 0.0;
                                 for (std::size_t j = 0; j < len; ++j) gs += g[j];
                                 for (std::size_t j = 0; j < len; ++j)
                                   gx[r * len + j] += g[j] - std::exp(y[r * len + j]) * gs;
                               }
                             });
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              const Conv2dOptions& opts) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (xs.size() != 4 || ws.size() != 4) {
    throw DimensionError("conv2d: expected x (N,H,W,C) and weight (KH,KW,Cin/g,Cout), got " +
                         to_string(xs) + " and " + to_string(ws));
  }
  const std::size_t groups = opts.groups, stride = opts.stride, pad = opts.padding;
  if (groups == 0 || stride == 0) throw ConfigError("conv2d: groups and stride must be positive");
  const std::size_t batch = xs[0], h = xs[1], w = xs[2], cin = xs[3];
  const std::size_t kh = ws[0], kw = ws[1], cout = ws[3];
  if (cin % groups != 0 || cout % groups != 0 || ws[2] * groups != cin) {
    throw DimensionError("conv2d: input channels " + std::to_string(cin) + ", weight " +
                         to_string(ws) + " and groups " + std::to_string(groups) +
                         " are inconsistent");
  }
  if (bias.defined() && bias.shape() != Shape{cout}) {
    throw DimensionError("conv2d: bias " + to_string(bias.shape()) + " for " +
                         std::to_string(cout) + " output channels");
  }
  if (h + 2 * pad < kh || w + 2 * pad < kw) {
    throw GeometryError("conv2d: kernel larger than padded input");
  }
  const std::size_t oh = (h + 2 * pad - kh) / stride + 1;
  const std::size_t ow = (w + 2 * pad - kw) / stride + 1;
  const std::size_t cig = cin / groups, cog = cout / groups;
  const auto xv = x.values();
  const auto wv = weight.values();
  std::vector<double> out(batch * oh * ow * cout, 0.0);
  if (bias.defined()) {
    const auto bv = bias.values();
    for (std::size_t p = 0; p < batch * oh * ow; ++p)
      std::copy(bv.begin(), bv.end(), out.begin() + static_cast<std::ptrdiff_t>(p * cout));
  }
  // Visits every (output pixel, tap) pair that reads an in-bounds input pixel.
  auto for_each_tap = [=](auto&& fn) {
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const std::size_t o_off = ((b * oh + oy) * ow + ox) * cout;
          for (std::size_t ky = 0; ky < kh; ++ky) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
              const std::size_t i_off = ((b * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)) * cin;
              const std::size_t w_off = (ky * kw + kx) * cig * cout;
              fn(o_off, i_off, w_off);
            }
          }
        }
  };
  for_each_tap([&](std::size_t o_off, std::size_t i_off, std::size_t w_off) {
    for (std::size_t g = 0; g < groups; ++g)
      for (std::size_t ci = 0; ci < cig; ++ci) {
        const double v = xv[i_off + g * cig + ci];
        const double* wr = wv.data() + w_off + ci * cout + g * cog;
        double* o = out.data() + o_off + g * cog;
        for (std::size_t co = 0; co < cog; ++co) o[co] += v * wr[co];
      }
  });
  Shape out_shape{batch, oh, ow, cout};
  return detail::make_result(
      "conv2d", out_shape, std::move(out), {x, weight, bias},
      [for_each_tap, groups, cig, cog, cout, batch, oh, ow](Node& self) {
        const auto& xs_ = value_of(self, 0);
        const auto& ws_ = value_of(self, 1);
        auto gx = grad_of(self, 0);
        auto gw = grad_of(self, 1);
        auto gb = grad_of(self, 2);
        const double* g = self.grad.data();
        if (!gx.empty() || !gw.empty()) {
          for_each_tap([&](std::size_t o_off, std::size_t i_off, std::size_t w_off) {
            for (std::size_t gr = 0; gr < groups; ++gr)
              for (std::size_t ci = 0; ci < cig; ++ci) {
                const std::size_t xi = i_off + gr * cig + ci;
                const std::size_t wi = w_off + ci * cout + gr * cog;
                const double* go = g + o_off + gr * cog;
                if (!gx.empty()) {
                  double acc = 0.0;
                  for (std::size_t co = 0; co < cog; ++co) acc += go[co] * ws_[wi + co];
                  gx[xi] += acc;
                }
                if (!gw.empty()) {
                  const double v = xs_[xi];
                  for (std::size_t co = 0; co < cog; ++co) gw[wi + co] += v * go[co];
                }
              }
          });
        }
        if (!gb.empty()) {
          for (std::size_t p = 0; p < batch * oh * ow; ++p)
            for (std::size_t c = 0; c < cout; ++c) gb[c] += g[p * cout + c];
        }
      });
}

Tensor pool2d(const Tensor& x, const Pool2dOptions& opts) {
  const Shape& xs = x.shape();
  if (xs.size() != 4) throw DimensionError("pool2d expects (N,H,W,C), got " + to_string(xs));
  const std::size_t win = opts.window, stride = opts.stride == 0 ? opts.window : opts.stride;
  if (win == 0) throw ConfigError("pool2d: window must be positive");
  const std::size_t batch = xs[0], h = xs[1], w = xs[2], c = xs[3];
  if (h < win || w < win || (h - win) % stride != 0 || (w - win) % stride != 0) {
    throw DimensionError("pool2d: extents " + std::to_string(h) + "x" + std::to_string(w) +
                         " not tiled by window " + std::to_string(win) + " stride " +
                         std::to_string(stride));
  }
  const std::size_t oh = (h - win) / stride + 1, ow = (w - win) / stride + 1;
  const auto xv = x.values();
  std::vector<double> out(batch * oh * ow * c, 0.0);
  const Shape out_shape{batch, oh, ow, c};
  auto in_index = [=](std::size_t b, std::size_t oy, std::size_t ox, std::size_t ky,
                      std::size_t kx) {
    return ((b * h + oy * stride + ky) * w + ox * stride + kx) * c;
  };
  if (opts.kind == PoolKind::avg) {
    const double inv = 1.0 / static_cast<double>(win * win);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          double* o = out.data() + ((b * oh + oy) * ow + ox) * c;
          for (std::size_t ky = 0; ky < win; ++ky)
            for (std::size_t kx = 0; kx < win; ++kx) {
              const double* xi = xv.data() + in_index(b, oy, ox, ky, kx);
              for (std::size_t ch = 0; ch < c; ++ch) o[ch] += xi[ch];
            }
          for (std::size_t ch = 0; ch < c; ++ch) o[ch] *= inv;
        }
    return detail::make_result("avg_pool2d", out_shape, std::move(out), {x},
                               [=](Node& self) {
                                 auto gx = grad_of(self, 0);
                                 for (std::size_t b = 0; b < batch; ++b)
                                   for (std::size_t oy = 0; oy < oh; ++oy)
                                     for (std::size_t ox = 0; ox < ow; ++ox) {
                                       const double* g = self.grad.data() + ((b * oh + oy) * ow + ox) * c;
                                       for (std::size_t ky = 0; ky < win; ++ky)
                                         for (std::size_t kx = 0; kx < win; ++kx) {
                                           double* d = gx.data() + in_index(b, oy, ox, ky, kx);
                                           for (std::size_t ch = 0; ch < c; ++ch) d[ch] += g[ch] * inv;
                                         }
                                     }
                               });
  }
  auto arg = std::make_shared<std::vector<std::size_t>>(out.size(), 0);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const std::size_t o_off = ((b * oh + oy) * ow + ox) * c;
        for (std::size_t ch = 0; ch < c; ++ch) {
          double best = -std::numeric_limits<double>::infinity();
          std::size_t best_i = 0;
          bool first = true;
          for (std::size_t ky = 0; ky < win; ++ky)
            for (std::size_t kx = 0; kx < win; ++kx) {
              const std::size_t i = in_index(b, oy, ox, ky, kx) + ch;
              if (first || xv[i] > best) {
                best = xv[i];
                best_i = i;
                first = false;
              }
            }
          out[o_off + ch] = best;
          (*arg)[o_off + ch] = best_i;
        }
      }
  return detail::make_result("max_pool2d", out_shape, std::move(out), {x}, [arg](Node& self) {
    auto gx = grad_of(self, 0);
    for (std::size_t o = 0; o < arg->size(); ++o) gx[(*arg)[o]] += self.grad[o];
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (eps <= 0.0) throw ConfigError("layer_norm: eps must be positive");
  const std::size_t c = x.shape().back();
  const std::size_t rows = x.numel() / c;
  if ((gain.defined() && gain.shape() != Shape{c}) || (bias.defined() && bias.shape() != Shape{c})) {
    throw DimensionError("layer_norm: affine parameters must have shape [" + std::to_string(c) + "]");
  }
  const auto xv = x.values();
  auto xhat = std::make_shared<std::vector<double>>(xv.size());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(xv.size());
  const auto gv = gain.defined() ? gain.values() : std::span<const double>{};
  const auto bv = bias.defined() ? bias.values() : std::span<const double>{};
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(c);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < c; ++j) {
      const double xh = (row[j] - mu) * rs;
      (*xhat)[r * c + j] = xh;
      out[r * c + j] = xh * (gv.empty() ? 1.0 : gv[j]) + (bv.empty() ? 0.0 : bv[j]);
    }
  }
  return detail::make_result("layer_norm", x.shape(), std::move(out), {x, gain, bias},
                             [xhat, rstd, rows, c](Node& self) {
                               auto gx = grad_of(self, 0);
                               auto gg = grad_of(self, 1);
                               auto gb = grad_of(self, 2);
                               const bool affine = self.inputs[1] != nullptr;
                               const std::vector<double>* gvals = affine ? &value_of(self, 1) : nullptr;
                               std::vector<double> dxh(c);
                               for (std::size_t r = 0; r < rows; ++r) {
                                 const double* g = self.grad.data() + r * c;
                                 const double* xh = xhat->data() + r * c;
                                 double m1 = 0.0, m2 = 0.0;
                                 for (std::size_t j = 0; j < c; ++j) {
                                   dxh[j] = g[j] * (gvals ? (*gvals)[j] : 1.0);
                                   m1 += dxh[j];
                                   m2 += dxh[j] * xh[j];
                                   if (!gg.empty()) gg[j] += g[j] * xh[j];
                                   if (!gb.empty()) gb[j] += g[j];
                                 }
                                 if (gx.empty()) continue;
                                 m1 /= static_cast<double>(c);
                                 m2 /= static_cast<double>(c);
                                 for (std::size_t j = 0; j < c; ++j)
                                   gx[r * c + j] += (*rstd)[r] * (dxh[j] - m1 - xh[j] * m2);
                               }
                             });
}

Tensor rms_norm(const Tensor& x, double eps) {
  if (eps <= 0.0) throw ConfigError("rms_norm: eps must be positive");
  const std::size_t c = x.shape().back();
  const std::size_t rows = x.numel() / c;
  const auto xv = x.values();
  auto inv = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * c;
    double ms = 0.0;
    for (std::size_t j = 0; j < c; ++j) ms += row[j] * row[j];
    ms /= static_cast<double>(c);
    const double ir = 1.0 / std::sqrt(ms + eps);
    (*inv)[r] = ir;
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] = row[j] * ir;
  }
  return detail::make_result("rms_norm", x.shape(), std::move(out), {x}, [inv, rows, c](Node& self) {
    auto gx = grad_of(self, 0);
    const auto& y = *self.value;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* g = self.grad.data() + r * c;
      const double* yr = y.data() + r * c;
      double m = 0.0;
      for (std::size_t j = 0; j < c; ++j) m += g[j] * yr[j];
      m /= static_cast<double>(c);
      for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += (*inv)[r] * (g[j] - yr[j] * m);
    }
  });
}

Tensor batch_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, Tensor& running_mean,
                  Tensor& running_var, const BatchNormOptions& opts) {
  if (opts.eps <= 0.0) throw ConfigError("batch_norm: eps must be positive");
  if (opts.momentum < 0.0 || opts.momentum > 1.0) throw ConfigError("batch_norm: momentum must lie in [0,1]");
  const std::size_t c = x.shape().back();
  const std::size_t rows = x.numel() / c;
  const Shape cs{c};
  if (gain.shape() != cs || bias.shape() != cs || running_mean.shape() != cs ||
      running_var.shape() != cs) {
    throw DimensionError("batch_norm: parameters must have shape [" + std::to_string(c) + "]");
  }
  const auto xv = x.values();
  std::vector<double> mu(c, 0.0), var(c, 0.0);
  if (opts.training) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < c; ++j) mu[j] += xv[r * c + j];
    for (auto& m : mu) m /= static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < c; ++j) {
        const double d = xv[r * c + j] - mu[j];
        var[j] += d * d;
      }
    for (auto& v : var) v /= static_cast<double>(rows);
    if (opts.update_running_stats) {
      auto rm = running_mean.mutable_values();
      auto rv = running_var.mutable_values();
      const double unbias = rows > 1 ? static_cast<double>(rows) / static_cast<double>(rows - 1) : 1.0;
      for (std::size_t j = 0; j < c; ++j) {
        rm[j] = (1.0 - opts.momentum) * rm[j] + opts.momentum * mu[j];
        rv[j] = (1.0 - opts.momentum) * rv[j] + opts.momentum * var[j] * unbias;
      }
    }
  } else {
    const auto rm = running_mean.values();
    const auto rv = running_var.values();
    std::copy(rm.begin(), rm.end(), mu.begin());
    std::copy(rv.begin(), rv.end(), var.begin());
  }
  auto rstd = std::make_shared<std::vector<double>>(c);
  for (std::size_t j = 0; j < c; ++j) (*rstd)[j] = 1.0 / std::sqrt(var[j] + opts.eps);
  auto xhat = std::make_shared<std::vector<double>>(xv.size());
  const auto gv = gain.values();
  const auto bv = bias.values();
  std::vector<double> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) {
      const double xh = (xv[r * c + j] - mu[j]) * (*rstd)[j];
      (*xhat)[r * c + j] = xh;
      out[r * c + j] = xh * gv[j] + bv[j];
    }
  const bool training = opts.training;
  return detail::make_result(
      "batch_norm", x.shape(), std::move(out), {x, gain, bias},
      [xhat, rstd, rows, c, training](Node& self) {
        auto gx = grad_of(self, 0);
        auto gg = grad_of(self, 1);
        auto gb = grad_of(self, 2);
        const auto& gvals = value_of(self, 1);
        const double* g = self.grad.data();
        std::vector<double> m1(c, 0.0), m2(c, 0.0);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < c; ++j) {
            const double gi = g[r * c + j];
            const double xh = (*xhat)[r * c + j];
            if (!gg.empty()) gg[j] += gi * xh;
            if (!gb.empty()) gb[j] += gi;
            m1[j] += gi * gvals[j];
            m2[j] += gi * gvals[j] * xh;
          }
        if (gx.empty()) return;
        const double inv_rows = 1.0 / static_cast<double>(rows);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < c; ++j) {
            const double dxh = g[r * c + j] * gvals[j];
            if (training) {
              gx[r * c + j] += (*rstd)[j] * (dxh - m1[j] * inv_rows -
                                             (*xhat)[r * c + j] * m2[j] * inv_rows);
            } else {
              gx[r * c + j] += (*rstd)[j] * dxh;
            }
          }
      });
}

}  // namespace dcaunet
