#include "dcaunet/verify.hpp"

#include <chrono>
#include <cmath>
#include <sstream>

#include "dcaunet/blocks.hpp"
#include "dcaunet/csff.hpp"
#include "dcaunet/dca.hpp"
#include "dcaunet/gradcheck.hpp"
#include "dcaunet/metrics.hpp"
#include "dcaunet/net.hpp"
#include "dcaunet/reference.hpp"
#include "dcaunet/train.hpp"

namespace dcaunet {

namespace {

Tensor random_input(Shape shape, Rng& rng, double stddev = 1.0) {
  return parameter(normal_tensor(std::move(shape), stddev, rng));
}

LabelMask random_mask(std::size_t h, std::size_t w, std::size_t k, Rng& rng) {
  LabelMask m(h, w);
  if (rng.bernoulli(0.5)) {
    const double p = rng.uniform(0.05, 0.6);
    for (auto& l : m.labels) l = rng.bernoulli(p) ? static_cast<std::int32_t>(rng.uniform_int(1, k - 1)) : 0;
  } else {
    const auto boxes = rng.uniform_int(1, 4);
    for (std::int64_t b = 0; b < boxes; ++b) {
      const auto cls = static_cast<std::int32_t>(rng.uniform_int(1, k - 1));
      const auto y0 = rng.uniform_int(0, h - 1), x0 = rng.uniform_int(0, w - 1);
      const auto y1 = rng.uniform_int(y0, h - 1), x1 = rng.uniform_int(x0, w - 1);
      for (auto y = y0; y <= y1; ++y)
        for (auto x = x0; x <= x1; ++x) m.at(y, x) = cls;
    }
  }
  return m;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(3);
  os << std::scientific << v;
  return os.str();
}

CheckResult grad_result(const std::string& name, const GradCheckResult& g, double tol) {
  CheckResult r;
  r.name = name;
  r.passed = g.max_rel_error < tol;
  r.detail = "max rel err " + fmt(g.max_rel_error) + " (tol " + fmt(tol) + ") over " +
             std::to_string(g.checked) + " entries, worst " + g.worst_name + "[" +
             std::to_string(g.worst_index) + "]";
  return r;
}

std::vector<NamedParam> with_input(const ParamList& p, const Tensor& x, const std::string& name = "x") {
  std::vector<NamedParam> v{{name, x, ParamKind::buffer}};
  for (const auto& e : p.entries())
    if (e.kind != ParamKind::buffer) v.push_back(e);
  return v;
}

DcaConfig small_dca(std::size_t channels, std::size_t d, std::size_t m, std::size_t index) {
  DcaConfig c;
  c.channels = channels;
  c.head_dim = d;
  c.window = m;
  c.block_index = index;
  return c;
}

CheckResult check_dca_grad(std::uint64_t seed) {
  Rng rng(derive_seed(seed, 1));
  const DcaConfig cfg = small_dca(8, 2, 2, 3);
  DcaState st(cfg, rng);
  const Tensor x = random_input({1, 4, 4, 8}, rng);
  ParamList p;
  st.collect(p, "dca");
  auto f = [&] { return projection_loss(dca_forward(x, cfg, st), seed); };
  return grad_result("gradcheck.dca", check_gradients(f, with_input(p, x)), 1e-4);
}

CheckResult check_block_grad(std::uint64_t seed) {
  Rng rng(derive_seed(seed, 2));
  const DcaConfig cfg = small_dca(8, 2, 2, 2);
  DcaBlockState st(cfg, rng);
  const Tensor x = random_input({1, 4, 4, 8}, rng);
  ParamList p;
  st.collect(p, "block");
  auto f = [&] { return projection_loss(dca_block_forward(x, st, {}), seed); };
  return grad_result("gradcheck.dca_block", check_gradients(f, with_input(p, x)), 1e-4);
}

CheckResult check_csff_grad(std::uint64_t seed) {
  Rng rng(derive_seed(seed, 3));
  CsffConfig cfg;
  cfg.channels = 8;
  CsffState st(cfg, rng);
  const Tensor xe = random_input({2, 4, 4, 8}, rng), xd = random_input({2, 4, 4, 8}, rng);
  ParamList p;
  st.collect(p, "csff");
  ForwardContext ctx;
  ctx.mode = Mode::train;
  ctx.update_running_stats = false;
  auto inputs = with_input(p, xe, "x_e");
  inputs.insert(inputs.begin() + 1, NamedParam{"x_d", xd, ParamKind::buffer});
  auto f = [&] { return projection_loss(csff_forward(xe, xd, st, ctx), seed); };
  return grad_result("gradcheck.csff", check_gradients(f, inputs), 1e-4);
}

CheckResult check_loss_grad(std::uint64_t seed) {
  Rng rng(derive_seed(seed, 4));
  const Tensor logits = random_input({2, 3, 3, 3}, rng, 2.0);
  std::vector<LabelMask> masks;
  for (int b = 0; b < 2; ++b) masks.push_back(random_mask(3, 3, 3, rng));
  auto f = [&] { return segmentation_loss(logits, masks).total; };
  return grad_result("gradcheck.loss", check_gradients(f, {{"logits", logits, ParamKind::buffer}}), 1e-4);
}

CheckResult check_network_grad(std::uint64_t seed, std::size_t samples) {
  NetworkConfig cfg;
  cfg.input_size = 32;
  cfg.num_classes = 3;
  cfg.base_width = 8;
  cfg.head_dim = 4;
  cfg.window = 4;
  cfg.stage_depths = {1, 1, 1, 1};
  cfg.init_seed = seed;
  Network net(cfg);
  Rng rng(derive_seed(seed, 5));
  const Tensor x = random_input({2, 32, 32, 1}, rng);
  ForwardContext ctx;
  ctx.mode = Mode::train;
  ctx.update_running_stats = false;
  auto f = [&] { return projection_loss(net.forward(x, ctx), seed); };
  GradCheckOptions o;
  o.max_per_tensor = samples;
  o.seed = seed;
  return grad_result("gradcheck.network", check_gradients(f, with_input(net.parameters(), x), o), 1e-3);
}

CheckResult check_row_sums(std::uint64_t seed) {
  CheckResult r{"differential_row_sums", true, "", 0};
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    Rng rng(derive_seed(seed, 6, static_cast<std::uint64_t>(i)));
    const DcaConfig cfg = small_dca(16, 4, 2, 1 + static_cast<std::size_t>(i % 8));
    DcaState st(cfg, rng);
    const Tensor x = normal_tensor({1, 4, 4, 16}, 1.0, rng);
    Probe probe;
    ForwardContext ctx;
    ctx.probe = &probe;
    dca_forward(x, cfg, st, ctx);
    const auto& rec = probe.attention.at(0);
    const std::size_t cols = rec.diff.shape().back();
    const auto v = rec.diff.values();
    for (std::size_t row = 0; row < v.size() / cols; ++row) {
      double s = 0;
      for (std::size_t j = 0; j < cols; ++j) s += v[row * cols + j];
      worst = std::max(worst, std::abs(s - (1.0 - rec.lambda)));
    }
  }
  r.passed = worst <= 1e-6;
  r.detail = "max |row sum - (1 - lambda)| = " + fmt(worst) + " over 100 inputs";
  return r;
}

CheckResult check_collapse(std::uint64_t seed) {
  Rng rng(derive_seed(seed, 7));
  const DcaConfig cfg = small_dca(16, 4, 4, 5);
  DcaState st(cfg, rng);
  for (auto& g : st.rms_gain.mutable_values()) g = rng.uniform(0.5, 1.5);
  const Tensor x = normal_tensor({2, 4, 4, 16}, 1.0, rng);
  const Tensor out = dca_forward(x, cfg, st);
  const auto got = out.values();
  const auto want = reference::global_token_dca(std::vector<double>(x.values().begin(), x.values().end()), 2, 4, 4,
                                                cfg, st);
  double worst = 0.0;
  for (std::size_t i = 0; i < want.size(); ++i) worst = std::max(worst, std::abs(got[i] - want[i]));
  return {"global_token_collapse", worst <= 1e-10, "max abs diff " + fmt(worst) + " (tol 1e-10)", 0};
}

CheckResult check_lambda(std::uint64_t seed) {
  bool ok = lambda_init(1) == 0.2;
  double prev = lambda_init(1);
  // Strictly increasing while exp(-0.3 (l-1)) is resolvable next to 1; beyond
  // that the value saturates just below 0.8.
  for (std::int64_t l = 2; l <= 1 << 20; ++l) {
    const double v = lambda_init(l);
    ok = ok && (l <= 64 ? v > prev : v >= prev) && v < 0.8;
    prev = v;
  }
  Rng rng(derive_seed(seed, 8));
  DcaConfig cfg = small_dca(8, 2, 2, 4);
  DcaState st(cfg, rng);
  for (Tensor* t : {&st.lambda_q1, &st.lambda_k1, &st.lambda_q2, &st.lambda_k2})
    for (auto& v : t->mutable_values()) v = 0.0;
  ok = ok && lambda_value(cfg, st).item() == lambda_init(4);
  std::ostringstream os;
  os.precision(17);
  os << "lambda_init(1)=" << lambda_init(1) << ", sup over l <= 2^20 = " << prev << " (< 0.8)";
  return {"lambda_schedule", ok, os.str(), 0};
}

CheckResult check_flops() {
  DcaConfig cfg = small_dca(32, 16, 7, 1);
  const auto f = dca_attention_flops(cfg, 56, 56);
  NetworkConfig nc;  // 224 input, M = 7
  const auto s = Network(nc).summarize();
  const bool ok = f.pixelwise_score_flops == 49 * f.score_flops &&
                  s.pixelwise_attention_score_flops == 49 * s.attention_score_flops;
  return {"flop_ratio", ok,
          "block ratio " + std::to_string(f.pixelwise_score_flops / f.score_flops) + ", network ratio " +
              std::to_string(s.pixelwise_attention_score_flops / s.attention_score_flops) + " (expect 49)",
          0};
}

CheckResult check_metrics(std::uint64_t seed) {
  Rng rng(derive_seed(seed, 9));
  std::size_t mismatches = 0, compared = 0;
  for (int i = 0; i < 200; ++i) {
    const auto h = static_cast<std::size_t>(rng.uniform_int(1, 32)), w = static_cast<std::size_t>(rng.uniform_int(1, 32));
    const LabelMask a = random_mask(h, w, 3, rng), b = random_mask(h, w, 3, rng);
    for (std::int32_t c = 1; c < 3; ++c) {
      ++compared;
      if (dice(a, b, c) != reference::dice(a, b, c)) ++mismatches;
      for (double pct : {100.0, 95.0}) {
        if (hausdorff(a, b, c, {pct}) != reference::hausdorff(a, b, c, pct)) ++mismatches;
      }
    }
  }
  LabelMask p(10, 10), q(10, 10);
  p.at(1, 1) = 1;
  q.at(4, 5) = 1;
  const bool shift = hausdorff(p, q, 1, {100.0}) == 5.0;
  const bool ident = dice(p, p, 1) == 1.0 && hausdorff(p, p, 1) == 0.0;
  return {"metric_oracles", mismatches == 0 && shift && ident,
          std::to_string(mismatches) + " mismatches over " + std::to_string(compared) +
              " class comparisons; (3,4) shift " + (shift ? "= 5" : "!= 5"),
          0};
}

}  // namespace

std::vector<CheckResult> run_verification_suite(const VerifyOptions& opts,
                                                const std::function<void(const CheckResult&)>& on_result) {
  const std::uint64_t s = opts.seed;
  const std::vector<std::pair<std::string, std::function<CheckResult()>>> checks = {
      {"gradcheck.dca", [&] { return check_dca_grad(s); }},
      {"gradcheck.dca_block", [&] { return check_block_grad(s); }},
      {"gradcheck.csff", [&] { return check_csff_grad(s); }},
      {"gradcheck.loss", [&] { return check_loss_grad(s); }},
      {"gradcheck.network", [&] { return check_network_grad(s, opts.network_samples_per_tensor); }},
      {"differential_row_sums", [&] { return check_row_sums(s); }},
      {"global_token_collapse", [&] { return check_collapse(s); }},
      {"lambda_schedule", [&] { return check_lambda(s); }},
      {"flop_ratio", [&] { return check_flops(); }},
      {"metric_oracles", [&] { return check_metrics(s); }},
  };
  std::vector<CheckResult> out;
  for (const auto& [name, fn] : checks) {
    const auto t0 = std::chrono::steady_clock::now();
    CheckResult r;
    try {
      r = fn();
    } catch (const std::exception& e) {
      r = {name, false, std::string("threw: ") + e.what(), 0};
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (on_result) on_result(r);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace dcaunet
