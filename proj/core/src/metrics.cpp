#include "dcaunet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

#include <nlohmann/json.hpp>

#include "dcaunet/errors.hpp"

namespace dcaunet {

namespace {

void require_same_shape(const LabelMask& a, const LabelMask& b) {
  if (a.height != b.height || a.width != b.width) {
    throw DimensionError("mask shapes differ: " + std::to_string(a.height) + "x" +
                         std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" +
                         std::to_string(b.width));
  }
}

constexpr double kInf = std::numeric_limits<double>::infinity();

// 1-D lower envelope of parabolas (Felzenszwalb & Huttenlocher).
void edt_1d(const double* f, std::size_t n, std::size_t stride, double* out, std::size_t out_stride,
            std::vector<std::size_t>& v, std::vector<double>& z) {
  v.clear();
  z.clear();
  for (std::size_t q = 0; q < n; ++q) {
    const double fq = f[q * stride];
    if (fq == kInf) continue;
    const double qd = static_cast<double>(q);
    while (!v.empty()) {
      const double p = static_cast<double>(v.back());
      const double fp = f[v.back() * stride];
      const double s = ((fq + qd * qd) - (fp + p * p)) / (2.0 * qd - 2.0 * p);
      if (s <= z.back()) {
        v.pop_back();
        z.pop_back();
      } else {
        break;
      }
    }
    if (v.empty()) {
      v.push_back(q);
      z.push_back(-kInf);
    } else {
      const double p = static_cast<double>(v.back());
      const double fp = f[v.back() * stride];
      v.push_back(q);
      z.push_back(((fq + qd * qd) - (fp + p * p)) / (2.0 * qd - 2.0 * p));
    }
  }
  if (v.empty()) {
    for (std::size_t q = 0; q < n; ++q) out[q * out_stride] = kInf;
    return;
  }
  std::size_t k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    const double qd = static_cast<double>(q);
    while (k + 1 < v.size() && z[k + 1] < qd) ++k;
    const double d = qd - static_cast<double>(v[k]);
    out[q * out_stride] = d * d + f[v[k] * stride];
  }
}

double percentile_of(std::vector<double> values, double pct) {
  std::sort(values.begin(), values.end());
  if (pct >= 100.0) return values.back();
  const double pos = pct / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + (values[hi] - values[lo]) * frac;
}

}  // namespace

std::size_t LabelMask::count(std::int32_t class_id) const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), class_id));
}

bool LabelMask::contains(std::int32_t class_id) const {
  return std::find(labels.begin(), labels.end(), class_id) != labels.end();
}

void LabelMask::validate(std::size_t num_classes) const {
  if (labels.size() != height * width) throw DimensionError("mask label count does not match its extents");
  for (auto l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= num_classes) {
      throw ConfigError("mask label " + std::to_string(l) + " outside [0, " +
                        std::to_string(num_classes) + ")");
    }
  }
}

double dice(const LabelMask& pred, const LabelMask& ref, std::int32_t class_id) {
  require_same_shape(pred, ref);
  std::size_t inter = 0, p = 0, r = 0;
  for (std::size_t i = 0; i < pred.labels.size(); ++i) {
    const bool a = pred.labels[i] == class_id, b = ref.labels[i] == class_id;
    p += a;
    r += b;
    inter += a && b;
  }
  if (p + r == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(p + r);
}

double mean_foreground_dice(const LabelMask& pred, const LabelMask& ref, std::size_t num_classes) {
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t c = 1; c < num_classes; ++c) {
    const auto id = static_cast<std::int32_t>(c);
    if (!pred.contains(id) && !ref.contains(id)) continue;
    acc += dice(pred, ref, id);
    ++n;
  }
  return n == 0 ? 1.0 : acc / static_cast<double>(n);
}

std::vector<std::pair<std::int32_t, std::int32_t>> boundary_pixels(const LabelMask& mask,
                                                                   std::int32_t class_id) {
  std::vector<std::pair<std::int32_t, std::int32_t>> out;
  const auto h = static_cast<std::int64_t>(mask.height), w = static_cast<std::int64_t>(mask.width);
  auto inside = [&](std::int64_t y, std::int64_t x) {
    return y >= 0 && y < h && x >= 0 && x < w &&
           mask.labels[static_cast<std::size_t>(y * w + x)] == class_id;
  };
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      if (!inside(y, x)) continue;
      if (!inside(y - 1, x) || !inside(y + 1, x) || !inside(y, x - 1) || !inside(y, x + 1))
        out.emplace_back(static_cast<std::int32_t>(y), static_cast<std::int32_t>(x));
    }
  return out;
}

std::vector<double> squared_distance_transform(const std::vector<bool>& seeds, std::size_t height,
                                               std::size_t width) {
  std::vector<double> f(height * width);
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = seeds[i] ? 0.0 : kInf;
  std::vector<double> tmp(height * width);
  std::vector<std::size_t> v;
  std::vector<double> z;
  for (std::size_t x = 0; x < width; ++x) edt_1d(f.data() + x, height, width, tmp.data() + x, width, v, z);
  for (std::size_t y = 0; y < height; ++y)
    edt_1d(tmp.data() + y * width, width, 1, f.data() + y * width, 1, v, z);
  return f;
}

std::optional<double> hausdorff(const LabelMask& pred, const LabelMask& ref, std::int32_t class_id,
                                const HausdorffOptions& opts) {
  require_same_shape(pred, ref);
  if (opts.percentile <= 0.0 || opts.percentile > 100.0) {
    throw ConfigError("hausdorff: percentile must lie in (0, 100]");
  }
  const auto bp = boundary_pixels(pred, class_id);
  const auto br = boundary_pixels(ref, class_id);
  if (bp.empty() || br.empty()) return std::nullopt;
  const std::size_t h = pred.height, w = pred.width;
  auto directed = [&](const auto& from, const auto& to, std::vector<double>& out) {
    std::vector<bool> seeds(h * w, false);
    for (auto [y, x] : to) seeds[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)] = true;
    const auto dt = squared_distance_transform(seeds, h, w);
    for (auto [y, x] : from)
      out.push_back(std::sqrt(dt[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)]));
  };
  std::vector<double> d;
  directed(bp, br, d);
  directed(br, bp, d);
  return percentile_of(std::move(d), opts.percentile) * ref.spacing;
}

MetricReport evaluate_masks(const std::vector<LabelMask>& preds, const std::vector<LabelMask>& refs,
                            std::size_t num_classes, const HausdorffOptions& opts,
                            const std::vector<std::string>& class_names) {
  if (preds.size() != refs.size()) {
    throw DimensionError("evaluate_masks: " + std::to_string(preds.size()) + " predictions for " +
                         std::to_string(refs.size()) + " references");
  }
  MetricReport rep;
  rep.hd_percentile = opts.percentile;
  rep.cases = preds.size();
  for (std::size_t c = 1; c < num_classes; ++c) {
    ClassMetrics m;
    m.class_id = static_cast<std::int32_t>(c);
    m.name = c < class_names.size() ? class_names[c] : "class" + std::to_string(c);
    rep.classes.push_back(m);
  }
  for (std::size_t i = 0; i < preds.size(); ++i) {
    for (auto& m : rep.classes) {
      const bool in_p = preds[i].contains(m.class_id), in_r = refs[i].contains(m.class_id);
      if (!in_p && !in_r) continue;
      m.dsc += dice(preds[i], refs[i], m.class_id);
      ++m.dsc_cases;
      if (auto hd = hausdorff(preds[i], refs[i], m.class_id, opts)) {
        m.hd += *hd;
        ++m.hd_cases;
      } else {
        ++m.hd_missing;
      }
    }
  }
  std::size_t n_dsc = 0, n_hd = 0;
  for (auto& m : rep.classes) {
    if (m.dsc_cases) {
      m.dsc /= static_cast<double>(m.dsc_cases);
      rep.mean_dsc += m.dsc;
      ++n_dsc;
    }
    if (m.hd_cases) {
      m.hd /= static_cast<double>(m.hd_cases);
      rep.mean_hd += m.hd;
      ++n_hd;
    }
  }
  rep.mean_dsc = n_dsc ? rep.mean_dsc / static_cast<double>(n_dsc) : 1.0;
  rep.mean_hd = n_hd ? rep.mean_hd / static_cast<double>(n_hd) : 0.0;
  return rep;
}

std::string report_to_tsv(const MetricReport& report) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "class\tDSC(%)\tHD" << report.hd_percentile << "\tdsc_cases\thd_cases\thd_missing\n";
  for (const auto& m : report.classes) {
    os << m.name << '\t' << 100.0 * m.dsc << '\t' << m.hd << '\t' << m.dsc_cases << '\t'
       << m.hd_cases << '\t' << m.hd_missing << '\n';
  }
  os << "mean\t" << 100.0 * report.mean_dsc << '\t' << report.mean_hd << '\t' << report.cases
     << "\t\t\n";
  return os.str();
}

std::string report_to_json(const MetricReport& report, const std::string& extra_json) {
  nlohmann::ordered_json j;
  j["cases"] = report.cases;
  j["mean_dsc"] = 100.0 * report.mean_dsc;
  j["mean_hd"] = report.mean_hd;
  j["hd_percentile"] = report.hd_percentile;
  auto& per = j["per_class"];
  per = nlohmann::ordered_json::array();
  for (const auto& m : report.classes) {
    per.push_back({{"class_id", m.class_id},
                   {"name", m.name},
                   {"dsc", 100.0 * m.dsc},
                   {"hd", m.hd},
                   {"dsc_cases", m.dsc_cases},
                   {"hd_cases", m.hd_cases},
                   {"hd_missing", m.hd_missing}});
  }
  j["run"] = nlohmann::ordered_json::parse(extra_json);
  return j.dump(2) + "\n";
}

}  // namespace dcaunet
