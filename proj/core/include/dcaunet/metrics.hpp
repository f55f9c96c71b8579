#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace dcaunet {

// H x W integer label map.
struct LabelMask {
  std::size_t height = 0, width = 0;
  std::vector<std::int32_t> labels;
  double spacing = 1.0;  // isotropic pixel size used to scale distances

  LabelMask() = default;
  LabelMask(std::size_t h, std::size_t w, std::int32_t fill = 0)
      : height(h), width(w), labels(h * w, fill) {}

  std::int32_t at(std::size_t y, std::size_t x) const { return labels[y * width + x]; }
  std::int32_t& at(std::size_t y, std::size_t x) { return labels[y * width + x]; }
  std::size_t count(std::int32_t class_id) const;
  bool contains(std::int32_t class_id) const;
  // Throws ConfigError if any label is outside [0, num_classes).
  void validate(std::size_t num_classes) const;
  bool operator==(const LabelMask&) const = default;
};

// 2|P∩R| / (|P|+|R|); 1.0 when the class is absent from both.
double dice(const LabelMask& pred, const LabelMask& ref, std::int32_t class_id);

// Mean Dice over foreground classes 1..K-1 present in either mask; 1.0 if none.
double mean_foreground_dice(const LabelMask& pred, const LabelMask& ref, std::size_t num_classes);

// Foreground pixels with at least one 4-neighbour outside the class (pixels
// outside the image count as outside). Returned as (y, x), row-major order.
std::vector<std::pair<std::int32_t, std::int32_t>> boundary_pixels(const LabelMask& mask,
                                                                   std::int32_t class_id);

struct HausdorffOptions {
  double percentile = 95.0;  // 100 gives the classical maximum
};

// Symmetric boundary distance between the class regions. The percentile is
// taken over the pooled directed distances of both boundary sets (linear
// interpolation between order statistics). nullopt when either side lacks the
// class.
std::optional<double> hausdorff(const LabelMask& pred, const LabelMask& ref, std::int32_t class_id,
                                const HausdorffOptions& opts = {});

// Exact squared Euclidean distance transform to the `true` cells of a grid.
// Cells with no reachable seed hold +inf.
std::vector<double> squared_distance_transform(const std::vector<bool>& seeds, std::size_t height,
                                               std::size_t width);

struct ClassMetrics {
  std::int32_t class_id = 0;
  std::string name;
  double dsc = 0.0;          // mean over cases where the class is present in either mask
  std::size_t dsc_cases = 0;
  double hd = 0.0;           // mean over cases where both masks contain the class
  std::size_t hd_cases = 0;
  std::size_t hd_missing = 0;
};

struct MetricReport {
  double mean_dsc = 0.0;  // in [0,1]
  double mean_hd = 0.0;
  double hd_percentile = 95.0;
  std::size_t cases = 0;
  std::vector<ClassMetrics> classes;
};

MetricReport evaluate_masks(const std::vector<LabelMask>& preds, const std::vector<LabelMask>& refs,
                            std::size_t num_classes, const HausdorffOptions& opts = {},
                            const std::vector<std::string>& class_names = {});

// Tab-delimited: one row per class plus a "mean" row; DSC in percent.
std::string report_to_tsv(const MetricReport& report);
// JSON document with mean DSC (percent), mean HD and per-class DSC.
std::string report_to_json(const MetricReport& report, const std::string& extra_json = "{}");

}  // namespace dcaunet
