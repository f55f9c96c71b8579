#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "dcaunet/dca.hpp"
#include "dcaunet/metrics.hpp"

namespace dcaunet::reference {

// Plain-loop evaluation of differential attention against one token: the
// mean of the whole (H, W) grid. Both softmaxes over a single key equal 1, so
// every pixel receives the same vector. x is (N, H, W, C) row-major; returns
// the same layout. Reads the weights straight from `state`.
std::vector<double> global_token_dca(const std::vector<double>& x, std::size_t n, std::size_t h,
                                     std::size_t w, const DcaConfig& cfg, const DcaState& state);

// O(|P| |R|) count.
double dice(const LabelMask& pred, const LabelMask& ref, std::int32_t class_id);

// All-pairs boundary distances with the same boundary and percentile
// conventions as the optimized metric.
std::optional<double> hausdorff(const LabelMask& pred, const LabelMask& ref, std::int32_t class_id,
                                double percentile);

}  // namespace dcaunet::reference
