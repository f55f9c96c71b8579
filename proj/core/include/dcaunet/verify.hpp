#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace dcaunet {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

struct VerifyOptions {
  std::uint64_t seed = 0;
  // Elements sampled per tensor in the end-to-end gradient check (0: all).
  std::size_t network_samples_per_tensor = 6;
};

// Gradient checks, differential row sums, global-token collapse, λ schedule,
// FLOP ratio and metric-oracle parity. Each check catches its own exceptions
// and reports them as failures.
std::vector<CheckResult> run_verification_suite(const VerifyOptions& opts = {},
                                                const std::function<void(const CheckResult&)>& on_result = {});

}  // namespace dcaunet
