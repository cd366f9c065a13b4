#pragma once

#include <string>
#include <vector>

#include "flowalign/oracles.hpp"

namespace flowalign {

struct CheckResult {
  std::string name;
  bool pass = false;
  double measured = 0.0;
  double tolerance = 0.0;
  std::string detail;
};

struct VerifyReport {
  std::vector<CheckResult> checks;

  bool all_pass() const;
  const CheckResult* first_failure() const;
  std::string to_text() const;
  std::string to_json() const;
};

struct VerifyOptions {
  std::uint64_t seed = 1;
  int grad_coords = 100;
  long kl_mc = 200000;
  // Test fixture: flips the sign of the analytic ipa gradient fed to the
  // gradient check, which must surface as a named FAIL.
  bool fault_flip_ipa_grad = false;
};

// Self-contained verification suite: log-sigmoid anchors, gradient checks for
// every objective, the Gaussian KL-rate identity, and the null-delta check.
// Needs no prior pipeline artifacts.
VerifyReport run_verification(const VerifyOptions& options = VerifyOptions{});

}  // namespace flowalign
