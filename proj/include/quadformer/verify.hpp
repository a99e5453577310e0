#pragma once

#include <string>
#include <vector>

namespace qf {

struct SuiteResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

/// Self-checks behind `qf verify`: finite-difference gradients of the full
/// objective, shape chains, cross-branch degeneracy, an SSIM oracle, the EMA
/// closed form, pseudo-label denoising and brute-force pairing.
std::vector<SuiteResult> run_verification();

}  // namespace qf
