#pragma once

#include <string>
#include <vector>

#include "physfed/autodiff.hpp"

namespace physfed::app {

struct GradcheckResult {
  std::string name;
  ad::CheckReport report;
};

struct GradcheckOptions {
  int image_size = 16;
  double h = 1e-6;
  double tol = 1e-4;
  std::uint64_t seed = 1234;
};

/// Every operator on its own, then the model stages and the composed
/// encoder -> hypernetworks -> modulate -> decode path.
std::vector<GradcheckResult> run_gradcheck_suite(const GradcheckOptions& opts = {});

}  // namespace physfed::app
