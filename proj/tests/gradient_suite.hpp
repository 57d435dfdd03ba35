#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace dcsd::testing {

struct GradCaseResult {
  std::string name;
  int instances = 0;
  double worst_rel_error = 0.0;
};

// Central finite-difference check (h = 1e-6) of every differentiable engine
// op, the losses and the full DCSD layer, each on `instances` random small
// problems.
std::vector<GradCaseResult> run_gradient_suite(int instances = 20, std::uint64_t seed = 2024);

}  // namespace dcsd::testing
