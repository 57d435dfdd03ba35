#pragma once

#include <cstdint>

namespace dcsd::testing {

struct RetrievalSweepResult {
  int instances = 0;
  int single_camera_instances = 0;
  int instances_with_exclusions = 0;
  int instances_with_ties = 0;
  double max_abs_diff = 0.0;
  bool structure_equal = true;  // excluded counts, first-match ranks, NaN pattern
};

// Random query/gallery instances (up to 50 x 300) scored by both evaluate
// and evaluate_brute_oracle.
RetrievalSweepResult run_retrieval_sweep(int instances = 60, std::uint64_t seed = 31);

}  // namespace dcsd::testing
