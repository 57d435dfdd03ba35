#include <gtest/gtest.h>

#include "gradient_suite.hpp"

namespace dcsd {
namespace {

TEST(GradientSuite, EveryOpWithinFiniteDifferenceTolerance) {
  const auto results = testing::run_gradient_suite(20, 2024);
  EXPECT_GE(results.size(), 20u);
  for (const auto& r : results) {
    EXPECT_EQ(r.instances, 20) << r.name;
    EXPECT_LT(r.worst_rel_error, 1e-4) << r.name;
  }
}

}  // namespace
}  // namespace dcsd
