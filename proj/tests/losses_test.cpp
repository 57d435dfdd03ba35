#include <gtest/gtest.h>

#include <cmath>

#include "dcsd/error.hpp"
#include "dcsd/losses.hpp"
#include "dcsd/ops.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

namespace dcsd {
namespace {

using testing::brute_force_triplet;
using testing::pk_labels;
using testing::random_tensor;
using testing::reference_ce;

TEST(Triplet, SeparatedClustersGiveZero) {
  Tensor f({4, 1}, {0, 1, 10, 11});
  EXPECT_EQ(triplet_batch_hard(f, {1, 1, 2, 2}, 0.3).item(), 0.0);
  const auto m = mine_batch_hard(f, {1, 1, 2, 2});
  // Inner anchors (1 and 10) sit 9 from the other cluster, outer ones 10.
  const double d_neg[] = {10.0, 9.0, 9.0, 10.0};
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(m.d_pos[i], 1.0);
    EXPECT_EQ(m.d_neg[i], d_neg[i]);
  }
}

TEST(Triplet, InterleavedClustersHandValue) {
  Tensor f({4, 1}, {0, 5, 1, 6});
  const auto m = mine_batch_hard(f, {1, 1, 2, 2});
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(m.d_pos[i], 5.0);
    EXPECT_EQ(m.d_neg[i], 1.0);
  }
  EXPECT_NEAR(triplet_batch_hard(f, {1, 1, 2, 2}, 0.3).item(), 4.3, 1e-12);
}

TEST(Triplet, MatchesAllPairsBruteForce) {
  Rng rng(21);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t p = 2 + rng.index(3), k = 2 + rng.index(3);
    if (p * k > 16) continue;
    Tensor f = random_tensor({p * k, 1 + rng.index(5)}, rng);
    const auto pids = pk_labels(p, k);
    const double margin = rng.uniform(0.0, 1.0);
    EXPECT_NEAR(triplet_batch_hard(f, pids, margin).item(), brute_force_triplet(f, pids, margin), 1e-12);
  }
}

TEST(Triplet, MiningInvariantUnderPositiveScaling) {
  Rng rng(22);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor f = random_tensor({12, 4}, rng);
    const auto pids = pk_labels(4, 3);
    const auto base = mine_batch_hard(f, pids);
    const double c = rng.uniform(0.1, 10.0);
    const auto scaled = mine_batch_hard(scale(f, c), pids);
    EXPECT_EQ(base.positive, scaled.positive);
    EXPECT_EQ(base.negative, scaled.negative);
  }
}

TEST(Triplet, Errors) {
  Tensor f({3, 1}, {0, 1, 2});
  try {
    triplet_batch_hard(f, {4, 4, 9}, 0.3);
    FAIL() << "expected MiningError";
  } catch (const MiningError& e) {
    EXPECT_NE(std::string(e.what()).find("pid 9"), std::string::npos);
  }
  EXPECT_THROW(triplet_batch_hard(f, {4, 4}, 0.3), ShapeError);
  EXPECT_THROW(triplet_batch_hard(Tensor({2, 1}, {0, 1}), {1, 1}, 0.3), MiningError);
}

TEST(CrossEntropy, UniformLogitsGiveLogM) {
  for (std::size_t m : {2u, 5u, 751u}) {
    Tensor z({3, m}, 0.25);
    EXPECT_NEAR(cross_entropy(z, {0, 1, 1}).item(), std::log(static_cast<double>(m)), 1e-14);
  }
}

TEST(CrossEntropy, ConfidentCorrectLogit) {
  // log(1 + e^-20), evaluated at 50 digits: 2.0611536203143807032e-9
  EXPECT_NEAR(cross_entropy(Tensor({1, 2}, {10, -10}), {0}).item(), 2.0611536203143807e-09, 1e-20);
}

TEST(CrossEntropy, DecreasesToZeroAsMarginGrows) {
  double prev = std::numeric_limits<double>::infinity();
  for (double margin : {0.0, 1.0, 5.0, 20.0, 50.0, 200.0}) {
    const double v = cross_entropy(Tensor({1, 3}, {margin, 0, 0}), {0}).item();
    EXPECT_LT(v, prev);
    EXPECT_GE(v, 0.0);
    prev = v;
  }
  EXPECT_LT(prev, 1e-80);
}

TEST(CrossEntropy, MatchesHighPrecisionReference) {
  Rng rng(23);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.index(6), m = 2 + rng.index(10);
    Tensor z = random_tensor({n, m}, rng, -50.0, 50.0);
    std::vector<Label> y(n);
    for (auto& v : y) v = static_cast<Label>(rng.index(m));
    EXPECT_NEAR(cross_entropy(z, y).item(), reference_ce(z, y), 1e-12);
  }
}

TEST(CrossEntropy, SmoothingDefaultsOffAndChangesValueWhenOn) {
  Tensor z({1, 4}, {2.0, 0.5, -1.0, 0.0});
  EXPECT_EQ(cross_entropy(z, {0}).item(), cross_entropy(z, {0}, 0.0).item());
  EXPECT_GT(cross_entropy(z, {0}, 0.1).item(), cross_entropy(z, {0}).item());
}

TEST(CrossEntropy, LabelOutOfRange) {
  EXPECT_THROW(cross_entropy(Tensor({1, 2}, 0.0), {2}), LabelError);
  EXPECT_THROW(cross_entropy(Tensor({1, 2}, 0.0), {-1}), LabelError);
}

LossParts make_parts(double tri, double ce, std::vector<double> dom, std::vector<double> cam) {
  LossParts p;
  p.l_tri = Tensor::scalar(tri);
  p.l_ce_sample = Tensor::scalar(ce);
  for (double v : dom) p.l_ce_domain_per_module.push_back(Tensor::scalar(v));
  for (double v : cam) p.l_ce_camera_per_module.push_back(Tensor::scalar(v));
  return p;
}

TEST(TotalLoss, DirectSubstitution) {
  EXPECT_EQ(total_loss(make_parts(0.5, 1.0, {0.6, 0.9, 1.2}, {0.3, 0.3, 0.3})).item(), 2.7);
  EXPECT_EQ(total_loss(make_parts(0, 0, {0, 0}, {0, 0})).item(), 0.0);
  EXPECT_EQ(total_loss(make_parts(0.25, 0.5, {1.0}, {2.0})).item(), 3.75);
}

TEST(TotalLoss, EmptyModuleListsRejected) {
  EXPECT_THROW(total_loss(make_parts(1, 1, {}, {})), ShapeError);
  EXPECT_THROW(total_loss(make_parts(1, 1, {1}, {})), ShapeError);
}

TEST(TotalLoss, LinearWithUnitAndInverseBCoefficients) {
  Rng rng(24);
  for (std::size_t b = 1; b <= 4; ++b) {
    LossParts p = make_parts(rng.uniform(0, 2), rng.uniform(0, 2), std::vector<double>(b, 0.5),
                             std::vector<double>(b, 0.7));
    p.l_tri.set_requires_grad(true);
    p.l_ce_sample.set_requires_grad(true);
    for (auto& t : p.l_ce_domain_per_module) t.set_requires_grad(true);
    for (auto& t : p.l_ce_camera_per_module) t.set_requires_grad(true);
    backward(total_loss(p));
    EXPECT_EQ(p.l_tri.grad()[0], 1.0);
    EXPECT_EQ(p.l_ce_sample.grad()[0], 1.0);
    for (auto& t : p.l_ce_domain_per_module) EXPECT_EQ(t.grad()[0], 1.0 / static_cast<double>(b));
    for (auto& t : p.l_ce_camera_per_module) EXPECT_EQ(t.grad()[0], 1.0 / static_cast<double>(b));
  }
}

}  // namespace
}  // namespace dcsd
