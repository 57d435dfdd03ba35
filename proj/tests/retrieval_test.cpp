#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "dcsd/error.hpp"
#include "dcsd/retrieval.hpp"
#include "json.hpp"
#include "retrieval_sweep.hpp"

namespace dcsd {
namespace {

// 1-D embeddings make hand-built rankings easy: distance = |q - g|.
Tensor line(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor({n, 1}, std::move(v));
}

TEST(Evaluate, PerfectSingleQuery) {
  const auto r = evaluate(line({0.0}), {{1, 0}}, line({0.1, 0.5, 0.9}), {{1, 1}, {2, 1}, {3, 0}}, true);
  EXPECT_DOUBLE_EQ(r.rank(1), 1.0);
  EXPECT_DOUBLE_EQ(r.map, 1.0);
  EXPECT_EQ(r.excluded_queries, 0u);
}

TEST(Evaluate, HandComputedAveragePrecision) {
  // relevant at ranks 1 and 3 of 5
  const auto r = evaluate(line({0.0}), {{7, 0}}, line({0.1, 0.2, 0.3, 0.4, 0.5}),
                          {{7, 1}, {1, 1}, {7, 2}, {2, 1}, {3, 1}}, true);
  EXPECT_NEAR(r.map, (1.0 / 1.0 + 2.0 / 3.0) / 2.0, 1e-15);
  EXPECT_DOUBLE_EQ(r.rank(1), 1.0);
}

TEST(Evaluate, SameCameraOnlyMatchIsExcludedUnderCrossCamera) {
  const Tensor q = line({0.0}), g = line({0.1, 0.2});
  const std::vector<RetrievalItem> qi{{5, 2}}, gi{{5, 2}, {6, 1}};
  const auto cross = evaluate(q, qi, g, gi, true);
  EXPECT_EQ(cross.excluded_queries, 1u);
  EXPECT_TRUE(std::isnan(cross.per_query_ap[0]));
  EXPECT_DOUBLE_EQ(cross.map, 0.0);
  const auto same = evaluate(q, qi, g, gi, false);
  EXPECT_EQ(same.excluded_queries, 0u);
  EXPECT_DOUBLE_EQ(same.rank(1), 1.0);
}

TEST(Evaluate, JunkIsRemovedNotMarkedIrrelevant) {
  // same-pid same-camera item ranked first is skipped, so the cross-camera
  // match becomes rank 1
  const auto r = evaluate(line({0.0}), {{1, 0}}, line({0.1, 0.2}), {{1, 0}, {1, 1}}, true);
  EXPECT_DOUBLE_EQ(r.rank(1), 1.0);
  EXPECT_DOUBLE_EQ(r.map, 1.0);
}

TEST(Evaluate, TiesOrderedByGalleryIndex) {
  // wrong pid at index 0 and right pid at index 1 are equidistant
  const auto r = evaluate(line({0.0}), {{1, 0}}, line({0.5, 0.5}), {{2, 1}, {1, 1}}, true);
  EXPECT_DOUBLE_EQ(r.rank(1), 0.0);
  EXPECT_DOUBLE_EQ(r.rank(2), 1.0);
  EXPECT_DOUBLE_EQ(r.map, 0.5);
}

TEST(Evaluate, IrrelevantItemRankedLastNeverHelps) {
  Rng rng(2);
  for (int t = 0; t < 30; ++t) {
    std::vector<double> qv(5), gv(20);
    for (double& v : qv) v = rng.uniform(-1, 1);
    for (double& v : gv) v = rng.uniform(-1, 1);
    std::vector<RetrievalItem> qi(5), gi(20);
    for (auto& it : qi) it = {static_cast<std::int64_t>(rng.index(4)), static_cast<std::int64_t>(rng.index(3))};
    for (auto& it : gi) it = {static_cast<std::int64_t>(rng.index(4)), static_cast<std::int64_t>(rng.index(3))};
    const auto before = evaluate(line(qv), qi, line(gv), gi, true);
    gv.push_back(100.0);
    gi.push_back({999, 0});
    const auto after = evaluate(line(qv), qi, line(gv), gi, true);
    EXPECT_LE(after.map, before.map + 1e-15);
    EXPECT_DOUBLE_EQ(after.rank(1), before.rank(1));
  }
}

TEST(Evaluate, CmcMonotoneAndCompleteAtFullDepth) {
  Rng rng(3);
  std::vector<double> qv(10), gv(40);
  for (double& v : qv) v = rng.uniform(-1, 1);
  for (double& v : gv) v = rng.uniform(-1, 1);
  std::vector<RetrievalItem> qi(10), gi(40);
  for (auto& it : qi) it = {static_cast<std::int64_t>(rng.index(5)), static_cast<std::int64_t>(rng.index(3))};
  for (auto& it : gi) it = {static_cast<std::int64_t>(rng.index(5)), static_cast<std::int64_t>(rng.index(3))};
  const auto r = evaluate(line(qv), qi, line(gv), gi, true);
  for (std::size_t k = 1; k < r.cmc.size(); ++k) EXPECT_GE(r.cmc[k], r.cmc[k - 1]);
  EXPECT_DOUBLE_EQ(r.cmc.back(), r.num_query > r.excluded_queries ? 1.0 : 0.0);
  EXPECT_GE(r.map, 0.0);
  EXPECT_LE(r.map, 1.0);
}

TEST(Evaluate, DimensionMismatchIsShapeError) {
  EXPECT_THROW(evaluate(Tensor({1, 2}, 0.0), {{0, 0}}, Tensor({1, 3}, 0.0), {{0, 1}}, true), ShapeError);
  EXPECT_THROW(evaluate(Tensor({1, 2}, 0.0), {{0, 0}, {1, 1}}, Tensor({1, 2}, 0.0), {{0, 1}}, true), ShapeError);
}

TEST(Evaluate, MatchesBruteOracleOnRandomInstances) {
  const auto r = testing::run_retrieval_sweep(60, 31);
  EXPECT_EQ(r.instances, 60);
  EXPECT_GT(r.single_camera_instances, 0);
  EXPECT_GT(r.instances_with_exclusions, 0);
  EXPECT_GT(r.instances_with_ties, 0);
  EXPECT_TRUE(r.structure_equal);
  EXPECT_LE(r.max_abs_diff, 1e-12);
}

TEST(Evaluate, SingleCameraCorpusFlagBehaviour) {
  // every gallery item shares the query camera: cross-camera excludes all
  const Tensor q = line({0.0, 1.0}), g = line({0.1, 0.9, 0.5});
  const std::vector<RetrievalItem> qi{{1, 0}, {2, 0}}, gi{{1, 0}, {2, 0}, {3, 0}};
  const auto on = evaluate(q, qi, g, gi, true), off = evaluate(q, qi, g, gi, false);
  EXPECT_EQ(on.excluded_queries, 2u);
  EXPECT_EQ(off.excluded_queries, 0u);
  EXPECT_DOUBLE_EQ(off.rank(1), 1.0);
  EXPECT_FALSE(off.cross_camera);
}

TEST(Report, JsonHasProtocolFields) {
  const auto r = evaluate(line({0.0}), {{1, 0}}, line({0.1}), {{1, 1}}, true);
  const auto j = nlohmann::json::parse(report_to_json(r));
  for (const char* key : {"rank1", "rank5", "rank10", "map", "num_query", "num_gallery", "excluded_queries", "protocol"})
    EXPECT_TRUE(j.contains(key)) << key;
  EXPECT_EQ(j["protocol"]["cross_camera"], true);
  std::ostringstream os;
  write_per_query_csv(os, r, {{1, 0}});
  EXPECT_EQ(os.str(), "query,pid,camera,ap,first_match_rank\n0,1,0,1,1\n");
}

class Extraction : public ::testing::Test {
 protected:
  static Corpus corpus() {
    DomainSpec d;
    d.num_cameras = 2;
    d.num_identities = 6;
    d.images_per_identity_per_camera = 2;
    return generate_synthetic({d}, {}, 4);
  }
};

TEST_F(Extraction, UnitRowsDeterministicAndBatchIndependent) {
  const Corpus c = corpus();
  Model m(tinynet_spec(true, 3, 1, 2), 7);
  std::vector<std::size_t> idx(c.samples.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  {
    // settle BN running statistics so eval features have a realistic scale
    NoGradGuard no_grad;
    const Tensor x = stack_images(c, idx);
    for (int i = 0; i < 40; ++i) m.forward(x, Mode::train);
  }
  const Tensor whole = extract_embeddings(m, c, idx, 1000);
  const Tensor split = extract_embeddings(m, c, idx, 5);
  const std::size_t d = whole.dim(1);
  for (std::size_t i = 0; i < whole.dim(0); ++i) {
    double sq = 0.0;
    for (std::size_t j = 0; j < d; ++j) sq += whole[i * d + j] * whole[i * d + j];
    EXPECT_NEAR(std::sqrt(sq), 1.0, 1e-12);
  }
  for (std::size_t i = 0; i < whole.numel(); ++i) EXPECT_NEAR(whole[i], split[i], 1e-12);
  const Tensor dup = extract_embeddings(m, c, {3, 3}, 2);
  for (std::size_t j = 0; j < d; ++j) EXPECT_EQ(dup[j], dup[d + j]);
  EXPECT_THROW(extract_embeddings(m, c, {}, 4), ShapeError);
}

}  // namespace
}  // namespace dcsd
