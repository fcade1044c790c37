#include <gtest/gtest.h>

#include <set>

#include "copy_model.hpp"

using namespace revattn;

TEST(Methods, Names) {
  for (auto m : all_methods()) EXPECT_EQ(parse_method(to_string(m)), m);
  EXPECT_THROW(parse_method("grad"), Error);
  EXPECT_EQ(all_methods().size(), 6u);
}

TEST(Seeds, StreamsDiffer) {
  std::set<std::uint64_t> seen;
  for (auto s : {SeedStream::kShots, SeedStream::kRandomOrder, SeedStream::kExtraction, SeedStream::kPatchGroup}) {
    seen.insert(stream_seed(7, s));
  }
  EXPECT_EQ(seen.size(), 4u);
  EXPECT_EQ(stream_seed(7, SeedStream::kShots), stream_seed(7, SeedStream::kShots));
}

TEST(Extraction, SubsetKeepsPoolOrder) {
  std::vector<Example> pool;
  for (int i = 0; i < 10; ++i) pool.push_back({{i}, i, std::to_string(i)});
  const auto sub = extraction_subset(pool, 4, 1);
  ASSERT_EQ(sub.size(), 4u);
  for (std::size_t i = 1; i < sub.size(); ++i) EXPECT_LT(sub[i - 1].target, sub[i].target);
  EXPECT_EQ(extraction_subset(pool, 50, 1).size(), 10u);
}

TEST(Perturb, FullReport) {
  const auto s = test::copy_setup(7);
  PerturbOptions o;
  o.seed = 7;
  o.step = 2;
  const auto r = run_perturbation(s.model, s.examples, o);
  EXPECT_TRUE(r.warnings.empty());
  ASSERT_EQ(r.runs.size(), 12u);
  for (const auto& run : r.runs) {
    EXPECT_EQ(run.curve.accuracies.back(), r.baseline.accuracy) << to_string(run.method);
    EXPECT_EQ(run.curve.fractions.size(), 13u);
    require_permutation(run.ordering, 2, 12);
  }
  const auto& ra = r.runs.front();
  EXPECT_EQ(ra.method, Method::kRa);
  EXPECT_EQ(ra.direction, Direction::kForward);
  EXPECT_EQ(ra.ordering.heads.front(), s.built.critical);
  EXPECT_EQ(r.runs[1].direction, Direction::kReversed);
  EXPECT_GT(ra.auc, r.runs[1].auc);
}

TEST(Perturb, FloatModelRuns) {
  const auto s = test::copy_setup(8);
  const Model<float> mf(s.built.config, s.built.weights.cast<float>());
  PerturbOptions o;
  o.methods = {Method::kRa, Method::kIndex};
  const auto r = run_perturbation(mf, s.examples, o);
  ASSERT_EQ(r.runs.size(), 4u);
  EXPECT_EQ(r.runs[0].ordering.heads.front(), s.built.critical);
}

TEST(Perturb, Cm2WithoutHeldoutWarns) {
  const auto s = test::copy_setup(9);
  TaskExamples few{{s.examples.train.begin(), s.examples.train.begin() + 3}, s.examples.test};
  PerturbOptions o;
  o.methods = {Method::kCm2};
  o.extraction_count = 25;
  const auto r = run_perturbation(s.model, few, o);
  EXPECT_TRUE(r.runs.empty());
  EXPECT_EQ(r.warnings.size(), 1u);
}
