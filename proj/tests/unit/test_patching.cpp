#include <gtest/gtest.h>

#include "copy_model.hpp"
#include "helpers.hpp"
#include "revattn/patching.hpp"

using namespace revattn;

namespace {

std::vector<Example> same_length(const ModelConfig& c, int count, int n, std::uint64_t seed) {
  std::vector<Example> out;
  for (int i = 0; i < count; ++i) out.push_back({test::random_tokens(c, n, seed + i), i % c.vocab_size, ""});
  return out;
}

}  // namespace

TEST(Bank, MeanOfMaps) {
  const auto c = test::tiny_config();
  const auto m = test::random_model(c, 1);
  const auto ex = same_length(c, 3, 4, 10);
  const auto bank = collect_patch_bank(m, std::span<const Example>(ex), PatchSource::kReversedAttention);
  EXPECT_EQ(bank.n, 4);
  EXPECT_EQ(bank.train_count, 3);
  MatrixD sum = MatrixD::Zero(4, 4);
  for (const auto& e : ex) sum += run_reversed_attention(m, e.prompt, e.target).backward.ra(1, 0);
  EXPECT_TRUE(bank.map(1, 0).isApprox(sum / 3, 1e-14));

  const auto fa = collect_patch_bank(m, std::span<const Example>(ex), PatchSource::kForwardAttention);
  EXPECT_NEAR(fa.map(0, 1).row(2).sum(), 1.0, 1e-12);
}

TEST(Bank, SingleExampleIsItsOwnMap) {
  const auto c = test::tiny_config();
  const auto m = test::random_model(c, 1);
  const auto ex = same_length(c, 1, 5, 3);
  const auto bank = collect_patch_bank(m, std::span<const Example>(ex), PatchSource::kReversedAttention);
  EXPECT_EQ(bank.map(0, 0), run_reversed_attention(m, ex[0].prompt, ex[0].target).backward.ra(0, 0));
}

TEST(Bank, Errors) {
  const auto c = test::tiny_config();
  const auto m = test::random_model(c, 1);
  auto ex = same_length(c, 3, 4, 10);
  ex[2].prompt.push_back(1);
  ex[2].label = "odd-one";
  try {
    collect_patch_bank(m, std::span<const Example>(ex), PatchSource::kReversedAttention);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kLengthMismatch);
    EXPECT_NE(std::string(e.what()).find("odd-one"), std::string::npos);
  }
  EXPECT_THROW(collect_patch_bank(m, std::span<const Example>{}, PatchSource::kReversedAttention), Error);
}

TEST(Patch, ZeroRateIsIdentity) {
  const auto c = test::tiny_config();
  const auto m = test::random_model(c, 2);
  const auto ex = same_length(c, 4, 5, 1);
  const auto bank = collect_patch_bank(m, std::span<const Example>(ex), PatchSource::kReversedAttention);
  const auto ids = test::random_tokens(c, 5, 77);
  EXPECT_EQ(patched_forward(m, ids, bank, 0.0), model_forward(m, ids).logits);
}

TEST(Patch, ZeroBankIsIdentity) {
  const auto c = test::tiny_config();
  const auto m = test::random_model(c, 2);
  const auto ex = same_length(c, 2, 5, 1);
  auto bank = collect_patch_bank(m, std::span<const Example>(ex), PatchSource::kReversedAttention);
  for (auto& x : bank.maps) x.setZero();
  const auto ids = test::random_tokens(c, 5, 77);
  EXPECT_EQ(patched_forward(m, ids, bank, -30.0), model_forward(m, ids).logits);
}

TEST(Patch, AddsWithoutRenormalising) {
  const auto c = test::tiny_config(1, 2, 8, 6, LnMode::kNone);
  const auto m = test::random_model(c, 3);
  PatchBank bank{3, 1, 2, PatchSource::kReversedAttention, 1, {MatrixD::Zero(3, 3), MatrixD::Zero(3, 3)}};
  bank.map(0, 1)(2, 0) = 1.0;
  const auto ids = test::random_tokens(c, 3, 4);
  const PatchHooks<double> hooks(bank, 0.25);
  const auto t = model_forward(m, ids, &hooks);
  const auto clean = model_forward(m, ids);
  const auto& patched = t.layers[0].heads[1].attn;
  EXPECT_NEAR(patched.row(2).sum(), 1.25, 1e-14);
  EXPECT_NEAR(patched(2, 0), clean.layers[0].heads[1].attn(2, 0) + 0.25, 1e-15);
  EXPECT_EQ(t.layers[0].heads[0].attn, clean.layers[0].heads[0].attn);
}

TEST(Patch, OppositeBanksCancel) {
  const auto c = test::tiny_config();
  const auto m = test::random_model(c, 2);
  const auto ex = same_length(c, 3, 5, 1);
  const auto bank = collect_patch_bank(m, std::span<const Example>(ex), PatchSource::kReversedAttention);
  auto doubled = bank;
  for (auto& x : doubled.maps) x *= 2.0;
  const auto ids = test::random_tokens(c, 5, 9);
  EXPECT_TRUE(patched_forward(m, ids, bank, -2.0).isApprox(patched_forward(m, ids, doubled, -1.0), 1e-13));
}

TEST(Patch, Errors) {
  const auto c = test::tiny_config();
  const auto m = test::random_model(c, 2);
  const auto ex = same_length(c, 2, 5, 1);
  const auto bank = collect_patch_bank(m, std::span<const Example>(ex), PatchSource::kReversedAttention);
  try {
    patched_forward(m, test::random_tokens(c, 4, 1), bank, 1.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kLengthMismatch);
  }
  const auto other = test::random_model(test::tiny_config(3, 2), 1);
  EXPECT_THROW(patched_forward(other, test::random_tokens(c, 5, 1), bank, 1.0), Error);
}

TEST(Patch, SourceNames) {
  EXPECT_EQ(parse_patch_source("ra"), PatchSource::kReversedAttention);
  EXPECT_EQ(parse_patch_source(to_string(PatchSource::kForwardAttention)), PatchSource::kForwardAttention);
  EXPECT_THROW(parse_patch_source("xx"), Error);
}

TEST(Patch, NegativeRateImprovesCopyModel) {
  const auto s = test::copy_setup(5);
  const auto sub = extraction_subset(s.examples.train, 25, 5);
  const auto bank = collect_patch_bank(s.model, std::span<const Example>(sub), PatchSource::kReversedAttention);
  const auto& test = s.examples.test;
  const auto before = evaluate<double>(s.model, test);
  const auto after = evaluate_patched(s.model, std::span<const Example>(test), bank, -1.0);
  EXPECT_GT(after.mean_target_prob, before.mean_target_prob);
}

TEST(SameLength, PicksSharedLength) {
  auto mk = [](int n) { return Example{std::vector<int>(static_cast<std::size_t>(n), 0), 0, ""}; };
  std::vector<Example> train{mk(3), mk(3), mk(3), mk(4), mk(4), mk(5)};
  std::vector<Example> test{mk(4), mk(5), mk(5), mk(6)};
  const auto g = select_same_length(train, test, 25, 1);
  EXPECT_EQ(g.n, 4);
  EXPECT_EQ(g.train.size(), 2u);
  EXPECT_EQ(g.test.size(), 1u);
  const auto capped = select_same_length(train, test, 1, 1);
  EXPECT_EQ(capped.train.size(), 1u);
  std::vector<Example> none{mk(7)};
  try {
    select_same_length(train, none, 25, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kInsufficientData);
  }
}

TEST(Evaluation, EndToEnd) {
  const auto s = test::copy_setup(6);
  PatchingOptions o;
  o.seed = 6;
  const auto r = evaluate_patching(s.model, std::span<const Example>(s.examples.train),
                                   std::span<const Example>(s.examples.test), o);
  EXPECT_EQ(r.n, kConstructedPromptLength);
  EXPECT_EQ(r.train_used, 25);
  EXPECT_EQ(r.test_used, static_cast<int>(s.examples.test.size()));
  EXPECT_GE(r.ra.accuracy, r.original.accuracy);
}
