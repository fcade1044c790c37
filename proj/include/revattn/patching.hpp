#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "revattn/perturbation.hpp"

namespace revattn {

enum class PatchSource { kReversedAttention, kForwardAttention };

const char* to_string(PatchSource source);
PatchSource parse_patch_source(std::string_view s);

// Per-head averaged maps for prompts of one fixed length n.
struct PatchBank {
  int n = 0;
  int n_layers = 0;
  int n_heads = 0;
  PatchSource source = PatchSource::kReversedAttention;
  int train_count = 0;
  std::vector<MatrixD> maps;  // layer-major, n x n each

  const MatrixD& map(int layer, int head) const {
    return maps.at(static_cast<std::size_t>(layer) * n_heads + head);
  }
  MatrixD& map(int layer, int head) { return maps.at(static_cast<std::size_t>(layer) * n_heads + head); }
};

// Elementwise mean of R (or A) per head over `train`. Throws EmptyInput, or
// LengthMismatch naming the first prompt whose length differs.
template <typename T>
PatchBank collect_patch_bank(const Model<T>& model, std::span<const Example> train, PatchSource source);

// Adds lr * bank map to each head's post-softmax attention. No renormalisation.
template <typename T>
class PatchHooks final : public ForwardHooks<T> {
 public:
  PatchHooks(const PatchBank& bank, double lr) : bank_(bank), lr_(lr) {}
  void attention(int layer, int head, Matrix<T>& probs) const override {
    probs += (static_cast<T>(lr_) * bank_.map(layer, head).template cast<T>());
  }

 private:
  const PatchBank& bank_;
  double lr_;
};

// Throws LengthMismatch unless tokens.size() == bank.n, ShapeMismatch when the
// bank grid does not match the model.
template <typename T>
Matrix<T> patched_forward(const Model<T>& model, std::span<const int> tokens, const PatchBank& bank,
                          double lr);

template <typename T>
EvalStats evaluate_patched(const Model<T>& model, std::span<const Example> examples,
                           const PatchBank& bank, double lr);

struct PatchingOptions {
  double lr_fa = 1.0;
  double lr_ra = -30.0;
  int train_count = 25;
  std::uint64_t seed = 0;
};

struct PatchingResult {
  int n = 0;  // common prompt length
  int train_used = 0;
  int test_used = 0;
  EvalStats original;
  EvalStats fa;
  EvalStats ra;
};

// Groups both pools by prompt length, picks the length with the most training
// examples (at most train_count counted; ties by seeded draw) among lengths
// present in both pools, then builds FA and RA banks from a seeded subset of
// up to train_count training prompts and evaluates all test prompts of that
// length. Throws InsufficientData when no length occurs in both pools.
template <typename T>
PatchingResult evaluate_patching(const Model<T>& model, std::span<const Example> train,
                                 std::span<const Example> test, const PatchingOptions& options = {});

struct SameLengthGroups {
  int n = 0;
  std::vector<Example> train;
  std::vector<Example> test;
};

SameLengthGroups select_same_length(std::span<const Example> train, std::span<const Example> test,
                                    int train_count, std::uint64_t seed);

}  // namespace revattn
