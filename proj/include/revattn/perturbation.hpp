#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "revattn/ra_analysis.hpp"

namespace revattn {

// true = active. Inactive heads contribute a zero matrix to Attn(X).
class HeadMask {
 public:
  HeadMask(int n_layers, int n_heads, bool active);

  static HeadMask all_active(const ModelConfig& c) { return {c.n_layers, c.n_heads, true}; }
  static HeadMask all_inactive(const ModelConfig& c) { return {c.n_layers, c.n_heads, false}; }

  int n_layers() const { return n_layers_; }
  int n_heads() const { return n_heads_; }
  bool active(int layer, int head) const { return bits_[index(layer, head)] != 0; }
  void set(int layer, int head, bool active) { bits_[index(layer, head)] = active ? 1 : 0; }
  bool all() const;
  int active_count() const;

 private:
  std::size_t index(int layer, int head) const;

  int n_layers_;
  int n_heads_;
  std::vector<char> bits_;
};

template <typename T>
class MaskHooks final : public ForwardHooks<T> {
 public:
  explicit MaskHooks(const HeadMask& mask) : mask_(mask) {}
  void head_output(int layer, int head, Matrix<T>& out) const override {
    if (!mask_.active(layer, head)) out.setZero();
  }

 private:
  const HeadMask& mask_;
};

// Throws ShapeMismatch when the mask grid does not match the model.
template <typename T>
Matrix<T> masked_forward(const Model<T>& model, std::span<const int> tokens, const HeadMask& mask);

struct EvalStats {
  double accuracy = 0.0;          // correct / evaluated
  double mean_target_prob = 0.0;  // over evaluated examples
  int correct = 0;
  int evaluated = 0;
  int skipped = 0;  // prompts longer than max_seq_len
  double skip_ratio() const {
    const int total = evaluated + skipped;
    return total == 0 ? 0.0 : static_cast<double>(skipped) / total;
  }
};

// Argmax next-token accuracy. `hooks` may be null. Prompts that do not fit
// max_seq_len are skipped and counted.
template <typename T>
EvalStats evaluate(const Model<T>& model, std::span<const Example> examples,
                   const ForwardHooks<T>* hooks = nullptr);

template <typename T>
EvalStats accuracy(const Model<T>& model, std::span<const Example> examples, const HeadMask& mask);

struct PerturbationCurve {
  std::vector<double> fractions;   // 0 .. 1, strictly increasing
  std::vector<double> accuracies;  // same length
};

// ceil(1% of the head count), at least 1.
int default_step(int total_heads);

// Accuracy with no head active, then after unmasking each successive chunk of
// `step` heads of `ordering`, through all heads.
template <typename T>
PerturbationCurve perturbation_curve(const Model<T>& model, const HeadOrdering& ordering,
                                     std::span<const Example> examples, int step);

// Trapezoidal area over the fraction axis. Throws InvalidConfig on a
// malformed curve.
double auc(const PerturbationCurve& curve);

struct CmOptions {
  // Leave the final prompt position untouched during the intervention.
  bool skip_last_position = false;
};

// Mean of p_clean(target) - p_intervened(target) with one head zeroed.
template <typename T>
HeadScoreMap cm1_scores(const Model<T>& model, std::span<const Example> examples,
                        const CmOptions& options = {});

// As cm1_scores, but the head's output is replaced by its position-wise mean
// over `heldout`. All prompts must share one length (LengthMismatch).
template <typename T>
HeadScoreMap cm2_scores(const Model<T>& model, std::span<const Example> examples,
                        std::span<const Example> heldout, const CmOptions& options = {});

struct BaselineOrderings {
  HeadOrdering random;
  HeadOrdering index;
};

BaselineOrderings baseline_orderings(int n_layers, int n_heads, std::uint64_t seed);

// Exactly the reverse sequence of `ordering`.
HeadOrdering reversed(const HeadOrdering& ordering);

}  // namespace revattn
