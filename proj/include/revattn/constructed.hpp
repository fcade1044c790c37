#pragma once

#include <cstdint>
#include <optional>

#include "revattn/ra_analysis.hpp"
#include "revattn/tasks.hpp"
#include "revattn/tokenizer.hpp"

namespace revattn {

// Hand-wired 2-layer copy model (no layer norm, zero MLPs). Prompts have the
// form "Q: w1 w2 w3 w4\nA:" over the letters a..h and the answer is w2.
//
// Residual layout (d = 96): token one-hot in dims 0..15, position one-hot in
// 16..23, answer channel in 24..31; the rest only carries pass-through noise.
// The unembedding reads the answer channel and, from the "A:" token dim,
// a fixed logit for the fallback answer " ?".
//
// The critical head attends from "A:" to position 2 with a mild preference
// and copies the candidate letter into the answer channel with a large gain;
// on its own it answers correctly unless a distractor letter repeats. The
// optional support head attends sharply to position 2 with a small gain,
// insufficient alone. All other heads have random Q/K/V and a tiny output.
struct ConstructedOptions {
  std::uint64_t seed = 0;
  bool support_head = true;
  double critical_gain = 10.0;
  double critical_preference = 1.5;  // exp(score) at position 2, others 1
  double support_gain = 1.2;
  double support_preference = 20.0;
  double fallback_logit = 1.0;
  double passthrough_qkv_scale = 0.3;
  double passthrough_out_scale = 1e-3;
};

struct ConstructedModel {
  ModelConfig config;
  ModelWeights<double> weights;
  Tokenizer tokenizer;
  HeadId critical;
  std::optional<HeadId> support;
};

inline constexpr int kConstructedLetters = 8;
inline constexpr int kConstructedPromptLength = 7;

ConstructedModel build_constructed_model(const ConstructedOptions& options = {});

Tokenizer constructed_tokenizer();

// `pairs` questions "w1 w2 w3 w4" with letters drawn uniformly (with
// replacement) from a..h and answer w2.
TaskSet constructed_task(std::uint64_t seed, int pairs = 90);

}  // namespace revattn
