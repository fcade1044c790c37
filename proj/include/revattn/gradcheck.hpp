#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "revattn/backward.hpp"
#include "revattn/rng.hpp"

namespace revattn {

struct RandomInit {
  double weight_scale = 0.5;
  double bias_scale = 0.1;
  double ln_jitter = 0.2;  // gains are 1 + jitter * N(0, 1)
};

template <typename T>
ModelWeights<T> random_weights(const ModelConfig& config, Rng& rng, const RandomInit& init = {});

struct FdOptions {
  double eps = 1e-5;
  int samples = 200;
  int seq_len = 0;  // 0 means max_seq_len
  // The key bias shifts every score of a row by the same amount, which the
  // softmax ignores; its gradient is identically zero and the analytic value
  // is pure rounding, so it is left out of the relative-error sample.
  bool include_key_bias = false;
  RandomInit init;
};

struct FdSample {
  std::string tensor;
  long index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct FdReport {
  double max_rel_error = 0.0;
  FdSample worst;
  int samples = 0;
  std::vector<std::string> tensors_covered;
};

// Central differences (L(w + eps) - L(w - eps)) / 2 eps against the analytic
// gradient, on coordinates sampled from every tensor. The relative error of a
// coordinate is |analytic - numeric| / max(|analytic|, 1e-8).
FdReport finite_difference_check(const Model<double>& model, std::span<const int> tokens, int target,
                                 Rng& rng, const FdOptions& options = {});

// Builds a seeded random f64 model, input and target for `config`, then runs
// the check above.
FdReport finite_difference_check(ModelConfig config, std::uint64_t seed, const FdOptions& options = {});

}  // namespace revattn
