#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "revattn/weights_io.hpp"

namespace revattn {

struct FixtureTolerances {
  double logits_rel = 1e-5;
  double grad_rel = 1e-4;
  double ra_abs = 1e-5;
};

// Golden values for one (model, prompt, target). Tensor names:
//   weight.<native name>   model parameters
//   grad.<native name>     dL/dparameter
//   logits                 n x vocab
//   loss                   [1]
//   ra.<layer>.<head>      n x n
struct FixtureBundle {
  ModelConfig config;
  std::uint64_t seed = 0;
  FixtureTolerances tolerances;
  std::vector<int> token_ids;
  int target_id = 0;
  TensorMap tensors;
};

// manifest.json + tensors.bin (little-endian f32, row-major). Throws IoError
// or FixtureCorrupt.
FixtureBundle read_fixture(const std::filesystem::path& dir);
void write_fixture(const std::filesystem::path& dir, const FixtureBundle& bundle);

// Runs this engine on `weights` and records logits, loss, every gradient and
// every RA map (computed in f64).
FixtureBundle make_fixture(const ModelConfig& config, const ModelWeights<double>& weights,
                           std::vector<int> tokens, int target, std::uint64_t seed);

struct QuantityCheck {
  std::string name;
  double error = 0.0;
  double tolerance = 0.0;
  bool relative = true;
  bool pass = true;
};

struct FixtureReport {
  bool pass = true;
  std::vector<QuantityCheck> checks;
  std::vector<std::string> failures;  // names of failing tensors
};

// Recomputes everything in the bundle's dtype and compares. Logits use
// max|a - b| / max(max|b|, 1e-12) per tensor; gradients the same with the
// denominator floored at 1e-3 of the largest expected gradient entry; RA
// maps use the max absolute difference. Throws FixtureCorrupt when a
// required tensor is missing.
FixtureReport check_fixture(const FixtureBundle& bundle);

}  // namespace revattn
