#pragma once

#include <vector>

#include "revattn/gradcheck.hpp"

namespace revattn::test {

inline ModelConfig tiny_config(int layers = 2, int heads = 2, int d = 8, int n = 6,
                               LnMode ln = LnMode::kPreLn) {
  ModelConfig c;
  c.n_layers = layers;
  c.n_heads = heads;
  c.d_model = d;
  c.d_mlp = 2 * d;
  c.vocab_size = 11;
  c.max_seq_len = n;
  c.ln_mode = ln;
  c.dtype = DType::kF64;
  return c;
}

template <typename T = double>
Model<T> random_model(const ModelConfig& c, std::uint64_t seed, RandomInit init = {}) {
  Rng rng(seed);
  return Model<T>(c, random_weights<T>(c, rng, init));
}

inline std::vector<int> random_tokens(const ModelConfig& c, int n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<int> t(static_cast<std::size_t>(n));
  for (auto& x : t) x = static_cast<int>(rng.index(static_cast<std::size_t>(c.vocab_size)));
  return t;
}

}  // namespace revattn::test
