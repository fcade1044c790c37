#include "revattn/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "quad.hpp"

namespace revattn {

template <typename T>
ModelWeights<T> random_weights(const ModelConfig& config, Rng& rng, const RandomInit& init) {
  auto w = ModelWeights<T>::zeros(config);
  for_each_tensor(w, [&](const std::string& name, auto& t) {
    const bool is_gain = name.ends_with(".gain");
    const bool is_bias = t.rows() == 1 && !is_gain;
    for (Eigen::Index i = 0; i < t.rows(); ++i) {
      for (Eigen::Index j = 0; j < t.cols(); ++j) {
        const double z = rng.normal();
        double v;
        if (is_gain) {
          v = 1.0 + init.ln_jitter * z;
        } else if (is_bias) {
          v = init.bias_scale * z;
        } else {
          v = init.weight_scale * z;
        }
        t(i, j) = static_cast<T>(v);
      }
    }
  });
  return w;
}

namespace {

// Probe losses are evaluated in quad precision so that rounding in the
// forward pass does not swamp the difference quotient.
using Wide = Quad;

struct TensorRef {
  std::string name;
  Wide* data;
  long size;
  long cols;
};


Wide loss_of(const Model<Wide>& model, std::span<const int> tokens, int target) {
  const auto trace = model_forward(model, tokens);
  const auto last = trace.logits.row(trace.logits.rows() - 1);
  const Wide mx = last.maxCoeff();
  const Wide z = (last.array() - mx).exp().sum();
  return -(last(target) - mx - log(z));
}

}  // namespace

FdReport finite_difference_check(const Model<double>& model, std::span<const int> tokens, int target,
                                 Rng& rng, const FdOptions& options) {
  const auto run = run_reversed_attention(model, tokens, target);
  const ModelWeights<double>& analytic = *run.backward.grads;

  Model<Wide> probe(model.config(), model.weights().cast<Wide>());
  std::vector<TensorRef> params;
  auto sampled = [&](const std::string& name) {
    return options.include_key_bias || !name.ends_with(".b_k");
  };
  for_each_tensor(probe.mutable_weights(), [&](const std::string& name, auto& t) {
    if (sampled(name)) {
      params.push_back({name, t.data(), static_cast<long>(t.size()), static_cast<long>(t.cols())});
    }
  });
  std::vector<const double*> grads;
  for_each_tensor(analytic, [&](const std::string& name, const auto& t) {
    if (sampled(name)) grads.push_back(t.data());
  });

  const long n = static_cast<long>(tokens.size());
  FdReport report;
  const int per_tensor = std::max(1, (options.samples + static_cast<int>(params.size()) - 1) /
                                         static_cast<int>(params.size()));
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& ref = params[p];
    report.tensors_covered.push_back(ref.name);
    for (int s = 0; s < per_tensor; ++s) {
      long idx;
      // Embedding rows that the input never touches have an identically zero
      // gradient; sample rows that are actually used.
      if (ref.name == "token_embedding") {
        idx = static_cast<long>(tokens[rng.index(tokens.size())]) * ref.cols +
              static_cast<long>(rng.index(ref.cols));
      } else if (ref.name == "positional_embedding") {
        idx = static_cast<long>(rng.index(n)) * ref.cols + static_cast<long>(rng.index(ref.cols));
      } else {
        idx = static_cast<long>(rng.index(ref.size));
      }
      const Wide original = ref.data[idx];
      const Wide eps = options.eps;
      ref.data[idx] = original + eps;
      const Wide up = loss_of(probe, tokens, target);
      ref.data[idx] = original - eps;
      const Wide down = loss_of(probe, tokens, target);
      ref.data[idx] = original;

      FdSample sample;
      sample.tensor = ref.name;
      sample.index = idx;
      sample.analytic = grads[p][idx];
      sample.numeric = static_cast<double>((up - down) / (2 * eps));
      sample.rel_error =
          std::abs(sample.analytic - sample.numeric) / std::max(std::abs(sample.analytic), 1e-8);
      ++report.samples;
      if (sample.rel_error > report.max_rel_error || report.samples == 1) {
        report.max_rel_error = sample.rel_error;
        report.worst = sample;
      }
    }
  }
  return report;
}

FdReport finite_difference_check(ModelConfig config, std::uint64_t seed, const FdOptions& options) {
  config.dtype = DType::kF64;
  config.validate();
  Rng rng(seed);
  Model<double> model(config, random_weights<double>(config, rng, options.init));
  const int n = options.seq_len > 0 ? options.seq_len : config.max_seq_len;
  std::vector<int> tokens(n);
  for (auto& t : tokens) t = static_cast<int>(rng.index(config.vocab_size));
  const int target = static_cast<int>(rng.index(config.vocab_size));
  return finite_difference_check(model, tokens, target, rng, options);
}

template ModelWeights<float> random_weights<float>(const ModelConfig&, Rng&, const RandomInit&);
template ModelWeights<double> random_weights<double>(const ModelConfig&, Rng&, const RandomInit&);

}  // namespace revattn
