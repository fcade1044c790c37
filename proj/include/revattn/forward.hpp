#pragma once

#include <span>
#include <vector>

#include "revattn/model.hpp"

namespace revattn {

template <typename T>
using ColVector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <typename T>
struct LayerNormTrace {
  ColVector<T> mean;  // per position
  ColVector<T> rstd;  // 1 / sqrt(var + eps), per position
};

template <typename T>
struct HeadTrace {
  Matrix<T> q, k, v;      // n x d/h
  Matrix<T> scores;       // n x n, scaled QK^T plus the additive mask
  Matrix<T> attn;         // n x n, row-stochastic and lower triangular
  Matrix<T> attn_values;  // n x d/h, A V (the input of the output head)
  Matrix<T> out;          // n x d, A V W_o^head
};

template <typename T>
struct LayerTrace {
  Matrix<T> input;       // X^i
  Matrix<T> attn_input;  // LN1(X^i), or X^i when ln_mode = none
  LayerNormTrace<T> ln1;
  std::vector<HeadTrace<T>> heads;
  Matrix<T> attn_out;   // sum of heads plus output bias
  Matrix<T> mid;        // X^i + Attn
  Matrix<T> mlp_input;  // LN2(mid), or mid
  LayerNormTrace<T> ln2;
  Matrix<T> mlp_pre;  // mlp_input FF1 + b
  Matrix<T> mlp_act;  // gelu(mlp_pre)
  Matrix<T> mlp_out;
  Matrix<T> output;  // X^{i+1}
};

template <typename T>
struct ForwardTrace {
  std::vector<int> tokens;
  Matrix<T> embedded;
  std::vector<LayerTrace<T>> layers;
  LayerNormTrace<T> ln_final;
  Matrix<T> final_normed;
  Matrix<T> logits;  // n x vocab
  // Set when hooks were supplied; such a trace is not a valid input to the
  // backward pass.
  bool intervened = false;
};

// Interception points inside the attention computation. The default
// implementations leave everything untouched.
template <typename T>
class ForwardHooks {
 public:
  virtual ~ForwardHooks() = default;
  // Post-softmax attention probabilities of one head, before they multiply V.
  virtual void attention(int /*layer*/, int /*head*/, Matrix<T>& /*probs*/) const {}
  // Output of one head (n x d), before it is summed into Attn(X).
  virtual void head_output(int /*layer*/, int /*head*/, Matrix<T>& /*out*/) const {}
};

// Additive mask constant applied above the diagonal before the softmax.
template <typename T>
constexpr T mask_value() {
  if constexpr (sizeof(T) <= 4) {
    return T(-1e9);
  } else {
    return T(-1e30);
  }
}

template <typename T>
T gelu(T x);
template <typename T>
T gelu_derivative(T x);

void validate_tokens(const ModelConfig& config, std::span<const int> tokens);

template <typename T>
Matrix<T> embed(const ModelConfig& config, const ModelWeights<T>& weights,
                std::span<const int> tokens);

template <typename T>
Matrix<T> layer_norm(const Matrix<T>& x, const LayerNormParams<T>& p, double eps,
                     LayerNormTrace<T>* trace);

template <typename T>
HeadTrace<T> attention_head_forward(const Matrix<T>& x, const LayerWeights<T>& layer,
                                    const ModelConfig& config, int layer_index, int head,
                                    const ForwardHooks<T>* hooks = nullptr);

template <typename T>
LayerTrace<T> block_forward(const Matrix<T>& x, const LayerWeights<T>& layer,
                            const ModelConfig& config, int layer_index,
                            const ForwardHooks<T>* hooks = nullptr);

template <typename T>
ForwardTrace<T> model_forward(const Model<T>& model, std::span<const int> tokens,
                              const ForwardHooks<T>* hooks = nullptr);

struct LossAndGrad {
  double loss = 0.0;
  MatrixD dlogits;  // n x vocab; only the last row is non-zero
};

// Cross-entropy of the last position's softmax against `target`.
template <typename T>
LossAndGrad loss_and_logit_grad(const Matrix<T>& logits, int target);

// Softmax probability of `target` at the last position, computed in double.
template <typename T>
double target_probability(const Matrix<T>& logits, int target);

// Index of the largest last-row logit; ties go to the lowest index.
template <typename T>
int argmax_last(const Matrix<T>& logits);

}  // namespace revattn
