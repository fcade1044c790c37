#pragma once

#include <optional>
#include <span>
#include <vector>

#include "revattn/forward.hpp"

namespace revattn {

// Reverse-mode quantities of one attention head. All matrices are double
// precision regardless of the forward dtype.
struct HeadBackward {
  MatrixD E;        // n x d/h, rows e^l = delta_o^l W_o^T
  MatrixD E_tilde;  // n x n, E V^T
  MatrixD R;        // n x n, Reversed Attention: dL / d(Q K^T), unscaled product
  MatrixD delta_q;  // n x d/h
  MatrixD delta_k;  // n x d/h
  MatrixD delta_v;  // n x d/h
};

struct LayerBackward {
  // VJP at the attention block output. Attn(X) is a plain sum of heads, so
  // every head of the layer receives this same matrix as its delta_o.
  MatrixD delta_o;
  std::vector<HeadBackward> heads;
  MatrixD d_input;  // VJP into X^i
};

struct BackwardOptions {
  // Skip parameter gradients when only VJPs and RA maps are needed; this
  // avoids materialising a d x vocab unembedding gradient.
  bool weight_gradients = true;
};

struct BackwardResult {
  std::vector<LayerBackward> layers;
  MatrixD d_embedded;
  std::optional<ModelWeights<double>> grads;

  const MatrixD& ra(int layer, int head) const { return layers.at(layer).heads.at(head).R; }
};

// ---- single-head operations ----

struct OutputProjVjp {
  MatrixD delta_o;    // n x d
  MatrixD grad_w_o;   // d/h x d, same shape as the output head
};

// delta_o is the incoming residual VJP itself; the gradient of the output
// head is the sum over tokens of (A V)_i^T (x) delta_o^i.
OutputProjVjp output_proj_vjp(const MatrixD& head_out_vjp, const MatrixD& attn_values);

struct UpdateDynamics {
  RowVectorD updated_output;    // x_o (W_o - eta x_o^T delta_o)
  RowVectorD predicted_output;  // z_o - eta |x_o|^2 delta_o
  double max_abs_discrepancy = 0.0;
};

// Effect of a single-token gradient step on the output head, evaluated on the
// same input row x_o, both by applying the update and by the closed form.
UpdateDynamics update_dynamics(const MatrixD& w_o_head, const RowVectorD& x_o,
                               const RowVectorD& delta_o, double eta);

// delta_v^j = sum_{l >= j} A[l][j] e^l, i.e. A^T E.
MatrixD value_vjp(const MatrixD& attn, const MatrixD& E);

// Row j: A_j (.) (e~^j - (e~^j . A_j) 1) * sqrt(h / d). Entries above the
// diagonal are exactly +0.
MatrixD softmax_derivative(const MatrixD& attn, const MatrixD& E_tilde, int d_model, int n_heads);

struct QueryKeyVjp {
  MatrixD delta_q;  // R K
  MatrixD delta_k;  // R^T Q
};

QueryKeyVjp query_key_vjp(const MatrixD& R, const MatrixD& Q, const MatrixD& K);

// Backward through y = (x - mean) * rstd * gain + bias using the cached
// statistics. Accumulates into dgain/dbias when they are non-null.
template <typename T>
MatrixD layer_norm_backward(const MatrixD& dy, const Matrix<T>& x, const LayerNormTrace<T>& stats,
                            const RowVector<T>& gain, RowVectorD* dgain, RowVectorD* dbias);

// Full reverse pass: unembedding, final LN, blocks in reverse order, then the
// embeddings. Throws TraceMismatch when the trace does not fit the model or
// came from an intervened forward pass.
template <typename T>
BackwardResult full_backward(const Model<T>& model, const ForwardTrace<T>& trace,
                             const MatrixD& dlogits, const BackwardOptions& options = {});

// Zero-initialised gradient container for a config (LN gains included).
ModelWeights<double> zero_gradients(const ModelConfig& config);

template <typename T>
struct ReversedAttentionRun {
  ForwardTrace<T> trace;
  LossAndGrad loss;
  BackwardResult backward;
};

// Forward pass, last-position cross-entropy against `target`, backward pass.
template <typename T>
ReversedAttentionRun<T> run_reversed_attention(const Model<T>& model, std::span<const int> tokens,
                                               int target, const BackwardOptions& options = {});

}  // namespace revattn
