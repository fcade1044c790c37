#include "revattn/forward.hpp"

#include "quad.hpp"

#include <cmath>
#include <string>

namespace revattn {

namespace {

constexpr double kGeluScale = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluCubic = 0.044715;

template <typename T>
void require_finite(const Matrix<T>& m, const std::string& where) {
  if (!all_finite(m)) throw Error(ErrorKind::kNumericalError, "non-finite values in " + where);
}

std::string head_location(int layer, int head) {
  return "layer " + std::to_string(layer) + " head " + std::to_string(head);
}

}  // namespace

template <typename T>
T gelu(T x) {
  using std::tanh;
  const T inner = T(kGeluScale) * (x + T(kGeluCubic) * x * x * x);
  return T(0.5) * x * (T(1) + tanh(inner));
}

template <typename T>
T gelu_derivative(T x) {
  using std::tanh;
  const T inner = T(kGeluScale) * (x + T(kGeluCubic) * x * x * x);
  const T t = tanh(inner);
  const T sech2 = T(1) - t * t;
  return T(0.5) * (T(1) + t) + T(0.5) * x * sech2 * T(kGeluScale) * (T(1) + T(3 * kGeluCubic) * x * x);
}

void validate_tokens(const ModelConfig& config, std::span<const int> tokens) {
  if (tokens.empty()) throw Error(ErrorKind::kEmptyInput, "token sequence is empty");
  if (static_cast<int>(tokens.size()) > config.max_seq_len) {
    throw Error(ErrorKind::kSequenceTooLong, "sequence of " + std::to_string(tokens.size()) +
                                                 " tokens exceeds max_seq_len " +
                                                 std::to_string(config.max_seq_len));
  }
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] >= config.vocab_size) {
      throw Error(ErrorKind::kInvalidToken, "token " + std::to_string(tokens[i]) + " at position " +
                                                std::to_string(i) + " is outside [0, " +
                                                std::to_string(config.vocab_size) + ")");
    }
  }
}

template <typename T>
Matrix<T> embed(const ModelConfig& config, const ModelWeights<T>& weights,
                std::span<const int> tokens) {
  validate_tokens(config, tokens);
  const auto n = static_cast<Eigen::Index>(tokens.size());
  Matrix<T> x(n, config.d_model);
  for (Eigen::Index i = 0; i < n; ++i) {
    x.row(i) = weights.token_embedding.row(tokens[i]) + weights.positional_embedding.row(i);
  }
  return x;
}

template <typename T>
Matrix<T> layer_norm(const Matrix<T>& x, const LayerNormParams<T>& p, double eps,
                     LayerNormTrace<T>* trace) {
  const Eigen::Index n = x.rows();
  const T d = static_cast<T>(x.cols());
  Matrix<T> y(n, x.cols());
  ColVector<T> mean(n), rstd(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const T mu = x.row(i).sum() / d;
    const auto centered = (x.row(i).array() - mu);
    const T var = centered.square().sum() / d;
    using std::sqrt;
    const T r = T(1) / sqrt(var + T(eps));
    mean(i) = mu;
    rstd(i) = r;
    y.row(i) = (centered * r * p.gain.array() + p.bias.array()).matrix();
  }
  if (trace) {
    trace->mean = std::move(mean);
    trace->rstd = std::move(rstd);
  }
  return y;
}

template <typename T>
HeadTrace<T> attention_head_forward(const Matrix<T>& x, const LayerWeights<T>& layer,
                                    const ModelConfig& config, int layer_index, int head,
                                    const ForwardHooks<T>* hooks) {
  const int dh = config.head_dim();
  const Eigen::Index n = x.rows();
  HeadTrace<T> h;
  h.q = x * layer.query_head(head, dh);
  h.q.rowwise() += layer.b_q.segment(head * dh, dh);
  h.k = x * layer.key_head(head, dh);
  h.k.rowwise() += layer.b_k.segment(head * dh, dh);
  h.v = x * layer.value_head(head, dh);
  h.v.rowwise() += layer.b_v.segment(head * dh, dh);

  using std::sqrt;
  h.scores = (h.q * h.k.transpose()) / sqrt(static_cast<T>(dh));
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) h.scores(i, j) += mask_value<T>();
  }
  h.attn = h.scores;
  softmax_rows_inplace(h.attn);
  h.attn.template triangularView<Eigen::StrictlyUpper>().setZero();
  if (hooks) hooks->attention(layer_index, head, h.attn);

  h.attn_values = h.attn * h.v;
  h.out = h.attn_values * layer.output_head(head, dh);
  if (hooks) hooks->head_output(layer_index, head, h.out);
  require_finite(h.attn, "attention of " + head_location(layer_index, head));
  require_finite(h.out, "output of " + head_location(layer_index, head));
  return h;
}

template <typename T>
LayerTrace<T> block_forward(const Matrix<T>& x, const LayerWeights<T>& layer,
                            const ModelConfig& config, int layer_index,
                            const ForwardHooks<T>* hooks) {
  const bool pre_ln = config.ln_mode == LnMode::kPreLn;
  LayerTrace<T> t;
  t.input = x;
  t.attn_input = pre_ln ? layer_norm(x, layer.ln1, config.ln_eps, &t.ln1) : x;

  t.attn_out = Matrix<T>::Zero(x.rows(), x.cols());
  t.heads.reserve(config.n_heads);
  for (int h = 0; h < config.n_heads; ++h) {
    t.heads.push_back(attention_head_forward(t.attn_input, layer, config, layer_index, h, hooks));
    t.attn_out += t.heads.back().out;
  }
  t.attn_out.rowwise() += layer.b_o;
  t.mid = x + t.attn_out;

  t.mlp_input = pre_ln ? layer_norm(t.mid, layer.ln2, config.ln_eps, &t.ln2) : t.mid;
  t.mlp_pre = t.mlp_input * layer.ff1;
  t.mlp_pre.rowwise() += layer.ff1_bias;
  t.mlp_act = t.mlp_pre.unaryExpr([](T v) { return gelu(v); });
  t.mlp_out = t.mlp_act * layer.ff2;
  t.mlp_out.rowwise() += layer.ff2_bias;
  t.output = t.mid + t.mlp_out;
  require_finite(t.output, "output of layer " + std::to_string(layer_index));
  return t;
}

template <typename T>
ForwardTrace<T> model_forward(const Model<T>& model, std::span<const int> tokens,
                              const ForwardHooks<T>* hooks) {
  const auto& c = model.config();
  const auto& w = model.weights();
  ForwardTrace<T> trace;
  trace.tokens.assign(tokens.begin(), tokens.end());
  trace.intervened = hooks != nullptr;
  trace.embedded = embed(c, w, tokens);
  trace.layers.reserve(c.n_layers);
  const Matrix<T>* x = &trace.embedded;
  for (int l = 0; l < c.n_layers; ++l) {
    trace.layers.push_back(block_forward(*x, w.layers[l], c, l, hooks));
    x = &trace.layers.back().output;
  }
  trace.final_normed =
      c.ln_mode == LnMode::kPreLn ? layer_norm(*x, w.ln_final, c.ln_eps, &trace.ln_final) : *x;
  trace.logits = trace.final_normed * w.unembedding;
  require_finite(trace.logits, "logits");
  return trace;
}

template <typename T>
LossAndGrad loss_and_logit_grad(const Matrix<T>& logits, int target) {
  const Eigen::Index n = logits.rows();
  const Eigen::Index vocab = logits.cols();
  if (n == 0) throw Error(ErrorKind::kEmptyInput, "logits have no rows");
  if (target < 0 || target >= vocab) {
    throw Error(ErrorKind::kInvalidToken, "target " + std::to_string(target) + " is outside [0, " +
                                              std::to_string(vocab) + ")");
  }
  const RowVectorD last = logits.row(n - 1).template cast<double>();
  const double mx = last.maxCoeff();
  RowVectorD p = (last.array() - mx).exp().matrix();
  const double z = p.sum();
  p /= z;
  LossAndGrad out;
  out.loss = -(last(target) - mx - std::log(z));
  out.dlogits = MatrixD::Zero(n, vocab);
  out.dlogits.row(n - 1) = p;
  out.dlogits(n - 1, target) -= 1.0;
  return out;
}

template <typename T>
double target_probability(const Matrix<T>& logits, int target) {
  const Eigen::Index n = logits.rows();
  if (target < 0 || target >= logits.cols()) {
    throw Error(ErrorKind::kInvalidToken, "target " + std::to_string(target) + " out of range");
  }
  const RowVectorD last = logits.row(n - 1).template cast<double>();
  const double mx = last.maxCoeff();
  const double z = (last.array() - mx).exp().sum();
  return std::exp(last(target) - mx) / z;
}

template <typename T>
int argmax_last(const Matrix<T>& logits) {
  const Eigen::Index n = logits.rows();
  Eigen::Index best = 0;
  for (Eigen::Index j = 1; j < logits.cols(); ++j) {
    if (logits(n - 1, j) > logits(n - 1, best)) best = j;
  }
  return static_cast<int>(best);
}

#define REVATTN_INSTANTIATE_FORWARD(T)                                                        \
  template T gelu<T>(T);                                                                      \
  template T gelu_derivative<T>(T);                                                           \
  template Matrix<T> embed<T>(const ModelConfig&, const ModelWeights<T>&, std::span<const int>); \
  template Matrix<T> layer_norm<T>(const Matrix<T>&, const LayerNormParams<T>&, double,       \
                                   LayerNormTrace<T>*);                                       \
  template HeadTrace<T> attention_head_forward<T>(const Matrix<T>&, const LayerWeights<T>&,   \
                                                  const ModelConfig&, int, int,               \
                                                  const ForwardHooks<T>*);                    \
  template LayerTrace<T> block_forward<T>(const Matrix<T>&, const LayerWeights<T>&,           \
                                          const ModelConfig&, int, const ForwardHooks<T>*);   \
  template ForwardTrace<T> model_forward<T>(const Model<T>&, std::span<const int>,            \
                                            const ForwardHooks<T>*);                          \
  template LossAndGrad loss_and_logit_grad<T>(const Matrix<T>&, int);                         \
  template double target_probability<T>(const Matrix<T>&, int);                               \
  template int argmax_last<T>(const Matrix<T>&);

REVATTN_INSTANTIATE_FORWARD(float)
REVATTN_INSTANTIATE_FORWARD(double)
REVATTN_INSTANTIATE_FORWARD(Quad)

}  // namespace revattn
