#include "revattn/backward.hpp"

#include <cmath>
#include <string>

namespace revattn {

namespace {

void require_same_rows(const char* what, const MatrixD& a, const MatrixD& b) {
  if (a.rows() != b.rows()) {
    throw Error(ErrorKind::kShapeMismatch, std::string(what) + ": row counts " + std::to_string(a.rows()) +
                                               " and " + std::to_string(b.rows()) + " differ");
  }
}

void require_square(const char* what, const MatrixD& m) {
  if (m.rows() != m.cols()) {
    throw Error(ErrorKind::kShapeMismatch, std::string(what) + " must be square, got " +
                                               std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
  }
}

[[noreturn]] void trace_mismatch(const std::string& what) { throw Error(ErrorKind::kTraceMismatch, what); }

template <typename T>
void check_trace(const ModelConfig& c, const ForwardTrace<T>& trace, const MatrixD& dlogits) {
  if (trace.intervened) trace_mismatch("trace was produced by an intervened forward pass");
  const auto n = static_cast<Eigen::Index>(trace.tokens.size());
  if (n == 0) trace_mismatch("trace has no tokens");
  if (static_cast<int>(trace.layers.size()) != c.n_layers) {
    trace_mismatch("trace has " + std::to_string(trace.layers.size()) + " layers, model has " +
                   std::to_string(c.n_layers));
  }
  for (int l = 0; l < c.n_layers; ++l) {
    const auto& lt = trace.layers[l];
    if (static_cast<int>(lt.heads.size()) != c.n_heads) {
      trace_mismatch("layer " + std::to_string(l) + " trace is missing heads");
    }
    if (lt.input.rows() != n || lt.mlp_act.rows() != n) {
      trace_mismatch("layer " + std::to_string(l) + " trace has inconsistent sequence length");
    }
    for (const auto& h : lt.heads) {
      if (h.attn.rows() != n || h.q.rows() != n || h.attn_values.rows() != n) {
        trace_mismatch("layer " + std::to_string(l) + " head trace is incomplete");
      }
    }
  }
  if (trace.logits.rows() != n || dlogits.rows() != n || dlogits.cols() != c.vocab_size) {
    trace_mismatch("dlogits shape does not match the trace");
  }
}

template <typename T>
RowVectorD col_sum(const Eigen::MatrixBase<T>& m) {
  return m.colwise().sum();
}

}  // namespace

OutputProjVjp output_proj_vjp(const MatrixD& head_out_vjp, const MatrixD& attn_values) {
  require_same_rows("output_proj_vjp", head_out_vjp, attn_values);
  return {head_out_vjp, attn_values.transpose() * head_out_vjp};
}

UpdateDynamics update_dynamics(const MatrixD& w_o_head, const RowVectorD& x_o,
                               const RowVectorD& delta_o, double eta) {
  require_shape("x_o", x_o, 1, w_o_head.rows());
  require_shape("delta_o", delta_o, 1, w_o_head.cols());
  UpdateDynamics out;
  const MatrixD updated = w_o_head - eta * (x_o.transpose() * delta_o);
  out.updated_output = x_o * updated;
  out.predicted_output = x_o * w_o_head - eta * x_o.squaredNorm() * delta_o;
  out.max_abs_discrepancy = (out.updated_output - out.predicted_output).cwiseAbs().maxCoeff();
  return out;
}

MatrixD value_vjp(const MatrixD& attn, const MatrixD& E) {
  require_square("attention", attn);
  require_same_rows("value_vjp", attn, E);
  return attn.transpose() * E;
}

MatrixD softmax_derivative(const MatrixD& attn, const MatrixD& E_tilde, int d_model, int n_heads) {
  require_square("attention", attn);
  require_shape("E_tilde", E_tilde, attn.rows(), attn.cols());
  if (n_heads < 1 || d_model < n_heads) {
    throw Error(ErrorKind::kInvalidConfig, "softmax_derivative needs 1 <= h <= d");
  }
  const double scale = std::sqrt(static_cast<double>(n_heads) / static_cast<double>(d_model));
  const Eigen::Index n = attn.rows();
  MatrixD R(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const double weighted = E_tilde.row(j).dot(attn.row(j));
    R.row(j) = (attn.row(j).array() * (E_tilde.row(j).array() - weighted) * scale).matrix();
  }
  R.triangularView<Eigen::StrictlyUpper>().setZero();
  return R;
}

QueryKeyVjp query_key_vjp(const MatrixD& R, const MatrixD& Q, const MatrixD& K) {
  require_square("R", R);
  require_same_rows("query_key_vjp(Q)", R, Q);
  require_same_rows("query_key_vjp(K)", R, K);
  return {R * K, R.transpose() * Q};
}

template <typename T>
MatrixD layer_norm_backward(const MatrixD& dy, const Matrix<T>& x, const LayerNormTrace<T>& stats,
                            const RowVector<T>& gain, RowVectorD* dgain, RowVectorD* dbias) {
  const Eigen::Index n = x.rows();
  const double d = static_cast<double>(x.cols());
  if (stats.mean.size() != n || stats.rstd.size() != n) trace_mismatch("layer norm statistics missing");
  const RowVectorD g = gain.template cast<double>();
  MatrixD dx(n, x.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mu = static_cast<double>(stats.mean(i));
    const double r = static_cast<double>(stats.rstd(i));
    const RowVectorD xhat = ((x.row(i).template cast<double>().array() - mu) * r).matrix();
    const RowVectorD dxhat = dy.row(i).cwiseProduct(g);
    const double mean_dxhat = dxhat.sum() / d;
    const double mean_dxhat_xhat = dxhat.dot(xhat) / d;
    dx.row(i) = (r * (dxhat.array() - mean_dxhat - xhat.array() * mean_dxhat_xhat)).matrix();
    if (dgain) *dgain += dy.row(i).cwiseProduct(xhat);
    if (dbias) *dbias += dy.row(i);
  }
  return dx;
}

ModelWeights<double> zero_gradients(const ModelConfig& config) {
  auto g = ModelWeights<double>::zeros(config);
  for_each_tensor(g, [](const std::string&, auto& t) { t.setZero(); });
  return g;
}

template <typename T>
BackwardResult full_backward(const Model<T>& model, const ForwardTrace<T>& trace,
                             const MatrixD& dlogits, const BackwardOptions& options) {
  const auto& c = model.config();
  const auto& w = model.weights();
  check_trace(c, trace, dlogits);
  const bool pre_ln = c.ln_mode == LnMode::kPreLn;
  const bool want_grads = options.weight_gradients;
  const int dh = c.head_dim();
  const Eigen::Index n = dlogits.rows();

  BackwardResult out;
  out.layers.resize(c.n_layers);
  ModelWeights<double>* g = nullptr;
  if (want_grads) {
    out.grads = zero_gradients(c);
    g = &*out.grads;
  }

  // Unembedding. Only rows with a non-zero VJP contribute, which for the
  // last-position loss is a single row.
  MatrixD d_final = MatrixD::Zero(n, c.d_model);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (dlogits.row(i).isZero(0.0)) continue;
    for (Eigen::Index k = 0; k < c.d_model; ++k) {
      d_final(i, k) = w.unembedding.row(k).template cast<double>().dot(dlogits.row(i));
    }
  }
  if (g) g->unembedding = to_double(trace.final_normed).transpose() * dlogits;

  const Matrix<T>& last_out = c.n_layers > 0 ? trace.layers.back().output : trace.embedded;
  MatrixD grad = pre_ln ? layer_norm_backward(d_final, last_out, trace.ln_final, w.ln_final.gain,
                                              g ? &g->ln_final.gain : nullptr,
                                              g ? &g->ln_final.bias : nullptr)
                        : d_final;

  for (int l = c.n_layers - 1; l >= 0; --l) {
    const auto& L = w.layers[l];
    const auto& lt = trace.layers[l];
    LayerWeights<double>* gl = g ? &g->layers[l] : nullptr;
    LayerBackward& rec = out.layers[l];

    // MLP sub-block: output = mid + MLP(mlp_input).
    const MatrixD mlp_act = to_double(lt.mlp_act);
    const MatrixD d_act = grad * to_double(L.ff2).transpose();
    MatrixD d_pre = d_act;
    for (Eigen::Index i = 0; i < d_pre.rows(); ++i) {
      for (Eigen::Index j = 0; j < d_pre.cols(); ++j) {
        d_pre(i, j) *= gelu_derivative(static_cast<double>(lt.mlp_pre(i, j)));
      }
    }
    const MatrixD d_mlp_in = d_pre * to_double(L.ff1).transpose();
    if (gl) {
      gl->ff2 += mlp_act.transpose() * grad;
      gl->ff2_bias += col_sum(grad);
      gl->ff1 += to_double(lt.mlp_input).transpose() * d_pre;
      gl->ff1_bias += col_sum(d_pre);
    }
    MatrixD d_mid = grad;
    d_mid += pre_ln ? layer_norm_backward(d_mlp_in, lt.mid, lt.ln2, L.ln2.gain,
                                          gl ? &gl->ln2.gain : nullptr, gl ? &gl->ln2.bias : nullptr)
                    : d_mlp_in;

    // Attention sub-block: mid = input + sum_l head^l + b_o.
    rec.delta_o = d_mid;
    if (gl) gl->b_o += col_sum(d_mid);
    const MatrixD x_attn = to_double(lt.attn_input);
    MatrixD d_attn_in = MatrixD::Zero(n, c.d_model);
    rec.heads.resize(c.n_heads);
    for (int h = 0; h < c.n_heads; ++h) {
      const auto& ht = lt.heads[h];
      HeadBackward& hb = rec.heads[h];
      const MatrixD attn = to_double(ht.attn);
      const MatrixD V = to_double(ht.v);
      const MatrixD w_o_head = to_double(L.output_head(h, dh));

      auto proj = output_proj_vjp(rec.delta_o, to_double(ht.attn_values));
      hb.E = proj.delta_o * w_o_head.transpose();
      hb.delta_v = value_vjp(attn, hb.E);
      hb.E_tilde = hb.E * V.transpose();
      hb.R = softmax_derivative(attn, hb.E_tilde, c.d_model, c.n_heads);
      auto qk = query_key_vjp(hb.R, to_double(ht.q), to_double(ht.k));
      hb.delta_q = std::move(qk.delta_q);
      hb.delta_k = std::move(qk.delta_k);

      d_attn_in += hb.delta_q * to_double(L.query_head(h, dh)).transpose();
      d_attn_in += hb.delta_k * to_double(L.key_head(h, dh)).transpose();
      d_attn_in += hb.delta_v * to_double(L.value_head(h, dh)).transpose();

      if (gl) {
        gl->w_o.middleRows(h * dh, dh) += proj.grad_w_o;
        gl->w_q.middleCols(h * dh, dh) += x_attn.transpose() * hb.delta_q;
        gl->w_k.middleCols(h * dh, dh) += x_attn.transpose() * hb.delta_k;
        gl->w_v.middleCols(h * dh, dh) += x_attn.transpose() * hb.delta_v;
        gl->b_q.segment(h * dh, dh) += col_sum(hb.delta_q);
        gl->b_k.segment(h * dh, dh) += col_sum(hb.delta_k);
        gl->b_v.segment(h * dh, dh) += col_sum(hb.delta_v);
      }
    }
    rec.d_input = d_mid;
    rec.d_input += pre_ln ? layer_norm_backward(d_attn_in, lt.input, lt.ln1, L.ln1.gain,
                                                gl ? &gl->ln1.gain : nullptr,
                                                gl ? &gl->ln1.bias : nullptr)
                          : d_attn_in;
    grad = rec.d_input;
  }

  out.d_embedded = grad;
  if (g) {
    for (Eigen::Index i = 0; i < n; ++i) {
      g->token_embedding.row(trace.tokens[i]) += grad.row(i);
      g->positional_embedding.row(i) += grad.row(i);
    }
  }
  return out;
}

template <typename T>
ReversedAttentionRun<T> run_reversed_attention(const Model<T>& model, std::span<const int> tokens,
                                               int target, const BackwardOptions& options) {
  ReversedAttentionRun<T> run;
  run.trace = model_forward(model, tokens);
  run.loss = loss_and_logit_grad(run.trace.logits, target);
  run.backward = full_backward(model, run.trace, run.loss.dlogits, options);
  return run;
}

#define REVATTN_INSTANTIATE_BACKWARD(T)                                                              \
  template MatrixD layer_norm_backward<T>(const MatrixD&, const Matrix<T>&, const LayerNormTrace<T>&, \
                                          const RowVector<T>&, RowVectorD*, RowVectorD*);            \
  template BackwardResult full_backward<T>(const Model<T>&, const ForwardTrace<T>&, const MatrixD&,  \
                                           const BackwardOptions&);                                  \
  template ReversedAttentionRun<T> run_reversed_attention<T>(const Model<T>&, std::span<const int>,  \
                                                             int, const BackwardOptions&);

REVATTN_INSTANTIATE_BACKWARD(float)
REVATTN_INSTANTIATE_BACKWARD(double)

}  // namespace revattn
