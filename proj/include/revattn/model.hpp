#pragma once

#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "revattn/tensor.hpp"

namespace revattn {

enum class LnMode { kPreLn, kNone };
enum class DType { kF32, kF64 };

const char* to_string(LnMode mode);
const char* to_string(DType dtype);
LnMode parse_ln_mode(std::string_view s);
DType parse_dtype(std::string_view s);

struct ModelConfig {
  int n_layers = 1;
  int n_heads = 1;
  int d_model = 1;
  int d_mlp = 1;
  int vocab_size = 1;
  int max_seq_len = 1;
  LnMode ln_mode = LnMode::kPreLn;
  DType dtype = DType::kF32;
  double ln_eps = 1e-5;

  int head_dim() const { return d_model / n_heads; }
  int total_heads() const { return n_layers * n_heads; }

  // Throws InvalidConfig when a count is non-positive or d_model % n_heads != 0.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct LayerNormParams {
  RowVector<T> gain;
  RowVector<T> bias;
};

// Linear maps act on row vectors: y = x W + b. W_q/W_k/W_v are split by
// column blocks into heads, W_o by row blocks.
template <typename T>
struct LayerWeights {
  Matrix<T> w_q, w_k, w_v, w_o;  // d x d
  RowVector<T> b_q, b_k, b_v, b_o;
  Matrix<T> ff1;  // d x d_mlp
  RowVector<T> ff1_bias;
  Matrix<T> ff2;  // d_mlp x d
  RowVector<T> ff2_bias;
  LayerNormParams<T> ln1, ln2;

  // Per-head views. Query/key/value heads are [d x d/h]; the output head
  // is [d/h x d].
  auto query_head(int head, int head_dim) const { return w_q.middleCols(head * head_dim, head_dim); }
  auto key_head(int head, int head_dim) const { return w_k.middleCols(head * head_dim, head_dim); }
  auto value_head(int head, int head_dim) const { return w_v.middleCols(head * head_dim, head_dim); }
  auto output_head(int head, int head_dim) const { return w_o.middleRows(head * head_dim, head_dim); }
};

template <typename T>
struct ModelWeights {
  Matrix<T> token_embedding;       // vocab x d
  Matrix<T> positional_embedding;  // max_seq_len x d
  std::vector<LayerWeights<T>> layers;
  LayerNormParams<T> ln_final;
  Matrix<T> unembedding;  // d x vocab

  // All-zero weights of the right shapes; LN gains are one.
  static ModelWeights zeros(const ModelConfig& config);

  template <typename U>
  ModelWeights<U> cast() const;
};

// Visits every learned tensor in a fixed order with its canonical native
// name. The visitor sees a plain Eigen block of the tensor.
template <typename T, typename Fn>
void for_each_tensor(ModelWeights<T>& w, Fn&& fn);
template <typename T, typename Fn>
void for_each_tensor(const ModelWeights<T>& w, Fn&& fn);

template <typename T>
class Model {
 public:
  Model(ModelConfig config, ModelWeights<T> weights);

  const ModelConfig& config() const { return config_; }
  const ModelWeights<T>& weights() const { return weights_; }
  ModelWeights<T>& mutable_weights() { return weights_; }

  // Shape and finiteness checks; called by the constructor.
  void validate() const;

 private:
  ModelConfig config_;
  ModelWeights<T> weights_;
};

// ---- implementation of templates ----

namespace detail {

template <typename W, typename Fn>
void visit_tensors(W& w, Fn&& fn) {
  fn(std::string("token_embedding"), w.token_embedding);
  fn(std::string("positional_embedding"), w.positional_embedding);
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    auto& L = w.layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    fn(p + "w_q", L.w_q);
    fn(p + "w_k", L.w_k);
    fn(p + "w_v", L.w_v);
    fn(p + "w_o", L.w_o);
    fn(p + "b_q", L.b_q);
    fn(p + "b_k", L.b_k);
    fn(p + "b_v", L.b_v);
    fn(p + "b_o", L.b_o);
    fn(p + "ff1", L.ff1);
    fn(p + "ff1_bias", L.ff1_bias);
    fn(p + "ff2", L.ff2);
    fn(p + "ff2_bias", L.ff2_bias);
    fn(p + "ln1.gain", L.ln1.gain);
    fn(p + "ln1.bias", L.ln1.bias);
    fn(p + "ln2.gain", L.ln2.gain);
    fn(p + "ln2.bias", L.ln2.bias);
  }
  fn(std::string("ln_final.gain"), w.ln_final.gain);
  fn(std::string("ln_final.bias"), w.ln_final.bias);
  fn(std::string("unembedding"), w.unembedding);
}

}  // namespace detail

template <typename T, typename Fn>
void for_each_tensor(ModelWeights<T>& w, Fn&& fn) {
  detail::visit_tensors(w, std::forward<Fn>(fn));
}

template <typename T, typename Fn>
void for_each_tensor(const ModelWeights<T>& w, Fn&& fn) {
  detail::visit_tensors(w, std::forward<Fn>(fn));
}

template <typename T>
ModelWeights<T> ModelWeights<T>::zeros(const ModelConfig& c) {
  const int d = c.d_model;
  ModelWeights<T> w;
  w.token_embedding = Matrix<T>::Zero(c.vocab_size, d);
  w.positional_embedding = Matrix<T>::Zero(c.max_seq_len, d);
  w.layers.resize(c.n_layers);
  auto ln = [d] { return LayerNormParams<T>{RowVector<T>::Ones(d), RowVector<T>::Zero(d)}; };
  for (auto& L : w.layers) {
    L.w_q = Matrix<T>::Zero(d, d);
    L.w_k = Matrix<T>::Zero(d, d);
    L.w_v = Matrix<T>::Zero(d, d);
    L.w_o = Matrix<T>::Zero(d, d);
    L.b_q = RowVector<T>::Zero(d);
    L.b_k = RowVector<T>::Zero(d);
    L.b_v = RowVector<T>::Zero(d);
    L.b_o = RowVector<T>::Zero(d);
    L.ff1 = Matrix<T>::Zero(d, c.d_mlp);
    L.ff1_bias = RowVector<T>::Zero(c.d_mlp);
    L.ff2 = Matrix<T>::Zero(c.d_mlp, d);
    L.ff2_bias = RowVector<T>::Zero(d);
    L.ln1 = ln();
    L.ln2 = ln();
  }
  w.ln_final = ln();
  w.unembedding = Matrix<T>::Zero(d, c.vocab_size);
  return w;
}

template <typename T>
template <typename U>
ModelWeights<U> ModelWeights<T>::cast() const {
  auto ln = [](const LayerNormParams<T>& p) {
    return LayerNormParams<U>{p.gain.template cast<U>(), p.bias.template cast<U>()};
  };
  ModelWeights<U> out;
  out.token_embedding = token_embedding.template cast<U>();
  out.positional_embedding = positional_embedding.template cast<U>();
  out.layers.reserve(layers.size());
  for (const auto& L : layers) {
    LayerWeights<U> o;
    o.w_q = L.w_q.template cast<U>();
    o.w_k = L.w_k.template cast<U>();
    o.w_v = L.w_v.template cast<U>();
    o.w_o = L.w_o.template cast<U>();
    o.b_q = L.b_q.template cast<U>();
    o.b_k = L.b_k.template cast<U>();
    o.b_v = L.b_v.template cast<U>();
    o.b_o = L.b_o.template cast<U>();
    o.ff1 = L.ff1.template cast<U>();
    o.ff1_bias = L.ff1_bias.template cast<U>();
    o.ff2 = L.ff2.template cast<U>();
    o.ff2_bias = L.ff2_bias.template cast<U>();
    o.ln1 = ln(L.ln1);
    o.ln2 = ln(L.ln2);
    out.layers.push_back(std::move(o));
  }
  out.ln_final = ln(ln_final);
  out.unembedding = unembedding.template cast<U>();
  return out;
}

}  // namespace revattn
