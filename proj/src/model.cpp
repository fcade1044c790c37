#include "revattn/model.hpp"

#include "quad.hpp"

#include <string>

namespace revattn {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidToken: return "InvalidToken";
    case ErrorKind::kSequenceTooLong: return "SequenceTooLong";
    case ErrorKind::kShapeMismatch: return "ShapeMismatch";
    case ErrorKind::kTraceMismatch: return "TraceMismatch";
    case ErrorKind::kEmptyInput: return "EmptyInput";
    case ErrorKind::kInvalidConfig: return "InvalidConfig";
    case ErrorKind::kTemplateError: return "TemplateError";
    case ErrorKind::kNumericalError: return "NumericalError";
    case ErrorKind::kLengthMismatch: return "LengthMismatch";
    case ErrorKind::kInsufficientData: return "InsufficientData";
    case ErrorKind::kFixtureCorrupt: return "FixtureCorrupt";
    case ErrorKind::kIoError: return "IoError";
    case ErrorKind::kTokenizeError: return "TokenizeError";
  }
  return "Error";
}

ExitCode exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kNumericalError:
      return ExitCode::kNumerical;
    case ErrorKind::kLengthMismatch:
    case ErrorKind::kInsufficientData:
    case ErrorKind::kFixtureCorrupt:
    case ErrorKind::kIoError:
    case ErrorKind::kTokenizeError:
      return ExitCode::kData;
    default:
      return ExitCode::kValidation;
  }
}

const char* to_string(LnMode mode) { return mode == LnMode::kPreLn ? "pre_ln" : "none"; }
const char* to_string(DType dtype) { return dtype == DType::kF32 ? "f32" : "f64"; }

LnMode parse_ln_mode(std::string_view s) {
  if (s == "pre_ln") return LnMode::kPreLn;
  if (s == "none") return LnMode::kNone;
  throw Error(ErrorKind::kInvalidConfig, "unknown ln_mode '" + std::string(s) + "'");
}

DType parse_dtype(std::string_view s) {
  if (s == "f32") return DType::kF32;
  if (s == "f64") return DType::kF64;
  throw Error(ErrorKind::kInvalidConfig, "unknown dtype '" + std::string(s) + "'");
}

void ModelConfig::validate() const {
  auto positive = [](const char* name, int v) {
    if (v < 1) {
      throw Error(ErrorKind::kInvalidConfig, std::string(name) + " must be >= 1, got " + std::to_string(v));
    }
  };
  positive("n_layers", n_layers);
  positive("n_heads", n_heads);
  positive("d_model", d_model);
  positive("d_mlp", d_mlp);
  positive("vocab_size", vocab_size);
  positive("max_seq_len", max_seq_len);
  if (d_model % n_heads != 0) {
    throw Error(ErrorKind::kInvalidConfig, "d_model " + std::to_string(d_model) +
                                               " is not divisible by n_heads " + std::to_string(n_heads));
  }
  if (!(ln_eps > 0.0)) throw Error(ErrorKind::kInvalidConfig, "ln_eps must be positive");
}

template <typename T>
Model<T>::Model(ModelConfig config, ModelWeights<T> weights)
    : config_(config), weights_(std::move(weights)) {
  validate();
}

template <typename T>
void Model<T>::validate() const {
  config_.validate();
  const auto& c = config_;
  const auto& w = weights_;
  const int d = c.d_model;
  require_shape("token_embedding", w.token_embedding, c.vocab_size, d);
  require_shape("positional_embedding", w.positional_embedding, c.max_seq_len, d);
  if (static_cast<int>(w.layers.size()) != c.n_layers) {
    throw Error(ErrorKind::kShapeMismatch, "expected " + std::to_string(c.n_layers) + " layers, got " +
                                               std::to_string(w.layers.size()));
  }
  for (int l = 0; l < c.n_layers; ++l) {
    const auto& L = w.layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    require_shape(p + "w_q", L.w_q, d, d);
    require_shape(p + "w_k", L.w_k, d, d);
    require_shape(p + "w_v", L.w_v, d, d);
    require_shape(p + "w_o", L.w_o, d, d);
    require_shape(p + "b_q", L.b_q, 1, d);
    require_shape(p + "b_k", L.b_k, 1, d);
    require_shape(p + "b_v", L.b_v, 1, d);
    require_shape(p + "b_o", L.b_o, 1, d);
    require_shape(p + "ff1", L.ff1, d, c.d_mlp);
    require_shape(p + "ff1_bias", L.ff1_bias, 1, c.d_mlp);
    require_shape(p + "ff2", L.ff2, c.d_mlp, d);
    require_shape(p + "ff2_bias", L.ff2_bias, 1, d);
    require_shape(p + "ln1.gain", L.ln1.gain, 1, d);
    require_shape(p + "ln1.bias", L.ln1.bias, 1, d);
    require_shape(p + "ln2.gain", L.ln2.gain, 1, d);
    require_shape(p + "ln2.bias", L.ln2.bias, 1, d);
  }
  require_shape("ln_final.gain", w.ln_final.gain, 1, d);
  require_shape("ln_final.bias", w.ln_final.bias, 1, d);
  require_shape("unembedding", w.unembedding, d, c.vocab_size);
  for_each_tensor(w, [](const std::string& name, const auto& t) {
    if (!all_finite(t)) throw Error(ErrorKind::kNumericalError, "non-finite values in " + name);
  });
}

template class Model<float>;
template class Model<double>;
template class Model<Quad>;

}  // namespace revattn
