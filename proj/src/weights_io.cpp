#include "revattn/weights_io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "config_json.hpp"

namespace revattn {

static_assert(std::endian::native == std::endian::little, "payloads are read as little-endian");

namespace {

std::size_t element_size(const std::string& dtype) {
  if (dtype == "F32") return 4;
  if (dtype == "F64") return 8;
  throw Error(ErrorKind::kFixtureCorrupt, "unsupported tensor dtype '" + dtype + "'");
}

long element_count(const std::vector<long>& shape) {
  long n = 1;
  for (long s : shape) n *= s;
  return n;
}

const NamedTensor& find(const TensorMap& t, const std::string& name) {
  const auto it = t.find(name);
  if (it == t.end()) throw Error(ErrorKind::kFixtureCorrupt, "missing tensor '" + name + "'");
  return it->second;
}

// Copies a rank-1 or rank-2 tensor into `dst`, which already has its target
// shape. With `transpose`, a [c, r] tensor fills an r x c destination.
template <typename Dst>
void fill(Dst& dst, const NamedTensor& src, const std::string& name, bool transpose = false) {
  const long rows = dst.rows(), cols = dst.cols();
  const bool vec = rows == 1;
  bool ok;
  if (vec) {
    ok = element_count(src.shape) == cols && src.shape.size() <= 2;
  } else if (transpose) {
    ok = src.shape.size() == 2 && src.shape[0] == cols && src.shape[1] == rows;
  } else {
    ok = src.shape.size() == 2 && src.shape[0] == rows && src.shape[1] == cols;
  }
  if (!ok) {
    std::string got;
    for (long s : src.shape) got += (got.empty() ? "" : "x") + std::to_string(s);
    throw Error(ErrorKind::kShapeMismatch, "tensor '" + name + "' has shape [" + got + "], expected " +
                                               std::to_string(transpose ? cols : rows) + "x" +
                                               std::to_string(transpose ? rows : cols));
  }
  for (long i = 0; i < rows; ++i) {
    for (long j = 0; j < cols; ++j) {
      dst(i, j) = transpose && !vec ? src.values[static_cast<std::size_t>(j * rows + i)]
                                    : src.values[static_cast<std::size_t>(i * cols + j)];
    }
  }
}

// Column block [begin, begin + width) of a fused GPT-2 projection.
NamedTensor column_block(const NamedTensor& src, long begin, long width, const std::string& name) {
  NamedTensor out;
  out.dtype = src.dtype;
  if (src.shape.size() == 1) {
    if (begin + width > src.shape[0]) throw Error(ErrorKind::kShapeMismatch, "fused bias '" + name + "' too short");
    out.shape = {width};
    out.values.assign(src.values.begin() + begin, src.values.begin() + begin + width);
    return out;
  }
  if (src.shape.size() != 2 || begin + width > src.shape[1]) {
    throw Error(ErrorKind::kShapeMismatch, "fused weight '" + name + "' has an unexpected shape");
  }
  const long rows = src.shape[0], cols = src.shape[1];
  out.shape = {rows, width};
  out.values.reserve(static_cast<std::size_t>(rows * width));
  for (long i = 0; i < rows; ++i) {
    for (long j = 0; j < width; ++j) out.values.push_back(src.values[static_cast<std::size_t>(i * cols + begin + j)]);
  }
  return out;
}

NamedTensor transposed(const NamedTensor& src) {
  if (src.shape.size() != 2) return src;
  NamedTensor out;
  out.dtype = src.dtype;
  const long r = src.shape[0], c = src.shape[1];
  out.shape = {c, r};
  out.values.resize(src.values.size());
  for (long i = 0; i < r; ++i) {
    for (long j = 0; j < c; ++j) out.values[static_cast<std::size_t>(j * r + i)] = src.values[static_cast<std::size_t>(i * c + j)];
  }
  return out;
}

}  // namespace

nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers},     {"n_heads", c.n_heads},         {"d_model", c.d_model},
          {"d_mlp", c.d_mlp},           {"vocab_size", c.vocab_size},   {"max_seq_len", c.max_seq_len},
          {"ln_mode", to_string(c.ln_mode)}, {"dtype", to_string(c.dtype)}, {"ln_eps", c.ln_eps}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.d_mlp = j.at("d_mlp").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.ln_mode = parse_ln_mode(j.value("ln_mode", std::string("pre_ln")));
  c.dtype = parse_dtype(j.value("dtype", std::string("f32")));
  c.ln_eps = j.value("ln_eps", 1e-5);
  c.validate();
  return c;
}

TensorMap read_tensor_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIoError, "cannot open tensor file " + path.string());
  std::uint64_t header_len = 0;
  in.read(reinterpret_cast<char*>(&header_len), 8);
  if (!in || header_len > (1ull << 30)) {
    throw Error(ErrorKind::kFixtureCorrupt, path.string() + ": bad header length");
  }
  std::string header(header_len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_len));
  const std::vector<char> payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  TensorMap out;
  try {
    const auto j = nlohmann::json::parse(header);
    for (const auto& [name, info] : j.items()) {
      if (name == "__metadata__") continue;
      NamedTensor t;
      t.dtype = info.at("dtype").get<std::string>();
      t.shape = info.at("shape").get<std::vector<long>>();
      const auto offs = info.at("data_offsets").get<std::vector<std::uint64_t>>();
      const std::size_t es = element_size(t.dtype);
      const auto count = static_cast<std::size_t>(element_count(t.shape));
      if (offs.size() != 2 || offs[1] < offs[0] || offs[1] > payload.size() ||
          offs[1] - offs[0] != count * es) {
        throw Error(ErrorKind::kFixtureCorrupt, path.string() + ": bad data offsets for '" + name + "'");
      }
      t.values.resize(count);
      const char* base = payload.data() + offs[0];
      for (std::size_t i = 0; i < count; ++i) {
        if (es == 4) {
          float f;
          std::memcpy(&f, base + 4 * i, 4);
          t.values[i] = f;
        } else {
          std::memcpy(&t.values[i], base + 8 * i, 8);
        }
      }
      out.emplace(name, std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kFixtureCorrupt, path.string() + ": " + e.what());
  }
  return out;
}

void write_tensor_file(const std::filesystem::path& path, const TensorMap& tensors) {
  nlohmann::json header = nlohmann::json::object();
  std::string payload;
  for (const auto& [name, t] : tensors) {
    const std::size_t es = element_size(t.dtype);
    if (static_cast<long>(t.values.size()) != element_count(t.shape)) {
      throw Error(ErrorKind::kShapeMismatch, "tensor '" + name + "' value count does not match its shape");
    }
    const std::size_t begin = payload.size();
    for (double v : t.values) {
      char buf[8];
      if (es == 4) {
        const float f = static_cast<float>(v);
        std::memcpy(buf, &f, 4);
      } else {
        std::memcpy(buf, &v, 8);
      }
      payload.append(buf, es);
    }
    header[name] = {{"dtype", t.dtype}, {"shape", t.shape}, {"data_offsets", {begin, payload.size()}}};
  }
  std::string h = header.dump();
  while ((h.size() + 8) % 8 != 0) h.push_back(' ');
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::kIoError, "cannot write tensor file " + path.string());
  const std::uint64_t len = h.size();
  out.write(reinterpret_cast<const char*>(&len), 8);
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw Error(ErrorKind::kIoError, "short write to " + path.string());
}

ModelManifest read_model_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIoError, "cannot open model manifest " + path.string());
  ModelManifest m;
  try {
    nlohmann::json j;
    in >> j;
    const auto conv = j.value("convention", std::string("native"));
    if (conv == "native") {
      m.convention = WeightConvention::kNative;
    } else if (conv == "gpt2") {
      m.convention = WeightConvention::kGpt2;
    } else {
      throw Error(ErrorKind::kInvalidConfig, "unknown weight convention '" + conv + "'");
    }
    m.transposed_linear = j.value("transposed_linear", false);
    m.config = config_from_json(j.at("config"));
    m.tensors = j.at("tensors").get<std::string>();
    if (j.contains("vocab") && !j["vocab"].is_null()) m.vocab = std::filesystem::path(j["vocab"].get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kIoError, "model manifest " + path.string() + ": " + e.what());
  }
  const auto dir = path.parent_path();
  if (m.tensors.is_relative()) m.tensors = dir / m.tensors;
  if (m.vocab && m.vocab->is_relative()) m.vocab = dir / *m.vocab;
  return m;
}

ModelWeights<double> weights_from_native(const ModelConfig& config, const TensorMap& tensors) {
  auto w = ModelWeights<double>::zeros(config);
  for_each_tensor(w, [&](const std::string& name, auto& t) { fill(t, find(tensors, name), name); });
  return w;
}

ModelWeights<double> weights_from_gpt2(const ModelConfig& config, const TensorMap& raw,
                                       bool transposed_linear) {
  // Accept the "transformer." prefix used by some exports.
  TensorMap tensors;
  for (const auto& [name, t] : raw) {
    const std::string key = name.starts_with("transformer.") ? name.substr(12) : name;
    tensors[key] = t;
  }
  auto linear = [&](const std::string& name) {
    const auto& t = find(tensors, name);
    return transposed_linear ? transposed(t) : t;
  };
  const long d = config.d_model;
  auto w = ModelWeights<double>::zeros(config);
  fill(w.token_embedding, find(tensors, "wte.weight"), "wte.weight");
  fill(w.positional_embedding, find(tensors, "wpe.weight"), "wpe.weight");
  for (int l = 0; l < config.n_layers; ++l) {
    const std::string p = "h." + std::to_string(l) + ".";
    auto& L = w.layers[static_cast<std::size_t>(l)];
    const auto qkv = linear(p + "attn.c_attn.weight");
    const auto& qkv_b = find(tensors, p + "attn.c_attn.bias");
    fill(L.w_q, column_block(qkv, 0, d, p + "attn.c_attn.weight"), p + "attn.c_attn.weight[q]");
    fill(L.w_k, column_block(qkv, d, d, p + "attn.c_attn.weight"), p + "attn.c_attn.weight[k]");
    fill(L.w_v, column_block(qkv, 2 * d, d, p + "attn.c_attn.weight"), p + "attn.c_attn.weight[v]");
    fill(L.b_q, column_block(qkv_b, 0, d, p + "attn.c_attn.bias"), p + "attn.c_attn.bias[q]");
    fill(L.b_k, column_block(qkv_b, d, d, p + "attn.c_attn.bias"), p + "attn.c_attn.bias[k]");
    fill(L.b_v, column_block(qkv_b, 2 * d, d, p + "attn.c_attn.bias"), p + "attn.c_attn.bias[v]");
    fill(L.w_o, linear(p + "attn.c_proj.weight"), p + "attn.c_proj.weight");
    fill(L.b_o, find(tensors, p + "attn.c_proj.bias"), p + "attn.c_proj.bias");
    fill(L.ff1, linear(p + "mlp.c_fc.weight"), p + "mlp.c_fc.weight");
    fill(L.ff1_bias, find(tensors, p + "mlp.c_fc.bias"), p + "mlp.c_fc.bias");
    fill(L.ff2, linear(p + "mlp.c_proj.weight"), p + "mlp.c_proj.weight");
    fill(L.ff2_bias, find(tensors, p + "mlp.c_proj.bias"), p + "mlp.c_proj.bias");
    fill(L.ln1.gain, find(tensors, p + "ln_1.weight"), p + "ln_1.weight");
    fill(L.ln1.bias, find(tensors, p + "ln_1.bias"), p + "ln_1.bias");
    fill(L.ln2.gain, find(tensors, p + "ln_2.weight"), p + "ln_2.weight");
    fill(L.ln2.bias, find(tensors, p + "ln_2.bias"), p + "ln_2.bias");
  }
  fill(w.ln_final.gain, find(tensors, "ln_f.weight"), "ln_f.weight");
  fill(w.ln_final.bias, find(tensors, "ln_f.bias"), "ln_f.bias");
  // lm_head is [vocab, d] in both conventions; wte is tied when it is absent.
  const auto lm = raw.find("lm_head.weight");
  fill(w.unembedding, lm != raw.end() ? lm->second : find(tensors, "wte.weight"), "unembedding", true);
  return w;
}

TensorMap native_tensors(const ModelWeights<double>& weights, bool f32) {
  TensorMap out;
  for_each_tensor(weights, [&](const std::string& name, const auto& t) {
    NamedTensor nt;
    nt.dtype = f32 ? "F32" : "F64";
    if (t.rows() == 1) {
      nt.shape = {static_cast<long>(t.cols())};
    } else {
      nt.shape = {static_cast<long>(t.rows()), static_cast<long>(t.cols())};
    }
    nt.values.assign(t.data(), t.data() + t.size());
    out.emplace(name, std::move(nt));
  });
  return out;
}

LoadedModel load_model(const std::filesystem::path& manifest_path) {
  LoadedModel out;
  out.manifest = read_model_manifest(manifest_path);
  const auto tensors = read_tensor_file(out.manifest.tensors);
  out.weights = out.manifest.convention == WeightConvention::kGpt2
                    ? weights_from_gpt2(out.manifest.config, tensors, out.manifest.transposed_linear)
                    : weights_from_native(out.manifest.config, tensors);
  // Validates shapes and finiteness.
  Model<double> check(out.manifest.config, out.weights);
  if (out.manifest.vocab) {
    out.tokenizer = Tokenizer::load(*out.manifest.vocab);
    if (out.tokenizer->size() != out.manifest.config.vocab_size) {
      throw Error(ErrorKind::kShapeMismatch, "vocabulary has " + std::to_string(out.tokenizer->size()) +
                                                 " entries, model expects " +
                                                 std::to_string(out.manifest.config.vocab_size));
    }
  }
  return out;
}

void save_model(const std::filesystem::path& dir, const ModelConfig& config,
                const ModelWeights<double>& weights, const Tokenizer* tokenizer, bool f32) {
  std::filesystem::create_directories(dir);
  write_tensor_file(dir / "model.tensors", native_tensors(weights, f32));
  nlohmann::json j;
  j["convention"] = "native";
  j["transposed_linear"] = false;
  j["config"] = config_to_json(config);
  j["tensors"] = "model.tensors";
  if (tokenizer) {
    tokenizer->save(dir / "vocab.json");
    j["vocab"] = "vocab.json";
  }
  std::ofstream out(dir / "model.json");
  if (!out) throw Error(ErrorKind::kIoError, "cannot write " + (dir / "model.json").string());
  out << j.dump(2) << '\n';
}

}  // namespace revattn
