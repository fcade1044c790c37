#include "revattn/constructed.hpp"

#include <cmath>

#include "revattn/rng.hpp"

namespace revattn {

namespace {

constexpr int kPositionBase = 16;
constexpr int kAnswerBase = 24;
constexpr int kQuestionToken = 8;   // "Q:"
constexpr int kNewlineToken = 9;    // "\n"
constexpr int kAnswerToken = 10;    // "A:"
constexpr int kFallbackToken = 11;  // " ?"
constexpr int kAnswerPosition = 2;
constexpr std::uint64_t kModelStream = 0x6d6f64656c;  // "model"
constexpr std::uint64_t kTaskStream = 0x7461736b;     // "task"

// Head that reads the "A:" token as its query, keys on the answer position
// and writes the attended letter into the answer channel.
void wire_copy_head(LayerWeights<double>& L, int head, int dh, double preference, double gain) {
  const int base = head * dh;
  L.w_q(kAnswerToken, base) = 1.0;
  L.w_k(kPositionBase + kAnswerPosition, base) = std::sqrt(static_cast<double>(dh)) * std::log(preference);
  for (int c = 0; c < kConstructedLetters; ++c) {
    L.w_v(c, base + c) = 1.0;
    L.w_o(base + c, kAnswerBase + c) = gain;
  }
}

}  // namespace

Tokenizer constructed_tokenizer() {
  std::vector<std::string> vocab;
  for (int c = 0; c < kConstructedLetters; ++c) vocab.push_back(bytes_to_unicode(std::string(" ") + char('a' + c)));
  for (const char* t : {"Q:", "\n", "A:", " ?", " ", "Q", ":", "A"}) vocab.push_back(bytes_to_unicode(t));
  return Tokenizer(std::move(vocab));
}

ConstructedModel build_constructed_model(const ConstructedOptions& o) {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 12;
  c.d_model = 96;
  c.d_mlp = 4;
  c.vocab_size = 16;
  c.max_seq_len = 8;
  c.ln_mode = LnMode::kNone;
  c.dtype = DType::kF64;
  const int dh = c.head_dim();

  Rng rng(derive_seed(o.seed, kModelStream));
  const int total = c.total_heads();
  const int crit = static_cast<int>(rng.index(static_cast<std::size_t>(total)));
  int supp = static_cast<int>(rng.index(static_cast<std::size_t>(total - 1)));
  if (supp >= crit) ++supp;

  auto w = ModelWeights<double>::zeros(c);
  for (int t = 0; t < c.vocab_size; ++t) w.token_embedding(t, t) = 1.0;
  for (int p = 0; p < c.max_seq_len; ++p) w.positional_embedding(p, kPositionBase + p) = 1.0;
  for (int k = 0; k < kConstructedLetters; ++k) w.unembedding(kAnswerBase + k, k) = 1.0;
  w.unembedding(kAnswerToken, kFallbackToken) = o.fallback_logit;

  ConstructedModel out{c, {}, constructed_tokenizer(), {crit / c.n_heads, crit % c.n_heads}, std::nullopt};
  if (o.support_head) out.support = HeadId{supp / c.n_heads, supp % c.n_heads};

  for (int k = 0; k < total; ++k) {
    auto& L = w.layers[static_cast<std::size_t>(k / c.n_heads)];
    const int head = k % c.n_heads;
    if (k == crit) {
      wire_copy_head(L, head, dh, o.critical_preference, o.critical_gain);
    } else if (o.support_head && k == supp) {
      wire_copy_head(L, head, dh, o.support_preference, o.support_gain);
    } else {
      for (int i = 0; i < c.d_model; ++i) {
        for (int j = head * dh; j < (head + 1) * dh; ++j) {
          L.w_q(i, j) = o.passthrough_qkv_scale * rng.normal();
          L.w_k(i, j) = o.passthrough_qkv_scale * rng.normal();
          L.w_v(i, j) = o.passthrough_qkv_scale * rng.normal();
        }
      }
      for (int i = head * dh; i < (head + 1) * dh; ++i) {
        for (int j = 0; j < c.d_model; ++j) L.w_o(i, j) = o.passthrough_out_scale * rng.normal();
      }
    }
  }
  out.weights = std::move(w);
  return out;
}

TaskSet constructed_task(std::uint64_t seed, int pairs) {
  if (pairs < 3) throw Error(ErrorKind::kInvalidConfig, "constructed task needs at least 3 pairs");
  TaskSet task;
  task.name = "constructed_copy";
  task.kind = TemplateKind::kIcl;
  task.split_seed = seed;
  Rng rng(derive_seed(seed, kTaskStream));
  for (int i = 0; i < pairs; ++i) {
    std::string q;
    char letters[4];
    for (int k = 0; k < 4; ++k) {
      letters[k] = static_cast<char>('a' + rng.index(kConstructedLetters));
      if (k) q += ' ';
      q += letters[k];
    }
    task.pairs.push_back({q, std::string(1, letters[1])});
  }
  return task;
}

}  // namespace revattn
