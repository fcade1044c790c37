#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <limits>

#include "helpers.hpp"

using namespace revattn;
using revattn::test::random_model;
using revattn::test::random_tokens;
using revattn::test::tiny_config;

TEST(Config, RejectsIndivisibleHeads) {
  auto c = tiny_config();
  c.n_heads = 3;
  try {
    c.validate();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kInvalidConfig);
    EXPECT_EQ(e.exit_code(), ExitCode::kValidation);
  }
}

TEST(Config, RejectsZeroCounts) {
  auto c = tiny_config();
  c.max_seq_len = 0;
  EXPECT_THROW(c.validate(), Error);
}

TEST(Model, RejectsNonFiniteWeights) {
  const auto c = tiny_config();
  auto w = ModelWeights<double>::zeros(c);
  w.layers[1].ff2(0, 0) = std::numeric_limits<double>::quiet_NaN();
  try {
    Model<double> m(c, w);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kNumericalError);
    EXPECT_NE(std::string(e.what()).find("layers.1.ff2"), std::string::npos);
  }
}

TEST(Model, RejectsWrongShape) {
  const auto c = tiny_config();
  auto w = ModelWeights<double>::zeros(c);
  w.unembedding.resize(c.d_model, c.vocab_size + 1);
  EXPECT_THROW((Model<double>(c, w)), Error);
}

TEST(Model, HeadViewsReassembleFullMatrices) {
  const auto m = random_model(tiny_config(1, 4, 8), 3);
  const auto& L = m.weights().layers[0];
  MatrixD q(8, 8), o(8, 8);
  for (int h = 0; h < 4; ++h) {
    q.middleCols(2 * h, 2) = L.query_head(h, 2);
    o.middleRows(2 * h, 2) = L.output_head(h, 2);
  }
  EXPECT_EQ(q, L.w_q);
  EXPECT_EQ(o, L.w_o);
}

TEST(Embed, SingleToken) {
  const auto c = tiny_config();
  auto w = ModelWeights<double>::zeros(c);
  w.token_embedding.row(0).setLinSpaced(1.0, 8.0);
  w.positional_embedding.row(0).setConstant(0.5);
  const std::vector<int> ids{0};
  const auto x = embed(c, w, ids);
  ASSERT_EQ(x.rows(), 1);
  EXPECT_EQ(x.row(0), w.token_embedding.row(0) + w.positional_embedding.row(0));
}

TEST(Embed, ZeroPositionsGiveTokenRows) {
  const auto c = tiny_config();
  auto w = random_model(c, 1).weights();
  w.positional_embedding.setZero();
  const std::vector<int> ids{3, 1, 4};
  const auto x = embed(c, w, ids);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(x.row(i), w.token_embedding.row(ids[i]));
}

TEST(Embed, Errors) {
  const auto c = tiny_config();
  const auto w = ModelWeights<double>::zeros(c);
  auto kind_of = [&](std::vector<int> ids) {
    try {
      embed(c, w, ids);
    } catch (const Error& e) {
      return e.kind();
    }
    return ErrorKind::kIoError;
  };
  EXPECT_EQ(kind_of({11}), ErrorKind::kInvalidToken);
  EXPECT_EQ(kind_of({-1}), ErrorKind::kInvalidToken);
  EXPECT_EQ(kind_of({0, 0, 0, 0, 0, 0, 0}), ErrorKind::kSequenceTooLong);
  EXPECT_EQ(kind_of({}), ErrorKind::kEmptyInput);
}

TEST(Attention, SingleTokenIsExactlyOne) {
  const auto c = tiny_config();
  const auto m = random_model(c, 2);
  const MatrixD x = MatrixD::Random(1, c.d_model);
  const auto h = attention_head_forward(x, m.weights().layers[0], c, 0, 1);
  EXPECT_EQ(h.attn(0, 0), 1.0);
  const MatrixD expect = h.v * m.weights().layers[0].output_head(1, c.head_dim());
  EXPECT_TRUE(h.out.isApprox(expect, 1e-15));
}

TEST(Attention, ZeroScoresGiveUniformCausalRows) {
  const auto c = tiny_config(1, 2, 8, 6, LnMode::kNone);
  auto w = random_model(c, 4).weights();
  w.layers[0].w_q.setZero();
  w.layers[0].b_q.setZero();
  const MatrixD x = MatrixD::Random(2, c.d_model);
  const auto h = attention_head_forward(x, w.layers[0], c, 0, 0);
  EXPECT_EQ(h.attn(0, 0), 1.0);
  EXPECT_EQ(h.attn(0, 1), 0.0);
  EXPECT_DOUBLE_EQ(h.attn(1, 0), 0.5);
  EXPECT_DOUBLE_EQ(h.attn(1, 1), 0.5);
}

TEST(Attention, NonFiniteOutputNamesLocation) {
  const auto c = tiny_config(2, 2, 8, 6, LnMode::kNone);
  auto w = ModelWeights<double>::zeros(c);
  w.layers[1].w_v.setConstant(1e200);
  w.layers[1].w_o.setConstant(1e200);
  w.token_embedding.setConstant(1.0);
  const Model<double> m(c, w);
  const std::vector<int> ids{1, 2};
  try {
    model_forward(m, ids);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kNumericalError);
    EXPECT_EQ(e.exit_code(), ExitCode::kNumerical);
    EXPECT_NE(std::string(e.what()).find("layer 1 head 0"), std::string::npos);
  }
}

TEST(Block, ZeroWeightsAreIdentity) {
  for (auto ln : {LnMode::kNone, LnMode::kPreLn}) {
    const auto c = tiny_config(1, 2, 8, 6, ln);
    auto w = random_model(c, 5).weights();
    w.layers[0].w_o.setZero();
    w.layers[0].b_o.setZero();
    w.layers[0].ff2.setZero();
    w.layers[0].ff2_bias.setZero();
    const MatrixD x = MatrixD::Random(4, c.d_model);
    EXPECT_EQ(block_forward(x, w.layers[0], c, 0).output, x);
  }
}

TEST(Block, HandEvaluatedTwoDimensionalInstance) {
  // d = 2, one head, no layer norm: X' = X + Attn(X) + MLP(Attn(X) + X).
  ModelConfig c;
  c.n_layers = 1;
  c.n_heads = 1;
  c.d_model = 2;
  c.d_mlp = 1;
  c.vocab_size = 2;
  c.max_seq_len = 2;
  c.ln_mode = LnMode::kNone;
  auto w = ModelWeights<double>::zeros(c);
  auto& L = w.layers[0];
  L.w_q << 1, 0, 0, 1;
  L.w_k << 1, 0, 0, 1;
  L.w_v << 2, 0, 0, 1;
  L.w_o << 0, 1, 1, 0;
  L.ff1 << 1, 1;
  L.ff2 << 1, -1;
  MatrixD x(2, 2);
  x << 1, 0, 0, 1;
  const auto t = block_forward(x, L, c, 0);

  // Scores QK^T / sqrt(2) = I / sqrt(2); row 1 mixes positions 0 and 1.
  const double s = 1.0 / std::sqrt(2.0);
  const double a10 = 1.0 / (1.0 + std::exp(s));
  const double a11 = 1.0 - a10;
  // V = [[2, 0], [0, 1]]; head = A V W_o.
  MatrixD attn(2, 2);
  attn << 0, 2, a11, 2 * a10;
  MatrixD mid = x + attn;
  MatrixD mlp(2, 2);
  for (int i = 0; i < 2; ++i) {
    const double g = gelu(mid(i, 0) + mid(i, 1));
    mlp(i, 0) = g;
    mlp(i, 1) = -g;
  }
  EXPECT_TRUE(t.output.isApprox(mid + mlp, 1e-14));
}

TEST(Forward, AttentionRowsAreStochasticAndCausal) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto c = tiny_config(2, 2, 8, 6);
    const auto md = random_model<double>(c, seed);
    const auto mf = random_model<float>(c, seed);
    const auto ids = random_tokens(c, 6, seed + 100);
    const auto td = model_forward(md, ids);
    const auto tf = model_forward(mf, ids);
    for (int l = 0; l < 2; ++l) {
      for (int h = 0; h < 2; ++h) {
        const auto& ad = td.layers[l].heads[h].attn;
        const auto& af = tf.layers[l].heads[h].attn;
        for (int i = 0; i < 6; ++i) {
          EXPECT_NEAR(ad.row(i).sum(), 1.0, 1e-12);
          EXPECT_NEAR(af.row(i).sum(), 1.0f, 1e-6f);
          for (int j = i + 1; j < 6; ++j) {
            EXPECT_EQ(ad(i, j), 0.0);
            EXPECT_EQ(af(i, j), 0.0f);
          }
        }
      }
    }
  }
}

TEST(Forward, FusedProjectionMatchesPerHead) {
  const auto c = tiny_config(1, 4, 16, 5, LnMode::kNone);
  const auto m = random_model(c, 9);
  const auto& L = m.weights().layers[0];
  const MatrixD x = MatrixD::Random(5, 16);
  MatrixD q = x * L.w_q;
  q.rowwise() += L.b_q;
  const auto dh = c.head_dim();
  for (int h = 0; h < 4; ++h) {
    const auto t = attention_head_forward(x, L, c, 0, h);
    EXPECT_LE((q.middleCols(h * dh, dh) - t.q).cwiseAbs().maxCoeff(), 1e-6);
  }
}

TEST(Forward, ResidualOnlyWhenAllWeightsZero) {
  const auto c = tiny_config(2, 2, 8, 6, LnMode::kNone);
  auto w = random_model(c, 11).weights();
  for (auto& L : w.layers) {
    L.w_o.setZero();
    L.b_o.setZero();
    L.ff2.setZero();
    L.ff2_bias.setZero();
  }
  const Model<double> m(c, w);
  const auto ids = random_tokens(c, 5, 3);
  const auto t = model_forward(m, ids);
  EXPECT_EQ(t.logits, embed(c, w, ids) * w.unembedding);
}

TEST(Forward, Deterministic) {
  const auto c = tiny_config();
  const auto m = random_model<float>(c, 12);
  const auto ids = random_tokens(c, 6, 1);
  const auto a = model_forward(m, ids).logits;
  const auto b = model_forward(m, ids).logits;
  ASSERT_EQ(a.size(), b.size());
  EXPECT_EQ(std::memcmp(a.data(), b.data(), sizeof(float) * a.size()), 0);
}

TEST(Loss, UniformLogitsGiveLogVocab) {
  const MatrixD logits = MatrixD::Zero(3, 7);
  const auto r = loss_and_logit_grad(logits, 2);
  EXPECT_NEAR(r.loss, std::log(7.0), 1e-15);
  EXPECT_TRUE(r.dlogits.topRows(2).isZero());
  EXPECT_NEAR(r.dlogits(2, 2), 1.0 / 7 - 1.0, 1e-15);
  EXPECT_NEAR(r.dlogits.row(2).sum(), 0.0, 1e-15);
}

TEST(Loss, PerfectPrediction) {
  MatrixD logits = MatrixD::Zero(1, 5);
  logits(0, 4) = 100.0;
  const auto r = loss_and_logit_grad(logits, 4);
  EXPECT_LT(r.loss, 1e-40);
  EXPECT_LT(r.dlogits.cwiseAbs().maxCoeff(), 1e-40);
}

TEST(Loss, InvalidTarget) {
  const MatrixD logits = MatrixD::Zero(1, 5);
  EXPECT_THROW(loss_and_logit_grad(logits, 5), Error);
  EXPECT_THROW(loss_and_logit_grad(logits, -1), Error);
}

TEST(Argmax, TiesGoToLowestIndex) {
  MatrixD logits(2, 4);
  logits << 9, 9, 9, 9, 0, 3, 3, 1;
  EXPECT_EQ(argmax_last(logits), 1);
}
