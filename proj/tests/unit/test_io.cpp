#include <gtest/gtest.h>

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <json.hpp>

#include "helpers.hpp"
#include "revattn/export.hpp"
#include "revattn/fixtures.hpp"
#include "revattn/patching.hpp"
#include "revattn/weights_io.hpp"

using namespace revattn;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("revattn_io_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

NamedTensor as_tensor(const MatrixD& m, bool vector = false) {
  NamedTensor t;
  t.dtype = "F64";
  t.shape = vector ? std::vector<long>{static_cast<long>(m.size())}
                   : std::vector<long>{static_cast<long>(m.rows()), static_cast<long>(m.cols())};
  t.values.assign(m.data(), m.data() + m.size());
  return t;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST(TensorFile, RoundTripBothDtypes) {
  const auto dir = scratch_dir("tensors");
  TensorMap m;
  m["a"] = {"F64", {2, 3}, {1, 2, 3, 4, 5, 6.25}};
  m["b.c"] = {"F32", {4}, {0.5, -1, 3, 1e-3}};
  m["empty"] = {"F32", {0}, {}};
  write_tensor_file(dir / "t.tensors", m);
  const auto back = read_tensor_file(dir / "t.tensors");
  ASSERT_EQ(back.size(), 3u);
  EXPECT_EQ(back.at("a").values, m.at("a").values);
  EXPECT_EQ(back.at("a").shape, m.at("a").shape);
  EXPECT_EQ(back.at("b.c").dtype, "F32");
  EXPECT_EQ(back.at("b.c").values[3], static_cast<double>(1e-3f));

  const auto raw = slurp(dir / "t.tensors");
  std::uint64_t header = 0;
  std::memcpy(&header, raw.data(), 8);
  EXPECT_EQ(header % 8, 0u);
  EXPECT_NO_THROW(nlohmann::json::parse(raw.substr(8, header)));
}

TEST(TensorFile, CorruptInput) {
  const auto dir = scratch_dir("corrupt");
  std::ofstream(dir / "short.tensors") << "abc";
  EXPECT_THROW(read_tensor_file(dir / "short.tensors"), Error);
  EXPECT_THROW(read_tensor_file(dir / "none.tensors"), Error);
  TensorMap m;
  m["a"] = {"F64", {2}, {1, 2}};
  write_tensor_file(dir / "ok.tensors", m);
  auto raw = slurp(dir / "ok.tensors");
  raw.resize(raw.size() - 4);
  std::ofstream(dir / "cut.tensors", std::ios::binary) << raw;
  EXPECT_THROW(read_tensor_file(dir / "cut.tensors"), Error);
}

TEST(ModelFiles, NativeRoundTrip) {
  const auto dir = scratch_dir("native");
  const auto c = test::tiny_config();
  const auto m = test::random_model(c, 3);
  const Tokenizer tok(std::vector<std::string>{"a", "b", "c", "d", "e", "f", "g", "h", "i", "j", "k"});
  save_model(dir, c, m.weights(), &tok);
  const auto loaded = load_model(dir / "model.json");
  EXPECT_EQ(loaded.manifest.config.d_model, c.d_model);
  EXPECT_EQ(loaded.manifest.config.ln_mode, c.ln_mode);
  EXPECT_EQ(loaded.weights.layers[1].w_v, m.weights().layers[1].w_v);
  EXPECT_EQ(loaded.weights.unembedding, m.weights().unembedding);
  ASSERT_TRUE(loaded.tokenizer);
  EXPECT_EQ(loaded.tokenizer->size(), 11);
}

TEST(ModelFiles, VocabularyMismatch) {
  const auto dir = scratch_dir("vocab");
  const auto c = test::tiny_config();
  const Tokenizer tok(std::vector<std::string>{"a", "b"});
  save_model(dir, c, test::random_model(c, 3).weights(), &tok);
  EXPECT_THROW(load_model(dir / "model.json"), Error);
}

TEST(ModelFiles, Gpt2Mapping) {
  const auto c = test::tiny_config(2, 2, 8, 6);
  auto w = test::random_model(c, 5).weights();
  w.unembedding = w.token_embedding.transpose();

  for (bool transposed : {false, true}) {
    TensorMap t;
    auto linear = [&](const MatrixD& m) { return as_tensor(transposed ? MatrixD(m.transpose()) : m); };
    t["transformer.wte.weight"] = as_tensor(w.token_embedding);
    t["transformer.wpe.weight"] = as_tensor(w.positional_embedding);
    for (int l = 0; l < 2; ++l) {
      const auto& L = w.layers[l];
      const std::string p = "transformer.h." + std::to_string(l) + ".";
      MatrixD qkv(8, 24);
      qkv << L.w_q, L.w_k, L.w_v;
      RowVectorD qkv_b(24);
      qkv_b << L.b_q, L.b_k, L.b_v;
      t[p + "attn.c_attn.weight"] = linear(qkv);
      t[p + "attn.c_attn.bias"] = as_tensor(qkv_b, true);
      t[p + "attn.c_proj.weight"] = linear(L.w_o);
      t[p + "attn.c_proj.bias"] = as_tensor(L.b_o, true);
      t[p + "mlp.c_fc.weight"] = linear(L.ff1);
      t[p + "mlp.c_fc.bias"] = as_tensor(L.ff1_bias, true);
      t[p + "mlp.c_proj.weight"] = linear(L.ff2);
      t[p + "mlp.c_proj.bias"] = as_tensor(L.ff2_bias, true);
      t[p + "ln_1.weight"] = as_tensor(L.ln1.gain, true);
      t[p + "ln_1.bias"] = as_tensor(L.ln1.bias, true);
      t[p + "ln_2.weight"] = as_tensor(L.ln2.gain, true);
      t[p + "ln_2.bias"] = as_tensor(L.ln2.bias, true);
    }
    t["transformer.ln_f.weight"] = as_tensor(w.ln_final.gain, true);
    t["transformer.ln_f.bias"] = as_tensor(w.ln_final.bias, true);

    const auto got = weights_from_gpt2(c, t, transposed);
    for_each_tensor(got, [&](const std::string& name, const auto& g) {
      bool seen = false;
      for_each_tensor(w, [&](const std::string& n2, const auto& e) {
        if (n2 == name) {
          seen = true;
          EXPECT_EQ(g, e) << name << (transposed ? " (transposed)" : "");
        }
      });
      EXPECT_TRUE(seen);
    });

    t.erase("transformer.h.1.mlp.c_fc.bias");
    EXPECT_THROW(weights_from_gpt2(c, t, transposed), Error);
  }
}

TEST(Export, RaJson) {
  const auto dir = scratch_dir("ra_json");
  MatrixD r(2, 2);
  r << 0, 0, -0.5, 0.5;
  write_ra_json(dir / "r.json", {"toy", {3, 4}, 7, 1, 2, &r});
  const auto j = nlohmann::json::parse(slurp(dir / "r.json"));
  EXPECT_EQ(j["model"], "toy");
  EXPECT_EQ(j["layer"], 1);
  EXPECT_EQ(j["head"], 2);
  EXPECT_EQ(j["n"], 2);
  EXPECT_EQ(j["target_id"], 7);
  EXPECT_EQ(j["R"][1][0].get<double>(), -0.5);
}

TEST(Export, MatrixCsvRoundTripIsExact) {
  const auto dir = scratch_dir("csv");
  MatrixD m = MatrixD::Random(4, 3);
  m(0, 0) = 0.1;
  m(1, 1) = -1e-300;
  write_matrix_csv(dir / "m.csv", m);
  EXPECT_EQ(read_matrix_csv(dir / "m.csv"), m);
  EXPECT_EQ(format_double(0.1), "0.1");
}

TEST(Export, PgmScaling) {
  MatrixD m(1, 3);
  m << -2, 0, 2;
  const auto px = pgm_pixels(m);
  EXPECT_EQ(px, (std::vector<unsigned char>{1, 128, 255}));
  EXPECT_EQ(pgm_pixels(MatrixD::Zero(2, 2)), std::vector<unsigned char>(4, 128));

  const auto dir = scratch_dir("pgm");
  write_pgm(dir / "m.pgm", m, 2);
  const auto raw = slurp(dir / "m.pgm");
  const std::string header = "P5\n6 2\n255\n";
  ASSERT_EQ(raw.size(), header.size() + 12);
  EXPECT_EQ(raw.substr(0, header.size()), header);
  EXPECT_EQ(static_cast<unsigned char>(raw[header.size() + 11]), 255);
  EXPECT_THROW(write_pgm(dir / "bad.pgm", m, 0), Error);
}

TEST(Export, ScoresCsv) {
  const auto dir = scratch_dir("scores");
  HeadScoreMap s;
  s.scores = MatrixD::Zero(2, 3);
  s.scores(1, 2) = 0.25;
  write_scores_csv(dir / "s.csv", s);
  EXPECT_EQ(slurp(dir / "s.csv"), "layer,h0,h1,h2\n0,0,0,0\n1,0,0,0.25\n");
}

TEST(Export, PatchBankRoundTrip) {
  const auto dir = scratch_dir("bank");
  PatchBank b{3, 1, 2, PatchSource::kForwardAttention, 5, {MatrixD::Random(3, 3), MatrixD::Random(3, 3)}};
  save_patch_bank(dir, b);
  const auto back = load_patch_bank(dir);
  EXPECT_EQ(back.n, 3);
  EXPECT_EQ(back.source, PatchSource::kForwardAttention);
  EXPECT_EQ(back.train_count, 5);
  EXPECT_EQ(back.map(0, 1), b.map(0, 1));
}

namespace {

FixtureBundle small_fixture(DType dtype) {
  auto c = test::tiny_config(2, 2, 8, 5);
  c.dtype = dtype;
  const auto m = test::random_model(c, 8);
  return make_fixture(c, m.weights(), test::random_tokens(c, 5, 8), 3, 8);
}

}  // namespace

TEST(Fixtures, SelfConsistent) {
  for (auto dt : {DType::kF64, DType::kF32}) {
    const auto r = check_fixture(small_fixture(dt));
    EXPECT_TRUE(r.pass);
    EXPECT_TRUE(r.failures.empty());
    EXPECT_GT(r.checks.size(), 8u);
  }
}

TEST(Fixtures, ZeroModel) {
  const auto c = test::tiny_config();
  const auto b = make_fixture(c, ModelWeights<double>::zeros(c), {1, 2, 3}, 0, 0);
  EXPECT_TRUE(check_fixture(b).pass);
  EXPECT_NEAR(b.tensors.at("loss").values[0], std::log(11.0), 1e-6);
}

TEST(Fixtures, DiskRoundTrip) {
  const auto dir = scratch_dir("fixture");
  const auto b = small_fixture(DType::kF32);
  write_fixture(dir, b);
  const auto back = read_fixture(dir);
  EXPECT_EQ(back.token_ids, b.token_ids);
  EXPECT_EQ(back.target_id, b.target_id);
  EXPECT_EQ(back.tensors.size(), b.tensors.size());
  EXPECT_EQ(back.config.n_heads, b.config.n_heads);
  EXPECT_TRUE(check_fixture(back).pass);
}

TEST(Fixtures, DetectsPerturbedLogits) {
  auto b = small_fixture(DType::kF64);
  auto& logits = b.tensors.at("logits").values;
  double peak = 0.0;
  for (double v : logits) peak = std::max(peak, std::abs(v));
  logits[3] += 1e-2 * peak;
  const auto r = check_fixture(b);
  EXPECT_FALSE(r.pass);
  ASSERT_EQ(r.failures.size(), 1u);
  EXPECT_EQ(r.failures[0], "logits");
}

TEST(Fixtures, DetectsPerturbedRa) {
  auto b = small_fixture(DType::kF64);
  b.tensors.at("ra.1.0").values[5] += 1e-3;
  const auto r = check_fixture(b);
  EXPECT_FALSE(r.pass);
  EXPECT_EQ(r.failures, std::vector<std::string>{"ra.1.0"});
}

TEST(Fixtures, MissingTensor) {
  auto b = small_fixture(DType::kF64);
  b.tensors.erase("ra.0.1");
  try {
    check_fixture(b);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kFixtureCorrupt);
  }
  const auto dir = scratch_dir("fixture_missing");
  EXPECT_THROW(read_fixture(dir), Error);
}

// Bundles produced by an external reference implementation, when available.
TEST(Fixtures, ExternalBundles) {
  const char* root = std::getenv("REVATTN_FIXTURE_DIR");
  if (!root || !fs::is_directory(root)) GTEST_SKIP() << "REVATTN_FIXTURE_DIR not set";
  int seen = 0;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (!fs::exists(entry.path() / "manifest.json")) continue;
    const auto r = check_fixture(read_fixture(entry.path()));
    EXPECT_TRUE(r.pass) << entry.path();
    ++seen;
  }
  EXPECT_GT(seen, 0);
}
