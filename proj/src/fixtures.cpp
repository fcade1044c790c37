#include "revattn/fixtures.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "config_json.hpp"
#include "revattn/backward.hpp"

namespace revattn {

namespace {

std::string ra_name(int l, int h) { return "ra." + std::to_string(l) + "." + std::to_string(h); }

NamedTensor to_named(const MatrixD& m, bool vector_shape = false) {
  NamedTensor t;
  t.dtype = "F32";
  if (vector_shape) {
    t.shape = {static_cast<long>(m.size())};
  } else {
    t.shape = {static_cast<long>(m.rows()), static_cast<long>(m.cols())};
  }
  t.values.assign(m.data(), m.data() + m.size());
  return t;
}

const NamedTensor& require(const TensorMap& t, const std::string& name) {
  const auto it = t.find(name);
  if (it == t.end()) throw Error(ErrorKind::kFixtureCorrupt, "fixture is missing tensor '" + name + "'");
  return it->second;
}

void require_count(const NamedTensor& t, long count, const std::string& name) {
  if (static_cast<long>(t.values.size()) != count) {
    throw Error(ErrorKind::kFixtureCorrupt, "fixture tensor '" + name + "' has " +
                                                std::to_string(t.values.size()) + " values, expected " +
                                                std::to_string(count));
  }
}

template <typename Derived>
double relative_error(const Eigen::MatrixBase<Derived>& actual, const NamedTensor& expected,
                      const std::string& name, double floor = 1e-12) {
  require_count(expected, static_cast<long>(actual.size()), name);
  double diff = 0.0, scale = floor;
  for (Eigen::Index i = 0; i < actual.rows(); ++i) {
    for (Eigen::Index j = 0; j < actual.cols(); ++j) {
      const double b = expected.values[static_cast<std::size_t>(i * actual.cols() + j)];
      diff = std::max(diff, std::abs(static_cast<double>(actual(i, j)) - b));
      scale = std::max(scale, std::abs(b));
    }
  }
  return diff / scale;
}

double absolute_error(const MatrixD& actual, const NamedTensor& expected, const std::string& name) {
  require_count(expected, static_cast<long>(actual.size()), name);
  double diff = 0.0;
  for (Eigen::Index k = 0; k < actual.size(); ++k) {
    diff = std::max(diff, std::abs(actual.data()[k] - expected.values[static_cast<std::size_t>(k)]));
  }
  return diff;
}

template <typename T>
FixtureReport check_typed(const FixtureBundle& b) {
  const auto& c = b.config;
  auto w = ModelWeights<double>::zeros(c);
  for_each_tensor(w, [&](const std::string& name, auto& t) {
    const auto& src = require(b.tensors, "weight." + name);
    require_count(src, static_cast<long>(t.size()), "weight." + name);
    for (Eigen::Index k = 0; k < t.size(); ++k) t.data()[k] = src.values[static_cast<std::size_t>(k)];
  });
  const Model<T> model(c, w.template cast<T>());
  const auto run = run_reversed_attention(model, b.token_ids, b.target_id);

  FixtureReport report;
  auto add = [&](std::string name, double error, double tol, bool relative) {
    const bool ok = std::isfinite(error) && error <= tol;
    report.checks.push_back({name, error, tol, relative, ok});
    if (!ok) {
      report.pass = false;
      report.failures.push_back(std::move(name));
    }
  };

  add("logits", relative_error(run.trace.logits, require(b.tensors, "logits"), "logits"),
      b.tolerances.logits_rel, true);
  const auto& loss = require(b.tensors, "loss");
  require_count(loss, 1, "loss");
  add("loss", std::abs(run.loss.loss - loss.values[0]) / std::max(std::abs(loss.values[0]), 1e-12),
      b.tolerances.logits_rel, true);

  for (int l = 0; l < c.n_layers; ++l) {
    for (const char* kind : {"w_q", "w_k", "w_v", "w_o"}) {
      require(b.tensors, "grad.layers." + std::to_string(l) + "." + kind);
    }
  }
  // Some gradients are identically zero (the key bias) and hold only rounding
  // noise, so the denominator is floored at a fraction of the largest
  // gradient in the bundle.
  double grad_scale = 0.0;
  for (const auto& [name, t] : b.tensors) {
    if (!name.starts_with("grad.")) continue;
    for (double v : t.values) grad_scale = std::max(grad_scale, std::abs(v));
  }
  const double grad_floor = std::max(1e-3 * grad_scale, 1e-12);
  for_each_tensor(*run.backward.grads, [&](const std::string& name, const auto& g) {
    const auto it = b.tensors.find("grad." + name);
    if (it == b.tensors.end()) return;
    add("grad." + name, relative_error(g, it->second, "grad." + name, grad_floor), b.tolerances.grad_rel,
        true);
  });
  for (int l = 0; l < c.n_layers; ++l) {
    for (int h = 0; h < c.n_heads; ++h) {
      const auto name = ra_name(l, h);
      add(name, absolute_error(run.backward.ra(l, h), require(b.tensors, name), name), b.tolerances.ra_abs,
          false);
    }
  }
  return report;
}

}  // namespace

FixtureBundle read_fixture(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw Error(ErrorKind::kIoError, "cannot open " + (dir / "manifest.json").string());
  std::ifstream bin(dir / "tensors.bin", std::ios::binary);
  if (!bin) throw Error(ErrorKind::kIoError, "cannot open " + (dir / "tensors.bin").string());
  const std::vector<char> payload((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());

  FixtureBundle b;
  try {
    nlohmann::json j;
    in >> j;
    b.config = config_from_json(j.at("config"));
    b.seed = j.value("seed", std::uint64_t{0});
    if (j.contains("tolerances")) {
      const auto& t = j["tolerances"];
      b.tolerances.logits_rel = t.value("logits_rel", b.tolerances.logits_rel);
      b.tolerances.grad_rel = t.value("grad_rel", b.tolerances.grad_rel);
      b.tolerances.ra_abs = t.value("ra_abs", b.tolerances.ra_abs);
    }
    b.token_ids = j.at("token_ids").get<std::vector<int>>();
    b.target_id = j.at("target_id").get<int>();
    for (const auto& [name, info] : j.at("tensors").items()) {
      NamedTensor t;
      const auto dtype = info.value("dtype", std::string("f32"));
      if (dtype != "f32") throw Error(ErrorKind::kFixtureCorrupt, "tensor '" + name + "' is not f32");
      t.dtype = "F32";
      t.shape = info.at("shape").get<std::vector<long>>();
      const auto offset = info.at("offset").get<std::uint64_t>();
      long count = 1;
      for (long s : t.shape) count *= s;
      if (count < 0 || offset + static_cast<std::uint64_t>(count) * 4 > payload.size()) {
        throw Error(ErrorKind::kFixtureCorrupt, "tensor '" + name + "' runs past the end of tensors.bin");
      }
      t.values.resize(static_cast<std::size_t>(count));
      for (long k = 0; k < count; ++k) {
        float f;
        std::memcpy(&f, payload.data() + offset + 4 * static_cast<std::uint64_t>(k), 4);
        t.values[static_cast<std::size_t>(k)] = f;
      }
      b.tensors.emplace(name, std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kFixtureCorrupt, "fixture manifest: " + std::string(e.what()));
  }
  validate_tokens(b.config, b.token_ids);
  if (b.target_id < 0 || b.target_id >= b.config.vocab_size) {
    throw Error(ErrorKind::kFixtureCorrupt, "fixture target id out of range");
  }
  return b;
}

void write_fixture(const std::filesystem::path& dir, const FixtureBundle& b) {
  std::filesystem::create_directories(dir);
  nlohmann::json index = nlohmann::json::object();
  std::string payload;
  for (const auto& [name, t] : b.tensors) {
    index[name] = {{"dtype", "f32"}, {"shape", t.shape}, {"offset", payload.size()}};
    for (double v : t.values) {
      const float f = static_cast<float>(v);
      char buf[4];
      std::memcpy(buf, &f, 4);
      payload.append(buf, 4);
    }
  }
  nlohmann::json j;
  j["config"] = config_to_json(b.config);
  j["seed"] = b.seed;
  j["tolerances"] = {{"logits_rel", b.tolerances.logits_rel},
                     {"grad_rel", b.tolerances.grad_rel},
                     {"ra_abs", b.tolerances.ra_abs}};
  j["token_ids"] = b.token_ids;
  j["target_id"] = b.target_id;
  j["ra_level"] = "unscaled QK^T product";
  j["tensors"] = index;
  std::ofstream out(dir / "manifest.json");
  if (!out) throw Error(ErrorKind::kIoError, "cannot write " + (dir / "manifest.json").string());
  out << j.dump(2) << '\n';
  std::ofstream bin(dir / "tensors.bin", std::ios::binary);
  if (!bin) throw Error(ErrorKind::kIoError, "cannot write " + (dir / "tensors.bin").string());
  bin.write(payload.data(), static_cast<std::streamsize>(payload.size()));
}

FixtureBundle make_fixture(const ModelConfig& config, const ModelWeights<double>& weights,
                           std::vector<int> tokens, int target, std::uint64_t seed) {
  FixtureBundle b;
  b.config = config;
  b.seed = seed;
  b.token_ids = std::move(tokens);
  b.target_id = target;
  // Payloads are f32, so the reference is computed from the rounded weights.
  const ModelWeights<double> rounded = weights.cast<float>().cast<double>();
  const Model<double> model(config, rounded);
  const auto run = run_reversed_attention(model, b.token_ids, target);
  for_each_tensor(rounded, [&](const std::string& name, const auto& t) {
    b.tensors.emplace("weight." + name, to_named(t, t.rows() == 1));
  });
  for_each_tensor(*run.backward.grads, [&](const std::string& name, const auto& t) {
    b.tensors.emplace("grad." + name, to_named(t, t.rows() == 1));
  });
  b.tensors.emplace("logits", to_named(run.trace.logits));
  MatrixD loss(1, 1);
  loss(0, 0) = run.loss.loss;
  b.tensors.emplace("loss", to_named(loss, true));
  for (int l = 0; l < config.n_layers; ++l) {
    for (int h = 0; h < config.n_heads; ++h) b.tensors.emplace(ra_name(l, h), to_named(run.backward.ra(l, h)));
  }
  return b;
}

FixtureReport check_fixture(const FixtureBundle& bundle) {
  return bundle.config.dtype == DType::kF64 ? check_typed<double>(bundle) : check_typed<float>(bundle);
}

}  // namespace revattn
