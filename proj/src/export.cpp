#include "revattn/export.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <fmt/format.h>
#include <json.hpp>

#include "revattn/weights_io.hpp"

namespace revattn {

namespace {

std::ofstream open_out(const std::filesystem::path& path, bool binary = false) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, binary ? std::ios::binary : std::ios::out);
  if (!out) throw Error(ErrorKind::kIoError, "cannot write " + path.string());
  return out;
}

nlohmann::json matrix_json(const MatrixD& m) {
  auto rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    auto row = nlohmann::json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

nlohmann::json heads_json(const std::vector<HeadId>& heads) {
  auto out = nlohmann::json::array();
  for (const auto& h : heads) out.push_back({h.layer, h.head});
  return out;
}

}  // namespace

std::string format_double(double v) { return fmt::format("{}", v); }

void write_ra_json(const std::filesystem::path& path, const RaMapRecord& r) {
  if (!r.map) throw Error(ErrorKind::kEmptyInput, "RA record has no map");
  nlohmann::json j;
  j["model"] = r.model;
  j["prompt_ids"] = r.prompt_ids;
  j["target_id"] = r.target_id;
  j["layer"] = r.layer;
  j["head"] = r.head;
  j["n"] = r.map->rows();
  j["R"] = matrix_json(*r.map);
  open_out(path) << j.dump() << '\n';
}

void write_matrix_csv(const std::filesystem::path& path, const MatrixD& m) {
  auto out = open_out(path);
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) out << (j ? "," : "") << format_double(m(i, j));
    out << '\n';
  }
}

MatrixD read_matrix_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIoError, "cannot open " + path.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        row.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw Error(ErrorKind::kIoError, path.string() + ": bad number '" + cell + "'");
      }
    }
    if (!rows.empty() && row.size() != rows.front().size()) {
      throw Error(ErrorKind::kShapeMismatch, path.string() + ": ragged rows");
    }
    rows.push_back(std::move(row));
  }
  MatrixD m(static_cast<Eigen::Index>(rows.size()),
            rows.empty() ? 0 : static_cast<Eigen::Index>(rows.front().size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = rows[i][j];
  }
  return m;
}

std::vector<unsigned char> pgm_pixels(const MatrixD& m) {
  const double peak = m.size() ? m.cwiseAbs().maxCoeff() : 0.0;
  std::vector<unsigned char> px;
  px.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      const double u = peak > 0.0 ? m(i, j) / peak : 0.0;  // [-1, 1]
      const long v = std::lround(128.0 + 127.0 * u);
      px.push_back(static_cast<unsigned char>(std::clamp(v, 0L, 255L)));
    }
  }
  return px;
}

void write_pgm(const std::filesystem::path& path, const MatrixD& m, int scale) {
  if (scale < 1) throw Error(ErrorKind::kInvalidConfig, "pgm scale must be >= 1");
  const auto px = pgm_pixels(m);
  auto out = open_out(path, true);
  out << "P5\n" << m.cols() * scale << ' ' << m.rows() * scale << "\n255\n";
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (int si = 0; si < scale; ++si) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) {
        for (int sj = 0; sj < scale; ++sj) out.put(static_cast<char>(px[static_cast<std::size_t>(i * m.cols() + j)]));
      }
    }
  }
}

void write_scores_csv(const std::filesystem::path& path, const HeadScoreMap& scores) {
  auto out = open_out(path);
  out << "layer";
  for (Eigen::Index h = 0; h < scores.scores.cols(); ++h) out << ",h" << h;
  out << '\n';
  for (Eigen::Index l = 0; l < scores.scores.rows(); ++l) {
    out << l;
    for (Eigen::Index h = 0; h < scores.scores.cols(); ++h) out << ',' << format_double(scores.scores(l, h));
    out << '\n';
  }
}

void write_scores_json(const std::filesystem::path& path, const HeadScoreMap& scores, std::uint64_t seed) {
  nlohmann::json j;
  j["method"] = scores.method;
  j["norm"] = to_string(scores.norm);
  j["seed"] = seed;
  j["scores"] = matrix_json(scores.scores);
  open_out(path) << j.dump(2) << '\n';
}

void write_ordering_json(const std::filesystem::path& path, const HeadOrdering& ordering, std::uint64_t seed) {
  nlohmann::json j;
  j["method"] = ordering.method;
  j["direction"] = to_string(ordering.direction);
  j["seed"] = seed;
  j["heads"] = heads_json(ordering.heads);
  open_out(path) << j.dump() << '\n';
}

void write_curve_json(const std::filesystem::path& path, const std::string& task, const std::string& method,
                      Direction direction, const PerturbationCurve& curve, double area, std::uint64_t seed) {
  nlohmann::json j;
  j["task"] = task;
  j["method"] = method;
  j["direction"] = to_string(direction);
  j["seed"] = seed;
  j["auc"] = area;
  j["fractions"] = curve.fractions;
  j["accuracies"] = curve.accuracies;
  open_out(path) << j.dump() << '\n';
}

void save_patch_bank(const std::filesystem::path& dir, const PatchBank& bank) {
  std::filesystem::create_directories(dir);
  TensorMap tensors;
  for (int l = 0; l < bank.n_layers; ++l) {
    for (int h = 0; h < bank.n_heads; ++h) {
      const auto& m = bank.map(l, h);
      NamedTensor t;
      t.dtype = "F64";
      t.shape = {static_cast<long>(m.rows()), static_cast<long>(m.cols())};
      t.values.assign(m.data(), m.data() + m.size());
      tensors.emplace("map." + std::to_string(l) + "." + std::to_string(h), std::move(t));
    }
  }
  write_tensor_file(dir / "bank.tensors", tensors);
  nlohmann::json j;
  j["n"] = bank.n;
  j["n_layers"] = bank.n_layers;
  j["n_heads"] = bank.n_heads;
  j["source"] = to_string(bank.source);
  j["train_count"] = bank.train_count;
  j["tensors"] = "bank.tensors";
  open_out(dir / "bank.json") << j.dump(2) << '\n';
}

PatchBank load_patch_bank(const std::filesystem::path& dir) {
  std::ifstream in(dir / "bank.json");
  if (!in) throw Error(ErrorKind::kIoError, "cannot open " + (dir / "bank.json").string());
  PatchBank bank;
  std::string tensors_name;
  try {
    nlohmann::json j;
    in >> j;
    bank.n = j.at("n").get<int>();
    bank.n_layers = j.at("n_layers").get<int>();
    bank.n_heads = j.at("n_heads").get<int>();
    bank.source = parse_patch_source(j.at("source").get<std::string>());
    bank.train_count = j.at("train_count").get<int>();
    tensors_name = j.value("tensors", std::string("bank.tensors"));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kFixtureCorrupt, "bank manifest: " + std::string(e.what()));
  }
  const auto tensors = read_tensor_file(dir / tensors_name);
  for (int l = 0; l < bank.n_layers; ++l) {
    for (int h = 0; h < bank.n_heads; ++h) {
      const std::string name = "map." + std::to_string(l) + "." + std::to_string(h);
      const auto it = tensors.find(name);
      if (it == tensors.end()) throw Error(ErrorKind::kFixtureCorrupt, "bank is missing " + name);
      const auto& t = it->second;
      if (t.shape != std::vector<long>{bank.n, bank.n}) {
        throw Error(ErrorKind::kFixtureCorrupt, "bank map " + name + " has the wrong shape");
      }
      bank.maps.push_back(Eigen::Map<const MatrixD>(t.values.data(), bank.n, bank.n));
    }
  }
  return bank;
}

}  // namespace revattn
