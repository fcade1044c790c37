#include "revattn/ra_analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "revattn/parallel.hpp"

namespace revattn {

const char* to_string(NormKind kind) { return kind == NormKind::kFrobenius ? "frobenius" : "max_abs"; }
const char* to_string(Direction direction) {
  return direction == Direction::kForward ? "forward" : "reversed";
}

NormKind parse_norm_kind(std::string_view s) {
  if (s == "frobenius" || s == "fro") return NormKind::kFrobenius;
  if (s == "max_abs" || s == "max") return NormKind::kMaxAbs;
  throw Error(ErrorKind::kInvalidConfig, "unknown norm '" + std::string(s) + "'");
}

double map_norm(const MatrixD& map, NormKind kind) {
  if (map.size() == 0) return 0.0;
  return kind == NormKind::kFrobenius ? map.norm() : map.cwiseAbs().maxCoeff();
}

HeadScoreMap head_norms(const HeadMaps& maps, NormKind kind, std::string method) {
  if (maps.empty() || maps.front().empty()) throw Error(ErrorKind::kEmptyInput, "no head maps");
  const auto n_layers = static_cast<Eigen::Index>(maps.size());
  const auto n_heads = static_cast<Eigen::Index>(maps.front().size());
  const Eigen::Index n = maps.front().front().rows();
  HeadScoreMap out{MatrixD(n_layers, n_heads), std::move(method), kind};
  for (Eigen::Index l = 0; l < n_layers; ++l) {
    if (static_cast<Eigen::Index>(maps[l].size()) != n_heads) {
      throw Error(ErrorKind::kShapeMismatch, "layer " + std::to_string(l) + " has " +
                                                 std::to_string(maps[l].size()) + " heads, expected " +
                                                 std::to_string(n_heads));
    }
    for (Eigen::Index h = 0; h < n_heads; ++h) {
      require_shape("map " + std::to_string(l) + "." + std::to_string(h), maps[l][h], n, n);
      out.scores(l, h) = map_norm(maps[l][h], kind);
    }
  }
  return out;
}

HeadScoreMap average_scores(std::span<const HeadScoreMap> maps) {
  if (maps.empty()) throw Error(ErrorKind::kEmptyInput, "no score maps to average");
  HeadScoreMap out = maps.front();
  for (std::size_t i = 1; i < maps.size(); ++i) {
    require_shape("score map " + std::to_string(i), maps[i].scores, out.scores.rows(),
                  out.scores.cols());
    out.scores += maps[i].scores;
  }
  out.scores /= static_cast<double>(maps.size());
  return out;
}

HeadOrdering rank_heads(const HeadScoreMap& scores, Direction direction) {
  if (!all_finite(scores.scores)) throw Error(ErrorKind::kNumericalError, "non-finite head scores");
  const auto& s = scores.scores;
  HeadOrdering out;
  out.direction = direction;
  out.method = scores.method;
  for (int l = 0; l < s.rows(); ++l) {
    for (int h = 0; h < s.cols(); ++h) out.heads.push_back({l, h});
  }
  std::stable_sort(out.heads.begin(), out.heads.end(), [&](const HeadId& a, const HeadId& b) {
    const double x = s(a.layer, a.head);
    const double y = s(b.layer, b.head);
    return direction == Direction::kForward ? x > y : x < y;
  });
  return out;
}

void require_permutation(const HeadOrdering& ordering, int n_layers, int n_heads) {
  const auto total = static_cast<std::size_t>(n_layers) * n_heads;
  if (ordering.heads.size() != total) {
    throw Error(ErrorKind::kInvalidConfig, "ordering has " + std::to_string(ordering.heads.size()) +
                                               " entries, expected " + std::to_string(total));
  }
  std::vector<char> seen(total, 0);
  for (const auto& id : ordering.heads) {
    if (id.layer < 0 || id.layer >= n_layers || id.head < 0 || id.head >= n_heads) {
      throw Error(ErrorKind::kInvalidConfig, "ordering names head (" + std::to_string(id.layer) +
                                                 ", " + std::to_string(id.head) + ") outside the model");
    }
    auto& flag = seen[static_cast<std::size_t>(id.layer) * n_heads + id.head];
    if (flag) {
      throw Error(ErrorKind::kInvalidConfig, "ordering repeats head (" + std::to_string(id.layer) +
                                                 ", " + std::to_string(id.head) + ")");
    }
    flag = 1;
  }
}

HeadMaps ra_maps(const BackwardResult& backward) {
  HeadMaps out(backward.layers.size());
  for (std::size_t l = 0; l < backward.layers.size(); ++l) {
    for (const auto& h : backward.layers[l].heads) out[l].push_back(h.R);
  }
  return out;
}

template <typename T>
HeadMaps fa_maps(const ForwardTrace<T>& trace) {
  HeadMaps out(trace.layers.size());
  for (std::size_t l = 0; l < trace.layers.size(); ++l) {
    for (const auto& h : trace.layers[l].heads) out[l].push_back(to_double(h.attn));
  }
  return out;
}

namespace {

template <typename T, typename MapsOf>
HeadScoreMap averaged(const Model<T>& model, std::span<const Example> examples, NormKind kind,
                      const char* method, MapsOf maps_of) {
  if (examples.empty()) throw Error(ErrorKind::kEmptyInput, "no examples for head scoring");
  std::vector<HeadScoreMap> per(examples.size());
  parallel_for(examples.size(), [&](std::size_t i) {
    per[i] = head_norms(maps_of(model, examples[i]), kind, method);
  });
  return average_scores(per);
}

}  // namespace

template <typename T>
HeadScoreMap ra_head_scores(const Model<T>& model, std::span<const Example> examples, NormKind kind) {
  return averaged(model, examples, kind, "ra", [](const Model<T>& m, const Example& ex) {
    const auto run = run_reversed_attention(m, ex.prompt, ex.target, {.weight_gradients = false});
    return ra_maps(run.backward);
  });
}

template <typename T>
HeadScoreMap fa_head_scores(const Model<T>& model, std::span<const Example> examples, NormKind kind) {
  return averaged(model, examples, kind, "fa", [](const Model<T>& m, const Example& ex) {
    return fa_maps(model_forward(m, ex.prompt));
  });
}

template HeadMaps fa_maps<float>(const ForwardTrace<float>&);
template HeadMaps fa_maps<double>(const ForwardTrace<double>&);
template HeadScoreMap ra_head_scores<float>(const Model<float>&, std::span<const Example>, NormKind);
template HeadScoreMap ra_head_scores<double>(const Model<double>&, std::span<const Example>, NormKind);
template HeadScoreMap fa_head_scores<float>(const Model<float>&, std::span<const Example>, NormKind);
template HeadScoreMap fa_head_scores<double>(const Model<double>&, std::span<const Example>, NormKind);

}  // namespace revattn
