#pragma once

#include <compare>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "revattn/backward.hpp"
#include "revattn/example.hpp"

namespace revattn {

enum class NormKind { kFrobenius, kMaxAbs };
enum class Direction { kForward, kReversed };

const char* to_string(NormKind kind);
const char* to_string(Direction direction);
NormKind parse_norm_kind(std::string_view s);

struct HeadId {
  int layer = 0;
  int head = 0;
  auto operator<=>(const HeadId&) const = default;
};

// Per-head maps indexed [layer][head].
using HeadMaps = std::vector<std::vector<MatrixD>>;

// One nonnegative score per (layer, head). `method` is a free-form label
// such as "ra", "fa", "cm1" or "cm2".
struct HeadScoreMap {
  MatrixD scores;  // n_layers x n_heads
  std::string method;
  NormKind norm = NormKind::kFrobenius;
};

struct HeadOrdering {
  std::vector<HeadId> heads;
  Direction direction = Direction::kForward;
  std::string method;
};

double map_norm(const MatrixD& map, NormKind kind);

// Throws EmptyInput for an empty set and ShapeMismatch when maps differ in
// size or the grid is ragged.
HeadScoreMap head_norms(const HeadMaps& maps, NormKind kind, std::string method = "ra");

// Elementwise mean. Throws EmptyInput / ShapeMismatch.
HeadScoreMap average_scores(std::span<const HeadScoreMap> maps);

// Descending (forward) or ascending (reversed) by score, ties in (layer,
// head) order. Throws NumericalError on non-finite scores.
HeadOrdering rank_heads(const HeadScoreMap& scores, Direction direction = Direction::kForward);

// Throws InvalidConfig unless `ordering` visits every head of the grid once.
void require_permutation(const HeadOrdering& ordering, int n_layers, int n_heads);

HeadMaps ra_maps(const BackwardResult& backward);

template <typename T>
HeadMaps fa_maps(const ForwardTrace<T>& trace);

// Mean over examples of the per-example RA (or forward attention) norms.
template <typename T>
HeadScoreMap ra_head_scores(const Model<T>& model, std::span<const Example> examples,
                            NormKind kind = NormKind::kFrobenius);
template <typename T>
HeadScoreMap fa_head_scores(const Model<T>& model, std::span<const Example> examples,
                            NormKind kind = NormKind::kFrobenius);

}  // namespace revattn
