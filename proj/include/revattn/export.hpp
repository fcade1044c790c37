#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "revattn/patching.hpp"

namespace revattn {

struct RaMapRecord {
  std::string model;
  std::vector<int> prompt_ids;
  int target_id = 0;
  int layer = 0;
  int head = 0;
  const MatrixD* map = nullptr;
};

// {model, prompt_ids, target_id, layer, head, n, R: [[...]]}
void write_ra_json(const std::filesystem::path& path, const RaMapRecord& record);
// One matrix, row-major, one row per line, shortest round-trip formatting.
void write_matrix_csv(const std::filesystem::path& path, const MatrixD& m);
MatrixD read_matrix_csv(const std::filesystem::path& path);

// Binary 8-bit PGM. Values are scaled by the largest magnitude so that 0 is
// mid-gray (128), the most negative entry dark and the most positive light.
void write_pgm(const std::filesystem::path& path, const MatrixD& m, int scale = 1);
std::vector<unsigned char> pgm_pixels(const MatrixD& m);

// Layers as rows, heads as columns, with a header line "layer,h0,h1,...".
void write_scores_csv(const std::filesystem::path& path, const HeadScoreMap& scores);
void write_scores_json(const std::filesystem::path& path, const HeadScoreMap& scores, std::uint64_t seed);
void write_ordering_json(const std::filesystem::path& path, const HeadOrdering& ordering, std::uint64_t seed);
void write_curve_json(const std::filesystem::path& path, const std::string& task, const std::string& method,
                      Direction direction, const PerturbationCurve& curve, double area, std::uint64_t seed);

// JSON manifest next to a tensor container holding "map.<layer>.<head>".
void save_patch_bank(const std::filesystem::path& dir, const PatchBank& bank);
PatchBank load_patch_bank(const std::filesystem::path& dir);

// Shortest decimal that round-trips the double.
std::string format_double(double v);

}  // namespace revattn
