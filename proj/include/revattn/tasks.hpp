#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "revattn/example.hpp"
#include "revattn/tokenizer.hpp"

namespace revattn {

struct QaPair {
  std::string question;
  std::string answer;
  bool operator==(const QaPair&) const = default;
};

enum class TemplateKind { kIcl, kNatural };

const char* to_string(TemplateKind kind);
TemplateKind parse_template_kind(std::string_view s);

struct TaskSet {
  std::string name;
  std::vector<QaPair> pairs;
  TemplateKind kind = TemplateKind::kIcl;
  std::optional<std::string> natural_format;  // "<question> ... <answer>"
  std::uint64_t split_seed = 0;

  // Throws InvalidConfig / TemplateError.
  void validate() const;
};

// Manifest {name, template, natural_format?, pairs_path, split_seed?}; the
// pairs file holds one {question, answer} JSON object per line. A relative
// pairs_path is resolved against the manifest's directory.
TaskSet load_task(const std::filesystem::path& manifest);
void save_task(const TaskSet& task, const std::filesystem::path& manifest,
               const std::filesystem::path& pairs_file);

struct TaskSplit {
  std::vector<QaPair> train;
  std::vector<QaPair> test;
};

// Seeded shuffle; the last ceil(m/3) pairs form the test set. Throws
// InsufficientData for fewer than 3 pairs.
TaskSplit split(const TaskSet& task);

struct Prompt {
  std::string text;
  std::string gold;
};

// n_shots "Q: {q}\nA: {a}\n\n" blocks drawn from `pool` (never the query
// itself), then "Q: {query}\nA:". Throws InsufficientData.
Prompt build_icl_prompt(const std::vector<QaPair>& pool, const QaPair& query, int n_shots,
                        std::uint64_t seed);

// n_shots filled templates joined by "\n", then a newline and the query
// template cut at <answer> with trailing whitespace removed. Throws
// TemplateError when the format lacks either slot.
Prompt build_natural_prompt(std::string_view format, const std::vector<QaPair>& pool,
                            const QaPair& query, int n_shots, std::uint64_t seed);

// Dispatches on the task's template kind.
Prompt build_prompt(const TaskSet& task, const std::vector<QaPair>& pool, const QaPair& query,
                    int n_shots, std::uint64_t seed);

struct ParsedIcl {
  std::vector<QaPair> shots;
  std::string query;
};

// Inverse of build_icl_prompt. Throws TemplateError on malformed text.
ParsedIcl parse_icl_prompt(std::string_view text);

// Builds and tokenizes one prompt per query; the shot seed of query i is
// seed + i.
std::vector<Example> make_examples(const TaskSet& task, const std::vector<QaPair>& pool,
                                   const std::vector<QaPair>& queries, int n_shots,
                                   const Tokenizer& tokenizer, std::uint64_t seed);

}  // namespace revattn
