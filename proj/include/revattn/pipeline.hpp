#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "revattn/patching.hpp"
#include "revattn/tasks.hpp"

namespace revattn {

// Named sub-streams of the single user seed.
enum class SeedStream : std::uint64_t { kShots = 1, kRandomOrder = 2, kExtraction = 3, kPatchGroup = 4 };

std::uint64_t stream_seed(std::uint64_t seed, SeedStream stream);

struct TaskExamples {
  std::vector<Example> train;  // method extraction and patch banks only
  std::vector<Example> test;
};

// Splits the task (1/3 test), builds prompts with shots drawn from the train
// pool and tokenizes them.
TaskExamples prepare_examples(const TaskSet& task, const Tokenizer& tokenizer, int n_shots,
                              std::uint64_t seed);

// Seeded subset of at most `count` examples, in pool order.
std::vector<Example> extraction_subset(const std::vector<Example>& pool, int count, std::uint64_t seed);

enum class Method { kRa, kFa, kCm1, kCm2, kRandom, kIndex };

const char* to_string(Method method);
Method parse_method(std::string_view s);
std::vector<Method> all_methods();

struct PerturbOptions {
  std::vector<Method> methods = all_methods();
  NormKind norm = NormKind::kFrobenius;
  int step = 0;  // 0 means default_step
  int extraction_count = 25;
  std::uint64_t seed = 0;
  CmOptions cm;
};

struct MethodRun {
  Method method;
  Direction direction;
  HeadOrdering ordering;
  PerturbationCurve curve;
  double auc = 0.0;
};

struct PerturbReport {
  EvalStats baseline;
  std::vector<MethodRun> runs;
  std::vector<std::string> warnings;  // methods that could not run
};

// Ranks heads with every requested method on an extraction subset of
// `train`, then traces the forward and reversed perturbation curve of each
// ordering on `test`. CM2 uses the same-length part of the extraction subset
// and the remaining same-length training prompts as held-out data; when
// there is none the method is skipped with a warning.
template <typename T>
PerturbReport run_perturbation(const Model<T>& model, const TaskExamples& examples,
                               const PerturbOptions& options);

}  // namespace revattn
