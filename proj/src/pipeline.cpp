#include "revattn/pipeline.hpp"

#include <algorithm>
#include <map>

#include "revattn/rng.hpp"

namespace revattn {

std::uint64_t stream_seed(std::uint64_t seed, SeedStream stream) {
  return derive_seed(seed, static_cast<std::uint64_t>(stream));
}

TaskExamples prepare_examples(const TaskSet& task, const Tokenizer& tokenizer, int n_shots,
                              std::uint64_t seed) {
  const auto parts = split(task);
  const auto shots = stream_seed(seed, SeedStream::kShots);
  TaskExamples out;
  out.train = make_examples(task, parts.train, parts.train, n_shots, tokenizer, shots);
  out.test = make_examples(task, parts.train, parts.test, n_shots, tokenizer, shots + parts.train.size());
  return out;
}

std::vector<Example> extraction_subset(const std::vector<Example>& pool, int count, std::uint64_t seed) {
  std::vector<std::size_t> idx(pool.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(seed);
  rng.shuffle(idx.begin(), idx.end());
  idx.resize(std::min(idx.size(), static_cast<std::size_t>(std::max(0, count))));
  std::sort(idx.begin(), idx.end());
  std::vector<Example> out;
  for (std::size_t i : idx) out.push_back(pool[i]);
  return out;
}

const char* to_string(Method method) {
  switch (method) {
    case Method::kRa: return "ra";
    case Method::kFa: return "fa";
    case Method::kCm1: return "cm1";
    case Method::kCm2: return "cm2";
    case Method::kRandom: return "random";
    case Method::kIndex: return "index";
  }
  return "?";
}

Method parse_method(std::string_view s) {
  for (Method m : all_methods()) {
    if (s == to_string(m)) return m;
  }
  throw Error(ErrorKind::kInvalidConfig, "unknown method '" + std::string(s) + "'");
}

std::vector<Method> all_methods() {
  return {Method::kRa, Method::kFa, Method::kCm1, Method::kCm2, Method::kRandom, Method::kIndex};
}

namespace {

// The largest same-length group of the extraction subset, with held-out
// prompts of that length drawn from the rest of the training pool.
struct Cm2Data {
  std::vector<Example> extraction;
  std::vector<Example> heldout;
};

std::optional<Cm2Data> cm2_data(const std::vector<Example>& train, const std::vector<Example>& extraction) {
  std::map<std::size_t, int> counts;
  for (const auto& ex : extraction) ++counts[ex.prompt.size()];
  std::vector<std::pair<int, std::size_t>> order;
  for (const auto& [len, n] : counts) order.push_back({-n, len});
  std::sort(order.begin(), order.end());
  for (const auto& [neg, len] : order) {
    Cm2Data d;
    for (const auto& ex : extraction) {
      if (ex.prompt.size() == len) d.extraction.push_back(ex);
    }
    for (const auto& ex : train) {
      if (ex.prompt.size() != len) continue;
      const bool used = std::any_of(d.extraction.begin(), d.extraction.end(), [&](const Example& e) {
        return e.prompt == ex.prompt && e.target == ex.target;
      });
      if (!used) d.heldout.push_back(ex);
    }
    if (!d.heldout.empty()) return d;
  }
  return std::nullopt;
}

}  // namespace

template <typename T>
PerturbReport run_perturbation(const Model<T>& model, const TaskExamples& examples,
                               const PerturbOptions& options) {
  const auto& c = model.config();
  if (examples.test.empty()) throw Error(ErrorKind::kInsufficientData, "no test examples");
  const int step = options.step > 0 ? options.step : default_step(c.total_heads());
  const auto extraction = extraction_subset(
      examples.train, options.extraction_count, stream_seed(options.seed, SeedStream::kExtraction));
  if (extraction.empty()) throw Error(ErrorKind::kInsufficientData, "no training examples for extraction");

  PerturbReport report;
  report.baseline = evaluate<T>(model, examples.test, nullptr);
  const auto baselines = baseline_orderings(c.n_layers, c.n_heads,
                                            stream_seed(options.seed, SeedStream::kRandomOrder));
  for (Method method : options.methods) {
    std::optional<HeadScoreMap> scores;
    HeadOrdering forward;
    switch (method) {
      case Method::kRa: scores = ra_head_scores(model, extraction, options.norm); break;
      case Method::kFa: scores = fa_head_scores(model, extraction, options.norm); break;
      case Method::kCm1: scores = cm1_scores(model, extraction, options.cm); break;
      case Method::kCm2: {
        const auto data = cm2_data(examples.train, extraction);
        if (!data) {
          report.warnings.push_back("cm2 skipped: no held-out training prompts share a length with the extraction set");
          continue;
        }
        scores = cm2_scores(model, data->extraction, data->heldout, options.cm);
        break;
      }
      case Method::kRandom: forward = baselines.random; break;
      case Method::kIndex: forward = baselines.index; break;
    }
    std::vector<HeadOrdering> orders;
    if (scores) {
      orders = {rank_heads(*scores, Direction::kForward), rank_heads(*scores, Direction::kReversed)};
    } else {
      orders = {forward, reversed(forward)};
    }
    for (auto& ordering : orders) {
      ordering.method = to_string(method);
      MethodRun run{method, ordering.direction, ordering, {}, 0.0};
      run.curve = perturbation_curve(model, ordering, examples.test, step);
      run.auc = auc(run.curve);
      report.runs.push_back(std::move(run));
    }
  }
  return report;
}

template PerturbReport run_perturbation<float>(const Model<float>&, const TaskExamples&, const PerturbOptions&);
template PerturbReport run_perturbation<double>(const Model<double>&, const TaskExamples&, const PerturbOptions&);

}  // namespace revattn
