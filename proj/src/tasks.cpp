#include "revattn/tasks.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

#include "revattn/error.hpp"
#include "revattn/rng.hpp"

namespace revattn {

namespace {

constexpr std::string_view kQuestionSlot = "<question>";
constexpr std::string_view kAnswerSlot = "<answer>";

std::string replace_all(std::string s, std::string_view from, std::string_view to) {
  for (std::size_t pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size())) {
    s.replace(pos, from.size(), to);
  }
  return s;
}

std::string rstrip(std::string s) {
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\n' || s.back() == '\r')) {
    s.pop_back();
  }
  return s;
}

void require_slots(std::string_view format) {
  if (format.find(kQuestionSlot) == std::string_view::npos) {
    throw Error(ErrorKind::kTemplateError, "natural format lacks <question>: '" + std::string(format) + "'");
  }
  if (format.find(kAnswerSlot) == std::string_view::npos) {
    throw Error(ErrorKind::kTemplateError, "natural format lacks <answer>: '" + std::string(format) + "'");
  }
}

// n_shots pairs from pool, excluding every pair equal to the query, in a
// seeded order.
std::vector<QaPair> draw_shots(const std::vector<QaPair>& pool, const QaPair& query, int n_shots,
                               std::uint64_t seed) {
  if (n_shots < 0) throw Error(ErrorKind::kInvalidConfig, "n_shots must be >= 0");
  std::vector<QaPair> eligible;
  for (const auto& p : pool) {
    if (!(p == query)) eligible.push_back(p);
  }
  if (static_cast<int>(eligible.size()) < n_shots) {
    throw Error(ErrorKind::kInsufficientData, "need " + std::to_string(n_shots) + " shots but only " +
                                                  std::to_string(eligible.size()) + " pairs are available");
  }
  Rng rng(seed);
  rng.shuffle(eligible.begin(), eligible.end());
  eligible.resize(static_cast<std::size_t>(n_shots));
  return eligible;
}

}  // namespace

const char* to_string(TemplateKind kind) { return kind == TemplateKind::kIcl ? "icl" : "natural"; }

TemplateKind parse_template_kind(std::string_view s) {
  if (s == "icl") return TemplateKind::kIcl;
  if (s == "natural") return TemplateKind::kNatural;
  throw Error(ErrorKind::kInvalidConfig, "unknown template '" + std::string(s) + "'");
}

void TaskSet::validate() const {
  if (pairs.empty()) throw Error(ErrorKind::kInvalidConfig, "task '" + name + "' has no pairs");
  if (kind == TemplateKind::kNatural) {
    if (!natural_format) throw Error(ErrorKind::kTemplateError, "natural task '" + name + "' has no format");
    require_slots(*natural_format);
  } else if (natural_format) {
    throw Error(ErrorKind::kInvalidConfig, "icl task '" + name + "' must not carry a natural format");
  }
}

TaskSet load_task(const std::filesystem::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw Error(ErrorKind::kIoError, "cannot open task manifest " + manifest.string());
  TaskSet task;
  std::filesystem::path pairs_path;
  try {
    nlohmann::json j;
    in >> j;
    task.name = j.at("name").get<std::string>();
    task.kind = parse_template_kind(j.at("template").get<std::string>());
    if (j.contains("natural_format") && !j["natural_format"].is_null()) {
      task.natural_format = j["natural_format"].get<std::string>();
    }
    task.split_seed = j.value("split_seed", std::uint64_t{0});
    pairs_path = j.at("pairs_path").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kIoError, "task manifest " + manifest.string() + ": " + e.what());
  }
  if (pairs_path.is_relative()) pairs_path = manifest.parent_path() / pairs_path;
  std::ifstream pin(pairs_path);
  if (!pin) throw Error(ErrorKind::kIoError, "cannot open pairs file " + pairs_path.string());
  std::string line;
  int line_no = 0;
  while (std::getline(pin, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      task.pairs.push_back({j.at("question").get<std::string>(), j.at("answer").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::kIoError,
                  pairs_path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  task.validate();
  return task;
}

void save_task(const TaskSet& task, const std::filesystem::path& manifest,
               const std::filesystem::path& pairs_file) {
  task.validate();
  nlohmann::json j;
  j["name"] = task.name;
  j["template"] = to_string(task.kind);
  if (task.natural_format) j["natural_format"] = *task.natural_format;
  j["split_seed"] = task.split_seed;
  j["pairs_path"] = std::filesystem::relative(pairs_file, manifest.parent_path()).generic_string();
  std::ofstream out(manifest);
  if (!out) throw Error(ErrorKind::kIoError, "cannot write " + manifest.string());
  out << j.dump(2) << '\n';
  std::ofstream pout(pairs_file);
  if (!pout) throw Error(ErrorKind::kIoError, "cannot write " + pairs_file.string());
  for (const auto& p : task.pairs) {
    pout << nlohmann::json{{"question", p.question}, {"answer", p.answer}}.dump() << '\n';
  }
}

TaskSplit split(const TaskSet& task) {
  const std::size_t m = task.pairs.size();
  if (m < 3) {
    throw Error(ErrorKind::kInsufficientData,
                "task '" + task.name + "' has " + std::to_string(m) + " pairs, need at least 3");
  }
  std::vector<QaPair> shuffled = task.pairs;
  Rng rng(task.split_seed);
  rng.shuffle(shuffled.begin(), shuffled.end());
  const std::size_t n_test = (m + 2) / 3;
  TaskSplit s;
  s.train.assign(shuffled.begin(), shuffled.end() - static_cast<long>(n_test));
  s.test.assign(shuffled.end() - static_cast<long>(n_test), shuffled.end());
  return s;
}

Prompt build_icl_prompt(const std::vector<QaPair>& pool, const QaPair& query, int n_shots,
                        std::uint64_t seed) {
  std::string text;
  for (const auto& s : draw_shots(pool, query, n_shots, seed)) {
    text += "Q: " + s.question + "\nA: " + s.answer + "\n\n";
  }
  text += "Q: " + query.question + "\nA:";
  return {text, query.answer};
}

Prompt build_natural_prompt(std::string_view format, const std::vector<QaPair>& pool,
                            const QaPair& query, int n_shots, std::uint64_t seed) {
  require_slots(format);
  auto fill = [&](const QaPair& p) {
    return replace_all(replace_all(std::string(format), kQuestionSlot, p.question), kAnswerSlot, p.answer);
  };
  std::string text;
  for (const auto& s : draw_shots(pool, query, n_shots, seed)) text += fill(s) + "\n";
  std::string tail = replace_all(std::string(format), kQuestionSlot, query.question);
  tail = rstrip(tail.substr(0, tail.find(kAnswerSlot)));
  return {text + tail, query.answer};
}

Prompt build_prompt(const TaskSet& task, const std::vector<QaPair>& pool, const QaPair& query,
                    int n_shots, std::uint64_t seed) {
  if (task.kind == TemplateKind::kNatural) {
    if (!task.natural_format) throw Error(ErrorKind::kTemplateError, "task has no natural format");
    return build_natural_prompt(*task.natural_format, pool, query, n_shots, seed);
  }
  return build_icl_prompt(pool, query, n_shots, seed);
}

ParsedIcl parse_icl_prompt(std::string_view text) {
  ParsedIcl out;
  std::size_t pos = 0;
  auto expect = [&](std::string_view lit) {
    if (text.substr(pos, lit.size()) != lit) {
      throw Error(ErrorKind::kTemplateError,
                  "expected '" + std::string(lit) + "' at offset " + std::to_string(pos));
    }
    pos += lit.size();
  };
  while (true) {
    expect("Q: ");
    const auto nl = text.find("\nA:", pos);
    if (nl == std::string_view::npos) throw Error(ErrorKind::kTemplateError, "question without answer line");
    const std::string question(text.substr(pos, nl - pos));
    pos = nl + 3;
    if (pos == text.size()) {
      out.query = question;
      return out;
    }
    expect(" ");
    const auto end = text.find("\n\n", pos);
    if (end == std::string_view::npos) throw Error(ErrorKind::kTemplateError, "unterminated shot block");
    out.shots.push_back({question, std::string(text.substr(pos, end - pos))});
    pos = end + 2;
  }
}

std::vector<Example> make_examples(const TaskSet& task, const std::vector<QaPair>& pool,
                                   const std::vector<QaPair>& queries, int n_shots,
                                   const Tokenizer& tokenizer, std::uint64_t seed) {
  std::vector<Example> out;
  out.reserve(queries.size());
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const auto prompt = build_prompt(task, pool, queries[i], n_shots, seed + i);
    Example ex;
    ex.prompt = tokenizer.encode(prompt.text);
    ex.target = tokenizer.answer_token(prompt.gold);
    ex.label = queries[i].question;
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace revattn
