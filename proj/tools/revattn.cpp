// revattn: reversed-attention extraction, head perturbation, attention
// patching and fixture checks from the command line.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <fmt/ranges.h>

#include "revattn/constructed.hpp"
#include "revattn/export.hpp"
#include "revattn/fixtures.hpp"
#include "revattn/gradcheck.hpp"
#include "revattn/pipeline.hpp"
#include "revattn/weights_io.hpp"

namespace fs = std::filesystem;
using namespace revattn;

namespace {

struct Common {
  std::string model;
  std::string task;
  std::string out = "out";
  std::string dtype;
  std::uint64_t seed = 0;
  int n_shots = 0;
};

struct RaArgs {
  std::string prompt;
  std::string prompt_ids;
  std::string target;
  int target_id = -1;
  std::string norm = "frobenius";
  std::string format = "json";
  int heatmaps = 0;
};

struct PerturbArgs {
  std::vector<std::string> methods;
  std::string norm = "frobenius";
  int step = 0;
  int extraction = 25;
  bool cm_skip_last = false;
};

struct PatchArgs {
  std::vector<double> lrs;
  double lr_fa = 1.0;
  int train_count = 25;
};

struct ToyArgs {
  bool no_support = false;
  int pairs = 90;
};

struct FixtureArgs {
  int layers = 2;
  int heads = 2;
  int d_model = 8;
  int seq_len = 4;
  int vocab = 11;
  std::string ln = "pre_ln";
  bool zero = false;
};

std::vector<int> parse_ids(const std::string& s) {
  std::vector<int> ids;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      ids.push_back(std::stoi(item));
    } catch (const std::exception&) {
      throw Error(ErrorKind::kInvalidToken, "bad token id '" + item + "'");
    }
  }
  return ids;
}

LoadedModel open_model(const Common& c) {
  if (c.model.empty()) throw Error(ErrorKind::kInvalidConfig, "--model is required");
  auto loaded = load_model(c.model);
  if (!c.dtype.empty()) loaded.manifest.config.dtype = parse_dtype(c.dtype);
  return loaded;
}

template <typename Fn>
void with_model(const LoadedModel& loaded, Fn&& fn) {
  const auto& cfg = loaded.manifest.config;
  if (cfg.dtype == DType::kF64) {
    fn(Model<double>(cfg, loaded.weights));
  } else {
    fn(Model<float>(cfg, loaded.weights.cast<float>()));
  }
}

const Tokenizer& require_tokenizer(const LoadedModel& m) {
  if (!m.tokenizer) throw Error(ErrorKind::kTokenizeError, "model manifest has no vocabulary");
  return *m.tokenizer;
}

void cmd_ra_extract(const Common& c, const RaArgs& a) {
  const auto loaded = open_model(c);
  std::vector<int> ids;
  if (!a.prompt_ids.empty()) {
    ids = parse_ids(a.prompt_ids);
  } else if (!a.prompt.empty()) {
    ids = require_tokenizer(loaded).encode(a.prompt);
  } else {
    throw Error(ErrorKind::kEmptyInput, "give --prompt or --prompt-ids");
  }
  int target = a.target_id;
  if (target < 0) {
    if (a.target.empty()) throw Error(ErrorKind::kInvalidToken, "give --target or --target-id");
    target = require_tokenizer(loaded).answer_token(a.target);
  }
  const auto norm = parse_norm_kind(a.norm);
  if (a.format != "json" && a.format != "csv") throw Error(ErrorKind::kInvalidConfig, "--format must be json or csv");
  const fs::path out = c.out;
  with_model(loaded, [&](const auto& model) {
    const auto run = run_reversed_attention(model, ids, target, {.weight_gradients = false});
    const auto maps = ra_maps(run.backward);
    const auto scores = head_norms(maps, norm);
    for (std::size_t l = 0; l < maps.size(); ++l) {
      for (std::size_t h = 0; h < maps[l].size(); ++h) {
        const auto stem = fmt::format("maps/ra_L{}_H{}", l, h);
        if (a.format == "json") {
          write_ra_json(out / (stem + ".json"),
                        {c.model, ids, target, static_cast<int>(l), static_cast<int>(h), &maps[l][h]});
        } else {
          write_matrix_csv(out / (stem + ".csv"), maps[l][h]);
        }
      }
    }
    write_scores_csv(out / "norms.csv", scores);
    const auto order = rank_heads(scores);
    for (int k = 0; k < std::min<int>(a.heatmaps, static_cast<int>(order.heads.size())); ++k) {
      const auto& id = order.heads[static_cast<std::size_t>(k)];
      write_pgm(out / fmt::format("heatmaps/rank{}_L{}_H{}.pgm", k, id.layer, id.head),
                maps[static_cast<std::size_t>(id.layer)][static_cast<std::size_t>(id.head)], 16);
    }
    fmt::print("loss {} ({} tokens, target {})\n", format_double(run.loss.loss), ids.size(), target);
    for (int k = 0; k < std::min<int>(5, static_cast<int>(order.heads.size())); ++k) {
      const auto& id = order.heads[static_cast<std::size_t>(k)];
      fmt::print("#{} layer {} head {} {} {}\n", k + 1, id.layer, id.head, to_string(norm),
                 format_double(scores.scores(id.layer, id.head)));
    }
  });
}

void cmd_perturb(const Common& c, const PerturbArgs& a) {
  const auto loaded = open_model(c);
  if (c.task.empty()) throw Error(ErrorKind::kInvalidConfig, "--task is required");
  const auto task = load_task(c.task);
  const auto examples = prepare_examples(task, require_tokenizer(loaded), c.n_shots, c.seed);
  PerturbOptions opts;
  if (!a.methods.empty()) {
    opts.methods.clear();
    for (const auto& m : a.methods) opts.methods.push_back(parse_method(m));
  }
  opts.norm = parse_norm_kind(a.norm);
  opts.step = a.step;
  opts.extraction_count = a.extraction;
  opts.seed = c.seed;
  opts.cm.skip_last_position = a.cm_skip_last;
  const fs::path out = c.out;
  with_model(loaded, [&](const auto& model) {
    const auto report = run_perturbation(model, examples, opts);
    for (const auto& w : report.warnings) fmt::print(stderr, "warning: {}\n", w);
    fs::create_directories(out);
    std::ofstream csv(out / "perturb.csv");
    if (!csv) throw Error(ErrorKind::kIoError, "cannot write perturb.csv");
    csv << "task,n_shots,method,direction,auc,final_accuracy,baseline_accuracy\n";
    for (const auto& r : report.runs) {
      csv << fmt::format("{},{},{},{},{},{},{}\n", task.name, c.n_shots, to_string(r.method),
                         to_string(r.direction), format_double(r.auc), format_double(r.curve.accuracies.back()),
                         format_double(report.baseline.accuracy));
      const auto stem = fmt::format("{}_{}", to_string(r.method), to_string(r.direction));
      write_curve_json(out / "curves" / (stem + ".json"), task.name, to_string(r.method), r.direction, r.curve,
                       r.auc, c.seed);
      write_ordering_json(out / "orderings" / (stem + ".json"), r.ordering, c.seed);
      fmt::print("{:<7} {:<9} auc {:.4f}\n", to_string(r.method), to_string(r.direction), r.auc);
    }
    fmt::print("baseline accuracy {:.4f} over {} test prompts ({} skipped)\n", report.baseline.accuracy,
               report.baseline.evaluated, report.baseline.skipped);
  });
}

void cmd_patch(const Common& c, const PatchArgs& a) {
  const auto loaded = open_model(c);
  if (c.task.empty()) throw Error(ErrorKind::kInvalidConfig, "--task is required");
  const auto task = load_task(c.task);
  const auto examples = prepare_examples(task, require_tokenizer(loaded), c.n_shots, c.seed);
  const fs::path out = c.out;
  fs::create_directories(out);
  with_model(loaded, [&](const auto& model) {
    PatchingOptions opts;
    opts.lr_fa = a.lr_fa;
    opts.train_count = a.train_count;
    opts.seed = stream_seed(c.seed, SeedStream::kPatchGroup);
    if (!a.lrs.empty()) opts.lr_ra = a.lrs.front();
    const auto r = evaluate_patching(model, examples.train, examples.test, opts);
    std::ofstream csv(out / "patch.csv");
    if (!csv) throw Error(ErrorKind::kIoError, "cannot write patch.csv");
    csv << "task,N,original,FA,RA\n";
    csv << fmt::format("{},{},{},{},{}\n", task.name, c.n_shots, format_double(r.original.accuracy),
                       format_double(r.fa.accuracy), format_double(r.ra.accuracy));
    fmt::print("length {} | {} train, {} test | original {:.4f} FA(lr {}) {:.4f} RA(lr {}) {:.4f}\n", r.n,
               r.train_used, r.test_used, r.original.accuracy, format_double(opts.lr_fa), r.fa.accuracy,
               format_double(opts.lr_ra), r.ra.accuracy);
    if (a.lrs.size() > 1) {
      const auto groups = select_same_length(examples.train, examples.test, opts.train_count, opts.seed);
      const auto bank = collect_patch_bank(model, groups.train, PatchSource::kReversedAttention);
      save_patch_bank(out / "ra_bank", bank);
      std::ofstream sweep(out / "sweep.csv");
      if (!sweep) throw Error(ErrorKind::kIoError, "cannot write sweep.csv");
      sweep << "task,N,lr,accuracy,mean_target_prob\n";
      for (double lr : a.lrs) {
        const auto s = evaluate_patched(model, groups.test, bank, lr);
        sweep << fmt::format("{},{},{},{},{}\n", task.name, c.n_shots, format_double(lr),
                             format_double(s.accuracy), format_double(s.mean_target_prob));
      }
    }
  });
}

int cmd_check_fixtures(const std::vector<std::string>& dirs) {
  std::vector<fs::path> bundles;
  for (const auto& d : dirs) {
    if (fs::exists(fs::path(d) / "manifest.json")) {
      bundles.emplace_back(d);
      continue;
    }
    if (!fs::is_directory(d)) throw Error(ErrorKind::kIoError, "no fixture bundle at " + d);
    std::vector<fs::path> found;
    for (const auto& e : fs::directory_iterator(d)) {
      if (e.is_directory() && fs::exists(e.path() / "manifest.json")) found.push_back(e.path());
    }
    std::sort(found.begin(), found.end());
    if (found.empty()) throw Error(ErrorKind::kIoError, "no fixture bundles under " + d);
    bundles.insert(bundles.end(), found.begin(), found.end());
  }
  bool all = true;
  for (const auto& b : bundles) {
    const auto report = check_fixture(read_fixture(b));
    double logits = 0.0, grads = 0.0, ra = 0.0;
    for (const auto& q : report.checks) {
      if (q.name == "logits") logits = q.error;
      if (q.name.starts_with("grad.")) grads = std::max(grads, q.error);
      if (q.name.starts_with("ra.")) ra = std::max(ra, q.error);
    }
    fmt::print("{} {} logits_rel {:.3e} grad_rel {:.3e} ra_abs {:.3e}\n", report.pass ? "PASS" : "FAIL", b.string(),
               logits, grads, ra);
    for (const auto& q : report.checks) {
      if (!q.pass) fmt::print("  {} error {:.3e} > {:.1e}\n", q.name, q.error, q.tolerance);
    }
    all = all && report.pass;
  }
  return all ? 0 : static_cast<int>(ExitCode::kNumerical);
}

void cmd_make_toy(const Common& c, const ToyArgs& a) {
  ConstructedOptions o;
  o.seed = c.seed;
  o.support_head = !a.no_support;
  const auto cm = build_constructed_model(o);
  const fs::path out = c.out;
  save_model(out, cm.config, cm.weights, &cm.tokenizer);
  const auto task = constructed_task(c.seed, a.pairs);
  save_task(task, out / "task.json", out / "pairs.jsonl");
  fmt::print("wrote {} and {}; critical head layer {} head {}\n", (out / "model.json").string(),
             (out / "task.json").string(), cm.critical.layer, cm.critical.head);
  if (cm.support) fmt::print("support head layer {} head {}\n", cm.support->layer, cm.support->head);
}

void cmd_make_fixture(const Common& c, const FixtureArgs& a) {
  ModelConfig cfg;
  cfg.n_layers = a.layers;
  cfg.n_heads = a.heads;
  cfg.d_model = a.d_model;
  cfg.d_mlp = 2 * a.d_model;
  cfg.vocab_size = a.vocab;
  cfg.max_seq_len = a.seq_len;
  cfg.ln_mode = parse_ln_mode(a.ln);
  cfg.dtype = DType::kF32;
  cfg.validate();
  Rng rng(c.seed);
  const auto weights = a.zero ? ModelWeights<double>::zeros(cfg) : random_weights<double>(cfg, rng);
  std::vector<int> tokens(static_cast<std::size_t>(a.seq_len));
  for (auto& t : tokens) t = static_cast<int>(rng.index(static_cast<std::size_t>(a.vocab)));
  const int target = static_cast<int>(rng.index(static_cast<std::size_t>(a.vocab)));
  write_fixture(c.out, make_fixture(cfg, weights, tokens, target, c.seed));
  fmt::print("wrote fixture to {}\n", c.out);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Reversed attention maps, head rankings and attention patching for GPT-style models"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub, bool model, bool task) {
    if (model) sub->add_option("--model", common.model, "Model manifest (JSON)")->required();
    if (task) {
      sub->add_option("--task", common.task, "Task manifest (JSON)")->required();
      sub->add_option("--n-shots", common.n_shots, "Labelled shots per prompt")->check(CLI::NonNegativeNumber);
    }
    sub->add_option("--out", common.out, "Output directory");
    sub->add_option("--seed", common.seed, "Seed for every random choice");
    if (model) sub->add_option("--dtype", common.dtype, "Forward dtype override")->check(CLI::IsMember({"f32", "f64"}));
  };

  RaArgs ra;
  auto* ra_cmd = app.add_subcommand("ra-extract", "Export per-head reversed attention maps and their norms");
  add_common(ra_cmd, true, false);
  ra_cmd->add_option("--prompt", ra.prompt, "Prompt text (needs a vocabulary)");
  ra_cmd->add_option("--prompt-ids", ra.prompt_ids, "Comma-separated token ids");
  ra_cmd->add_option("--target", ra.target, "Target answer text");
  ra_cmd->add_option("--target-id", ra.target_id, "Target token id");
  ra_cmd->add_option("--norm", ra.norm, "frobenius or max_abs");
  ra_cmd->add_option("--format", ra.format, "Map file format: json or csv");
  ra_cmd->add_option("--heatmaps", ra.heatmaps, "Write PGM heatmaps for the top-k heads");

  PerturbArgs pt;
  auto* pt_cmd = app.add_subcommand("perturb", "Unmask heads in ranked order and score the accuracy curve");
  add_common(pt_cmd, true, true);
  pt_cmd->add_option("--method", pt.methods, "ra, fa, cm1, cm2, random, index (repeatable; default all)");
  pt_cmd->add_option("--norm", pt.norm, "frobenius or max_abs");
  pt_cmd->add_option("--step", pt.step, "Heads unmasked per step (default: 1% of heads, rounded up)");
  pt_cmd->add_option("--extraction", pt.extraction, "Training prompts used to rank heads");
  pt_cmd->add_flag("--cm-skip-last", pt.cm_skip_last, "Do not intervene at the final prompt position");

  PatchArgs pa;
  auto* pa_cmd = app.add_subcommand("patch", "Inject averaged attention maps into same-length test prompts");
  add_common(pa_cmd, true, true);
  pa_cmd->add_option("--lr", pa.lrs, "RA learning rate (default -30); several values also write sweep.csv");
  pa_cmd->add_option("--lr-fa", pa.lr_fa, "Forward-attention learning rate");
  pa_cmd->add_option("--train-count", pa.train_count, "Training prompts averaged into each bank");

  std::vector<std::string> fixture_dirs;
  auto* fx_cmd = app.add_subcommand("check-fixtures", "Compare this engine against golden fixture bundles");
  fx_cmd->add_option("dirs", fixture_dirs, "Bundle directories, or directories of bundles")->required();

  ToyArgs toy;
  auto* toy_cmd = app.add_subcommand("make-toy", "Write the hand-wired copy model and its task");
  add_common(toy_cmd, false, false);
  toy_cmd->add_flag("--no-support", toy.no_support, "Omit the weak support head");
  toy_cmd->add_option("--pairs", toy.pairs, "Number of task pairs");

  FixtureArgs fa;
  auto* mf_cmd = app.add_subcommand("make-fixture", "Write a fixture bundle computed by this engine");
  add_common(mf_cmd, false, false);
  mf_cmd->add_option("--layers", fa.layers);
  mf_cmd->add_option("--heads", fa.heads);
  mf_cmd->add_option("--d-model", fa.d_model);
  mf_cmd->add_option("--seq-len", fa.seq_len);
  mf_cmd->add_option("--vocab", fa.vocab);
  mf_cmd->add_option("--ln", fa.ln)->check(CLI::IsMember({"pre_ln", "none"}));
  mf_cmd->add_flag("--zero", fa.zero, "All-zero weights");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(ExitCode::kValidation);
  }

  try {
    if (*ra_cmd) cmd_ra_extract(common, ra);
    if (*pt_cmd) cmd_perturb(common, pt);
    if (*pa_cmd) cmd_patch(common, pa);
    if (*fx_cmd) return cmd_check_fixtures(fixture_dirs);
    if (*toy_cmd) cmd_make_toy(common, toy);
    if (*mf_cmd) cmd_make_fixture(common, fa);
  } catch (const Error& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return static_cast<int>(e.exit_code());
  } catch (const fs::filesystem_error& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return static_cast<int>(ExitCode::kData);
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 1;
  }
  return 0;
}
