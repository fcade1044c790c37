#include "revattn/patching.hpp"

#include <algorithm>
#include <map>

#include "revattn/parallel.hpp"
#include "revattn/rng.hpp"

namespace revattn {

const char* to_string(PatchSource source) {
  return source == PatchSource::kReversedAttention ? "ra" : "fa";
}

PatchSource parse_patch_source(std::string_view s) {
  if (s == "ra") return PatchSource::kReversedAttention;
  if (s == "fa") return PatchSource::kForwardAttention;
  throw Error(ErrorKind::kInvalidConfig, "unknown patch source '" + std::string(s) + "'");
}

namespace {

void require_bank_fits(const ModelConfig& c, const PatchBank& bank) {
  if (bank.n_layers != c.n_layers || bank.n_heads != c.n_heads ||
      bank.maps.size() != static_cast<std::size_t>(c.total_heads())) {
    throw Error(ErrorKind::kShapeMismatch, "patch bank grid does not match the model");
  }
}

}  // namespace

template <typename T>
PatchBank collect_patch_bank(const Model<T>& model, std::span<const Example> train, PatchSource source) {
  const auto& c = model.config();
  if (train.empty()) throw Error(ErrorKind::kEmptyInput, "no training examples for the patch bank");
  const std::size_t n = train.front().prompt.size();
  for (std::size_t i = 0; i < train.size(); ++i) {
    if (train[i].prompt.size() != n) {
      throw Error(ErrorKind::kLengthMismatch,
                  "training prompt " + std::to_string(i) +
                      (train[i].label.empty() ? "" : " (" + train[i].label + ")") + " has " +
                      std::to_string(train[i].prompt.size()) + " tokens, expected " + std::to_string(n));
    }
  }
  std::vector<HeadMaps> per(train.size());
  parallel_for(train.size(), [&](std::size_t i) {
    if (source == PatchSource::kReversedAttention) {
      per[i] = ra_maps(run_reversed_attention(model, train[i].prompt, train[i].target,
                                              {.weight_gradients = false})
                           .backward);
    } else {
      per[i] = fa_maps(model_forward(model, train[i].prompt));
    }
  });
  PatchBank bank;
  bank.n = static_cast<int>(n);
  bank.n_layers = c.n_layers;
  bank.n_heads = c.n_heads;
  bank.source = source;
  bank.train_count = static_cast<int>(train.size());
  bank.maps.assign(static_cast<std::size_t>(c.total_heads()),
                   MatrixD::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n)));
  // Summed in example order so the result does not depend on scheduling.
  for (const auto& maps : per) {
    for (int l = 0; l < c.n_layers; ++l) {
      for (int h = 0; h < c.n_heads; ++h) bank.map(l, h) += maps[l][h];
    }
  }
  for (auto& m : bank.maps) m /= static_cast<double>(train.size());
  return bank;
}

template <typename T>
Matrix<T> patched_forward(const Model<T>& model, std::span<const int> tokens, const PatchBank& bank,
                          double lr) {
  require_bank_fits(model.config(), bank);
  if (static_cast<int>(tokens.size()) != bank.n) {
    throw Error(ErrorKind::kLengthMismatch, "prompt has " + std::to_string(tokens.size()) +
                                                " tokens, patch bank expects " + std::to_string(bank.n));
  }
  PatchHooks<T> hooks(bank, lr);
  return model_forward(model, tokens, &hooks).logits;
}

template <typename T>
EvalStats evaluate_patched(const Model<T>& model, std::span<const Example> examples,
                           const PatchBank& bank, double lr) {
  require_bank_fits(model.config(), bank);
  for (std::size_t i = 0; i < examples.size(); ++i) {
    if (static_cast<int>(examples[i].prompt.size()) != bank.n) {
      throw Error(ErrorKind::kLengthMismatch, "test prompt " + std::to_string(i) + " has " +
                                                  std::to_string(examples[i].prompt.size()) +
                                                  " tokens, patch bank expects " + std::to_string(bank.n));
    }
  }
  PatchHooks<T> hooks(bank, lr);
  return evaluate<T>(model, examples, &hooks);
}

SameLengthGroups select_same_length(std::span<const Example> train, std::span<const Example> test,
                                    int train_count, std::uint64_t seed) {
  std::map<std::size_t, std::vector<std::size_t>> by_train, by_test;
  for (std::size_t i = 0; i < train.size(); ++i) by_train[train[i].prompt.size()].push_back(i);
  for (std::size_t i = 0; i < test.size(); ++i) by_test[test[i].prompt.size()].push_back(i);
  const std::size_t cap = static_cast<std::size_t>(std::max(1, train_count));
  std::vector<std::size_t> best;
  std::size_t best_size = 0;
  for (const auto& [len, idx] : by_train) {
    if (!by_test.contains(len)) continue;
    const std::size_t size = std::min(cap, idx.size());
    if (size > best_size) {
      best = {len};
      best_size = size;
    } else if (size == best_size) {
      best.push_back(len);
    }
  }
  if (best.empty()) {
    throw Error(ErrorKind::kInsufficientData,
                "no prompt length occurs in both the training and the test pool");
  }
  Rng rng(seed);
  const std::size_t len = best[rng.index(best.size())];
  auto pick = by_train[len];
  rng.shuffle(pick.begin(), pick.end());
  pick.resize(std::min(pick.size(), cap));
  std::sort(pick.begin(), pick.end());
  SameLengthGroups out;
  out.n = static_cast<int>(len);
  for (std::size_t i : pick) out.train.push_back(train[i]);
  for (std::size_t i : by_test[len]) out.test.push_back(test[i]);
  return out;
}

template <typename T>
PatchingResult evaluate_patching(const Model<T>& model, std::span<const Example> train,
                                 std::span<const Example> test, const PatchingOptions& options) {
  const auto groups = select_same_length(train, test, options.train_count, options.seed);
  PatchingResult r;
  r.n = groups.n;
  r.train_used = static_cast<int>(groups.train.size());
  r.test_used = static_cast<int>(groups.test.size());
  r.original = evaluate<T>(model, groups.test, nullptr);
  const auto fa_bank = collect_patch_bank(model, groups.train, PatchSource::kForwardAttention);
  r.fa = evaluate_patched(model, groups.test, fa_bank, options.lr_fa);
  const auto ra_bank = collect_patch_bank(model, groups.train, PatchSource::kReversedAttention);
  r.ra = evaluate_patched(model, groups.test, ra_bank, options.lr_ra);
  return r;
}

#define REVATTN_INSTANTIATE_PATCHING(T)                                                           \
  template PatchBank collect_patch_bank<T>(const Model<T>&, std::span<const Example>, PatchSource); \
  template Matrix<T> patched_forward<T>(const Model<T>&, std::span<const int>, const PatchBank&,  \
                                        double);                                                  \
  template EvalStats evaluate_patched<T>(const Model<T>&, std::span<const Example>,               \
                                         const PatchBank&, double);                               \
  template PatchingResult evaluate_patching<T>(const Model<T>&, std::span<const Example>,         \
                                               std::span<const Example>, const PatchingOptions&);

REVATTN_INSTANTIATE_PATCHING(float)
REVATTN_INSTANTIATE_PATCHING(double)

}  // namespace revattn
