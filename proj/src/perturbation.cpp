#include "revattn/perturbation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "revattn/parallel.hpp"
#include "revattn/rng.hpp"

namespace revattn {

HeadMask::HeadMask(int n_layers, int n_heads, bool active)
    : n_layers_(n_layers), n_heads_(n_heads) {
  if (n_layers < 1 || n_heads < 1) throw Error(ErrorKind::kInvalidConfig, "empty head mask");
  bits_.assign(static_cast<std::size_t>(n_layers) * n_heads, active ? 1 : 0);
}

std::size_t HeadMask::index(int layer, int head) const {
  if (layer < 0 || layer >= n_layers_ || head < 0 || head >= n_heads_) {
    throw Error(ErrorKind::kShapeMismatch, "head (" + std::to_string(layer) + ", " +
                                               std::to_string(head) + ") outside mask");
  }
  return static_cast<std::size_t>(layer) * n_heads_ + head;
}

bool HeadMask::all() const {
  return std::all_of(bits_.begin(), bits_.end(), [](char b) { return b != 0; });
}

int HeadMask::active_count() const {
  return static_cast<int>(std::count(bits_.begin(), bits_.end(), char{1}));
}

namespace {

void require_mask_shape(const ModelConfig& c, const HeadMask& mask) {
  if (mask.n_layers() != c.n_layers || mask.n_heads() != c.n_heads) {
    throw Error(ErrorKind::kShapeMismatch,
                "mask is " + std::to_string(mask.n_layers()) + "x" + std::to_string(mask.n_heads()) +
                    ", model has " + std::to_string(c.n_layers) + "x" + std::to_string(c.n_heads) +
                    " heads");
  }
}

bool fits(const ModelConfig& c, const Example& ex) {
  return !ex.prompt.empty() && static_cast<int>(ex.prompt.size()) <= c.max_seq_len;
}

// Replaces (or zeroes) the output of one head.
template <typename T>
class SingleHeadHooks final : public ForwardHooks<T> {
 public:
  SingleHeadHooks(HeadId id, const Matrix<T>* replacement, bool skip_last)
      : id_(id), replacement_(replacement), skip_last_(skip_last) {}

  void head_output(int layer, int head, Matrix<T>& out) const override {
    if (layer != id_.layer || head != id_.head) return;
    const Eigen::Index rows = skip_last_ ? out.rows() - 1 : out.rows();
    if (rows <= 0) return;
    if (replacement_) {
      out.topRows(rows) = replacement_->topRows(rows);
    } else {
      out.topRows(rows).setZero();
    }
  }

 private:
  HeadId id_;
  const Matrix<T>* replacement_;
  bool skip_last_;
};

template <typename T>
HeadScoreMap intervention_scores(const Model<T>& model, std::span<const Example> examples,
                                 const std::vector<Matrix<T>>* means, const CmOptions& options,
                                 const char* method) {
  const auto& c = model.config();
  if (examples.empty()) throw Error(ErrorKind::kEmptyInput, "no examples for causal mediation");
  for (const auto& ex : examples) validate_tokens(c, ex.prompt);
  std::vector<double> clean(examples.size());
  parallel_for(examples.size(), [&](std::size_t i) {
    clean[i] = target_probability(model_forward(model, examples[i].prompt).logits, examples[i].target);
  });
  const int heads = c.total_heads();
  std::vector<double> effect(static_cast<std::size_t>(heads), 0.0);
  parallel_for(static_cast<std::size_t>(heads), [&](std::size_t k) {
    const HeadId id{static_cast<int>(k) / c.n_heads, static_cast<int>(k) % c.n_heads};
    const Matrix<T>* replacement = means ? &(*means)[k] : nullptr;
    SingleHeadHooks<T> hooks(id, replacement, options.skip_last_position);
    double sum = 0.0;
    for (std::size_t i = 0; i < examples.size(); ++i) {
      const auto logits = model_forward(model, examples[i].prompt, &hooks).logits;
      sum += clean[i] - target_probability(logits, examples[i].target);
    }
    effect[k] = sum / static_cast<double>(examples.size());
  });
  HeadScoreMap out{MatrixD(c.n_layers, c.n_heads), method, NormKind::kFrobenius};
  for (int k = 0; k < heads; ++k) out.scores(k / c.n_heads, k % c.n_heads) = effect[k];
  return out;
}

}  // namespace

template <typename T>
Matrix<T> masked_forward(const Model<T>& model, std::span<const int> tokens, const HeadMask& mask) {
  require_mask_shape(model.config(), mask);
  if (mask.all()) return model_forward(model, tokens).logits;
  MaskHooks<T> hooks(mask);
  return model_forward(model, tokens, &hooks).logits;
}

template <typename T>
EvalStats evaluate(const Model<T>& model, std::span<const Example> examples,
                   const ForwardHooks<T>* hooks) {
  const auto& c = model.config();
  std::vector<int> hit(examples.size(), -1);
  std::vector<double> prob(examples.size(), 0.0);
  parallel_for(examples.size(), [&](std::size_t i) {
    if (!fits(c, examples[i])) return;
    const auto logits = model_forward(model, examples[i].prompt, hooks).logits;
    hit[i] = argmax_last(logits) == examples[i].target ? 1 : 0;
    prob[i] = target_probability(logits, examples[i].target);
  });
  EvalStats s;
  double prob_sum = 0.0;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    if (hit[i] < 0) {
      ++s.skipped;
      continue;
    }
    ++s.evaluated;
    s.correct += hit[i];
    prob_sum += prob[i];
  }
  if (s.evaluated > 0) {
    s.accuracy = static_cast<double>(s.correct) / s.evaluated;
    s.mean_target_prob = prob_sum / s.evaluated;
  }
  return s;
}

template <typename T>
EvalStats accuracy(const Model<T>& model, std::span<const Example> examples, const HeadMask& mask) {
  require_mask_shape(model.config(), mask);
  if (mask.all()) return evaluate<T>(model, examples, nullptr);
  MaskHooks<T> hooks(mask);
  return evaluate<T>(model, examples, &hooks);
}

int default_step(int total_heads) {
  return std::max(1, static_cast<int>(std::ceil(0.01 * total_heads)));
}

template <typename T>
PerturbationCurve perturbation_curve(const Model<T>& model, const HeadOrdering& ordering,
                                     std::span<const Example> examples, int step) {
  const auto& c = model.config();
  require_permutation(ordering, c.n_layers, c.n_heads);
  if (step < 1) throw Error(ErrorKind::kInvalidConfig, "step must be >= 1");
  const int total = c.total_heads();
  HeadMask mask = HeadMask::all_inactive(c);
  PerturbationCurve curve;
  int unmasked = 0;
  while (true) {
    curve.fractions.push_back(static_cast<double>(unmasked) / total);
    curve.accuracies.push_back(accuracy(model, examples, mask).accuracy);
    if (unmasked == total) break;
    const int stop = std::min(total, unmasked + step);
    for (; unmasked < stop; ++unmasked) {
      const auto& id = ordering.heads[unmasked];
      mask.set(id.layer, id.head, true);
    }
  }
  return curve;
}

double auc(const PerturbationCurve& curve) {
  const auto& x = curve.fractions;
  const auto& y = curve.accuracies;
  if (x.size() < 2 || x.size() != y.size()) {
    throw Error(ErrorKind::kInvalidConfig, "curve needs at least two matching points");
  }
  if (x.front() != 0.0 || x.back() != 1.0) {
    throw Error(ErrorKind::kInvalidConfig, "curve fractions must run from 0 to 1");
  }
  double area = 0.0;
  for (std::size_t i = 1; i < x.size(); ++i) {
    if (!(x[i] > x[i - 1])) throw Error(ErrorKind::kInvalidConfig, "curve fractions not increasing");
    area += 0.5 * (y[i] + y[i - 1]) * (x[i] - x[i - 1]);
  }
  return area;
}

template <typename T>
HeadScoreMap cm1_scores(const Model<T>& model, std::span<const Example> examples,
                        const CmOptions& options) {
  return intervention_scores<T>(model, examples, nullptr, options, "cm1");
}

template <typename T>
HeadScoreMap cm2_scores(const Model<T>& model, std::span<const Example> examples,
                        std::span<const Example> heldout, const CmOptions& options) {
  const auto& c = model.config();
  if (heldout.empty()) throw Error(ErrorKind::kEmptyInput, "no held-out examples for mean activations");
  if (examples.empty()) throw Error(ErrorKind::kEmptyInput, "no examples for causal mediation");
  const std::size_t n = examples.front().prompt.size();
  auto check = [&](const Example& ex, const char* group, std::size_t i) {
    if (ex.prompt.size() != n) {
      throw Error(ErrorKind::kLengthMismatch,
                  std::string(group) + " example " + std::to_string(i) +
                      (ex.label.empty() ? "" : " (" + ex.label + ")") + " has " +
                      std::to_string(ex.prompt.size()) + " tokens, expected " + std::to_string(n));
    }
  };
  for (std::size_t i = 0; i < examples.size(); ++i) check(examples[i], "extraction", i);
  for (std::size_t i = 0; i < heldout.size(); ++i) check(heldout[i], "held-out", i);

  std::vector<ForwardTrace<T>> traces(heldout.size());
  parallel_for(heldout.size(), [&](std::size_t i) { traces[i] = model_forward(model, heldout[i].prompt); });
  std::vector<Matrix<T>> means(static_cast<std::size_t>(c.total_heads()));
  for (int l = 0; l < c.n_layers; ++l) {
    for (int h = 0; h < c.n_heads; ++h) {
      Matrix<T> sum = Matrix<T>::Zero(static_cast<Eigen::Index>(n), c.d_model);
      for (const auto& t : traces) sum += t.layers[l].heads[h].out;
      means[static_cast<std::size_t>(l) * c.n_heads + h] = sum / static_cast<T>(traces.size());
    }
  }
  return intervention_scores<T>(model, examples, &means, options, "cm2");
}

BaselineOrderings baseline_orderings(int n_layers, int n_heads, std::uint64_t seed) {
  BaselineOrderings out;
  out.index.method = "index";
  for (int l = 0; l < n_layers; ++l) {
    for (int h = 0; h < n_heads; ++h) out.index.heads.push_back({l, h});
  }
  out.random = out.index;
  out.random.method = "random";
  Rng rng(seed);
  rng.shuffle(out.random.heads.begin(), out.random.heads.end());
  return out;
}

HeadOrdering reversed(const HeadOrdering& ordering) {
  HeadOrdering out = ordering;
  std::reverse(out.heads.begin(), out.heads.end());
  out.direction = ordering.direction == Direction::kForward ? Direction::kReversed : Direction::kForward;
  return out;
}

#define REVATTN_INSTANTIATE_PERTURBATION(T)                                                        \
  template Matrix<T> masked_forward<T>(const Model<T>&, std::span<const int>, const HeadMask&);   \
  template EvalStats evaluate<T>(const Model<T>&, std::span<const Example>, const ForwardHooks<T>*); \
  template EvalStats accuracy<T>(const Model<T>&, std::span<const Example>, const HeadMask&);      \
  template PerturbationCurve perturbation_curve<T>(const Model<T>&, const HeadOrdering&,           \
                                                   std::span<const Example>, int);                 \
  template HeadScoreMap cm1_scores<T>(const Model<T>&, std::span<const Example>, const CmOptions&); \
  template HeadScoreMap cm2_scores<T>(const Model<T>&, std::span<const Example>,                   \
                                      std::span<const Example>, const CmOptions&);

REVATTN_INSTANTIATE_PERTURBATION(float)
REVATTN_INSTANTIATE_PERTURBATION(double)

}  // namespace revattn
