#include <gtest/gtest.h>

#include <cmath>

#include "helpers.hpp"

using namespace revattn;
using revattn::test::random_model;
using revattn::test::random_tokens;
using revattn::test::tiny_config;

namespace {

// Replaces one head's probabilities with softmax((S + delta) / sqrt(d/h)),
// where S is the recorded unscaled product QK^T.
class ScorePerturbation : public ForwardHooks<double> {
 public:
  ScorePerturbation(int layer, int head, MatrixD product, double scale)
      : layer_(layer), head_(head), product_(std::move(product)), scale_(scale) {}

  void attention(int layer, int head, MatrixD& probs) const override {
    if (layer != layer_ || head != head_) return;
    const auto n = product_.rows();
    for (Eigen::Index i = 0; i < n; ++i) {
      const RowVectorD s = product_.row(i).head(i + 1) * scale_;
      const RowVectorD e = (s.array() - s.maxCoeff()).exp().matrix();
      probs.row(i).setZero();
      probs.row(i).head(i + 1) = e / e.sum();
    }
  }

  MatrixD product_;

 private:
  int layer_, head_;
  double scale_;
};

double last_loss(const ForwardTrace<double>& t, int target) {
  return loss_and_logit_grad(t.logits, target).loss;
}

}  // namespace

TEST(OutputProj, GradientIsOuterProductSum) {
  MatrixD delta(2, 3), av(2, 2);
  delta << 1, 0, 2, 0, 1, -1;
  av << 1, 2, 3, 4;
  const auto r = output_proj_vjp(delta, av);
  EXPECT_EQ(r.delta_o, delta);
  MatrixD expect = av.row(0).transpose() * delta.row(0) + av.row(1).transpose() * delta.row(1);
  EXPECT_TRUE(r.grad_w_o.isApprox(expect));
  EXPECT_THROW(output_proj_vjp(delta, av.topRows(1)), Error);
}

TEST(OutputProj, UpdateDynamics) {
  const MatrixD w = MatrixD::Random(4, 6);
  const RowVectorD x = RowVectorD::Random(4);
  const RowVectorD delta = RowVectorD::Random(6);
  const auto still = update_dynamics(w, x, delta, 0.0);
  EXPECT_EQ(still.updated_output, x * w);

  RowVectorD unit = RowVectorD::Zero(4);
  unit(2) = 1.0;
  const auto u = update_dynamics(w, unit, delta, 0.5);
  EXPECT_TRUE(u.updated_output.isApprox(unit * w - 0.5 * delta, 1e-14));

  for (int trial = 0; trial < 20; ++trial) {
    const auto r = update_dynamics(MatrixD::Random(4, 6), RowVectorD::Random(4),
                                   RowVectorD::Random(6), 0.37);
    EXPECT_LE(r.max_abs_discrepancy, 1e-12);
  }
}

TEST(ValueVjp, HandExample) {
  MatrixD a(2, 2), e(2, 2);
  a << 1, 0, 0.5, 0.5;
  e << 2, 0, 0, 4;
  MatrixD expect(2, 2);
  expect << 2, 2, 0, 2;
  EXPECT_TRUE(value_vjp(a, e).isApprox(expect));
}

TEST(ValueVjp, LastPositionOnlyReachesItself) {
  const auto m = random_model(tiny_config(1, 2, 8, 5), 4);
  const auto t = model_forward(m, random_tokens(m.config(), 5, 2));
  const MatrixD a = t.layers[0].heads[0].attn;
  MatrixD e = MatrixD::Random(5, 4);
  const MatrixD dv = value_vjp(a, e);
  EXPECT_TRUE(dv.row(4).isApprox(a(4, 4) * e.row(4)));
}

TEST(SoftmaxDerivative, HandExample) {
  MatrixD a(2, 2), et(2, 2);
  a << 1, 0, 0.5, 0.5;
  et << 3, 7, 1, 3;
  const MatrixD r = softmax_derivative(a, et, 1, 1);
  EXPECT_EQ(r(0, 0), 0.0);
  EXPECT_EQ(r(0, 1), 0.0);
  EXPECT_DOUBLE_EQ(r(1, 0), -0.5);
  EXPECT_DOUBLE_EQ(r(1, 1), 0.5);
}

TEST(SoftmaxDerivative, ScaleFactor) {
  MatrixD a(2, 2), et(2, 2);
  a << 1, 0, 0.5, 0.5;
  et << 0, 0, 1, 3;
  const MatrixD r = softmax_derivative(a, et, 16, 4);
  EXPECT_DOUBLE_EQ(r(1, 1), 0.25);
  EXPECT_THROW(softmax_derivative(a, et, 2, 3), Error);
  EXPECT_THROW(softmax_derivative(a, et.leftCols(1), 2, 1), Error);
}

TEST(QueryKeyVjp, HandExample) {
  MatrixD r(2, 2), q(2, 1), k(2, 1);
  r << 0, 0, -0.5, 0.5;
  q << 1, 1;
  k << 2, 4;
  const auto g = query_key_vjp(r, q, k);
  EXPECT_DOUBLE_EQ(g.delta_q(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(g.delta_q(1, 0), 1.0);
  EXPECT_DOUBLE_EQ(g.delta_k(0, 0), -0.5);
  EXPECT_DOUBLE_EQ(g.delta_k(1, 0), 0.5);
}

TEST(ReversedAttention, StructuralProperties) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto c = tiny_config(2, 2, 8, 6);
    const auto m = random_model(c, seed);
    const auto run = run_reversed_attention(m, random_tokens(c, 6, seed), 3);
    for (const auto& layer : run.backward.layers) {
      for (const auto& h : layer.heads) {
        EXPECT_LE(h.R.rowwise().sum().cwiseAbs().maxCoeff(), 1e-12);
        for (int i = 0; i < 6; ++i)
          for (int j = i + 1; j < 6; ++j) EXPECT_EQ(h.R(i, j), 0.0);
      }
    }
  }
}

TEST(ReversedAttention, SingleTokenIsZero) {
  const auto c = tiny_config();
  const auto m = random_model(c, 7);
  const std::vector<int> ids{5};
  const auto run = run_reversed_attention(m, ids, 2);
  for (int l = 0; l < 2; ++l)
    for (int h = 0; h < 2; ++h) EXPECT_EQ(run.backward.ra(l, h)(0, 0), 0.0);
}

TEST(ReversedAttention, ZeroLogitGradientGivesZeroEverything) {
  const auto c = tiny_config();
  const auto m = random_model(c, 8);
  const auto t = model_forward(m, random_tokens(c, 4, 1));
  const MatrixD dl = MatrixD::Zero(4, c.vocab_size);
  const auto b = full_backward(m, t, dl);
  for (const auto& L : b.layers)
    for (const auto& h : L.heads) EXPECT_TRUE(h.R.isZero(0.0));
  for_each_tensor(*b.grads, [](const std::string&, const auto& g) { EXPECT_TRUE(g.isZero(0.0)); });
}

TEST(ReversedAttention, MatchesScoreDerivative) {
  for (auto ln : {LnMode::kNone, LnMode::kPreLn}) {
    const auto c = tiny_config(2, 2, 8, 5, ln);
    const auto m = random_model(c, 21);
    const auto ids = random_tokens(c, 5, 22);
    const int target = 4;
    const auto run = run_reversed_attention(m, ids, target);
    const double scale = 1.0 / std::sqrt(static_cast<double>(c.head_dim()));
    for (int l = 0; l < 2; ++l) {
      for (int h = 0; h < 2; ++h) {
        const auto& ht = run.trace.layers[l].heads[h];
        const MatrixD product = ht.q * ht.k.transpose();
        const MatrixD& R = run.backward.ra(l, h);
        const double eps = 1e-5;
        for (int i = 0; i < 5; ++i) {
          for (int j = 0; j <= i; ++j) {
            ScorePerturbation hook(l, h, product, scale);
            hook.product_(i, j) += eps;
            const double up = last_loss(model_forward(m, ids, &hook), target);
            hook.product_(i, j) -= 2 * eps;
            const double down = last_loss(model_forward(m, ids, &hook), target);
            const double fd = (up - down) / (2 * eps);
            EXPECT_NEAR(R(i, j), fd, 1e-8 + 1e-6 * std::abs(fd)) << "l" << l << " h" << h << " " << i << "," << j;
          }
        }
      }
    }
  }
}

TEST(ReversedAttention, FloatForwardAgreesWithDouble) {
  const auto c = tiny_config();
  const auto md = random_model<double>(c, 31);
  const Model<float> mf(c, md.weights().cast<float>());
  const auto ids = random_tokens(c, 6, 3);
  const auto rd = run_reversed_attention(md, ids, 1);
  const auto rf = run_reversed_attention(mf, ids, 1);
  for (int l = 0; l < 2; ++l)
    for (int h = 0; h < 2; ++h) {
      const double scale = std::max(1e-3, rd.backward.ra(l, h).cwiseAbs().maxCoeff());
      EXPECT_LE((rd.backward.ra(l, h) - rf.backward.ra(l, h)).cwiseAbs().maxCoeff() / scale, 1e-3);
    }
}

TEST(Backward, RejectsIntervenedTrace) {
  const auto c = tiny_config();
  const auto m = random_model(c, 2);
  const ForwardHooks<double> noop;
  const auto t = model_forward(m, random_tokens(c, 3, 1), &noop);
  try {
    full_backward(m, t, MatrixD::Zero(3, c.vocab_size));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kTraceMismatch);
  }
}

TEST(Backward, RejectsTruncatedTrace) {
  const auto c = tiny_config();
  const auto m = random_model(c, 2);
  auto t = model_forward(m, random_tokens(c, 3, 1));
  t.layers.pop_back();
  EXPECT_THROW(full_backward(m, t, MatrixD::Zero(3, c.vocab_size)), Error);
}

TEST(Backward, KeyBiasGradientVanishes) {
  const auto c = tiny_config();
  const auto m = random_model(c, 5);
  const auto run = run_reversed_attention(m, random_tokens(c, 6, 5), 0);
  for (const auto& L : run.backward.grads->layers) EXPECT_LT(L.b_k.cwiseAbs().maxCoeff(), 1e-12);
}

TEST(GradCheck, LinearSingleLayer) {
  auto c = tiny_config(1, 2, 8, 2, LnMode::kNone);
  FdOptions o;
  o.samples = 300;
  const auto r = finite_difference_check(c, 1, o);
  EXPECT_LT(r.max_rel_error, 1e-7) << r.worst.tensor << "[" << r.worst.index << "]";
}

TEST(GradCheck, PreLnTwoLayers) {
  const auto c = tiny_config(2, 2, 8, 4, LnMode::kPreLn);
  FdOptions o;
  o.eps = 1e-6;
  o.samples = 300;
  const auto r = finite_difference_check(c, 2, o);
  EXPECT_LT(r.max_rel_error, 1e-6) << r.worst.tensor << "[" << r.worst.index << "]";
  EXPECT_GT(r.tensors_covered.size(), 10u);
}

TEST(GradCheck, ErrorShrinksWithStep) {
  const auto c = tiny_config(1, 2, 8, 4, LnMode::kPreLn);
  FdOptions coarse;
  coarse.eps = 1e-3;
  coarse.samples = 100;
  FdOptions fine = coarse;
  fine.eps = 5e-4;
  const auto a = finite_difference_check(c, 3, coarse);
  const auto b = finite_difference_check(c, 3, fine);
  EXPECT_LT(b.max_rel_error, a.max_rel_error);
  EXPECT_LT(b.max_rel_error, 0.4 * a.max_rel_error);
}
