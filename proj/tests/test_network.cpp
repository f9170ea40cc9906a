// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "sbkd/network.hpp"
#include "test_util.hpp"

using namespace sbkd;

namespace {

// Independent count: allocate the model and add up array sizes.
std::int64_t counted(int w, int h) { return param_count(ModelParams::zeros(w, h)); }

Eigen::MatrixXd swap_halves(const Eigen::MatrixXd& m) {
  const Eigen::Index h = m.cols() / 2;
  Eigen::MatrixXd out(m.rows(), m.cols());
  out << m.rightCols(h), m.leftCols(h);
  return out;
}

Eigen::MatrixXd reverse_rows(const Eigen::MatrixXd& m) { return m.colwise().reverse(); }

}  // namespace

TEST(ParamCount, MatchesPublishedModelSizes) {
  EXPECT_EQ(param_count(161, 256), 2517665);
  EXPECT_EQ(param_count(40, 256), 2207784);
  EXPECT_EQ(param_count(161, 512), 9229473);
  EXPECT_EQ(param_count(40, 512), 8609832);
}

TEST(ParamCount, FormulaAgreesWithAllocatedArrays) {
  for (int w : {1, 2, 6, 40, 161})
    for (int h : {1, 3, 5, 16, 64}) EXPECT_EQ(param_count(w, h), counted(w, h)) << w << "," << h;
  // Smallest model: 32 + 40 weights/biases in the recurrent layers, 3 in the output.
  EXPECT_EQ(param_count(1, 1), 75);
  EXPECT_EQ(counted(1, 1), 75);
}

TEST(ParamCount, PerDirectionCount) {
  const ModelParams p = ModelParams::zeros(6, 5);
  const auto& d = p.lstm1.fwd;
  EXPECT_EQ(d.w_in.size() + d.w_rec.size() + d.b_in.size() + d.b_rec.size(), 4 * (5 * (6 + 5) + 2 * 5));
  const auto& d2 = p.lstm2.bwd;
  EXPECT_EQ(d2.w_in.size() + d2.w_rec.size() + d2.b_in.size() + d2.b_rec.size(), 4 * (5 * (10 + 5) + 2 * 5));
}

TEST(Init, DeterministicBoundedAndFinite) {
  const ModelParams a = init_params(6, 5, 42);
  const ModelParams b = init_params(6, 5, 42);
  const ModelParams c = init_params(6, 5, 43);
  const double bound = 1.0 / std::sqrt(5.0);
  bool differs = false;
  for (std::size_t k = 0; k < kArrayCount; ++k) {
    EXPECT_TRUE(*arrays(a)[k] == *arrays(b)[k]);
    EXPECT_TRUE(arrays(a)[k]->allFinite());
    EXPECT_LE(arrays(a)[k]->cwiseAbs().maxCoeff(), bound);
    differs = differs || *arrays(a)[k] != *arrays(c)[k];
  }
  EXPECT_TRUE(differs);
  EXPECT_THROW(init_params(0, 5, 1), UsageError);
}

TEST(Forward, ZeroParamsGiveZeroOutput) {
  const ModelParams p = ModelParams::zeros(6, 5);
  const Eigen::MatrixXd y = forward(p, test::random_matrix(7, 6, 1));
  EXPECT_EQ(y.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Forward, ShapeAndNonnegativity) {
  for (int seed = 0; seed < 20; ++seed) {
    const ModelParams p = init_params(6, 5, seed);
    const Eigen::MatrixXd x = test::random_matrix(7, 6, seed + 100, -5.0, 5.0);
    const Eigen::MatrixXd y = forward(p, x);
    EXPECT_EQ(y.rows(), 7);
    EXPECT_EQ(y.cols(), 6);
    EXPECT_GE(y.minCoeff(), 0.0);
  }
  EXPECT_THROW(forward(init_params(6, 5, 0), Eigen::MatrixXd::Zero(7, 5)), ShapeError);
}

TEST(Forward, RepeatedCallsAreBitwiseIdentical) {
  const ModelParams p = init_params(6, 5, 3);
  const Eigen::MatrixXd x = test::random_matrix(11, 6, 4);
  EXPECT_TRUE(forward(p, x) == forward(p, x));
}

// Reversing time and swapping the two directions (and the matching halves of
// every consumer of the concatenated state) must reverse the output.
TEST(Forward, BidirectionalSymmetry) {
  for (int seed = 0; seed < 5; ++seed) {
    const ModelParams p = init_params(6, 5, seed);
    ModelParams q = p;
    std::swap(q.lstm1.fwd, q.lstm1.bwd);
    std::swap(q.lstm2.fwd, q.lstm2.bwd);
    q.lstm2.fwd.w_in = swap_halves(q.lstm2.fwd.w_in);
    q.lstm2.bwd.w_in = swap_halves(q.lstm2.bwd.w_in);
    q.w_out = swap_halves(q.w_out);
    const Eigen::MatrixXd x = test::random_matrix(7, 6, seed + 10);
    const Eigen::MatrixXd y = forward(p, x);
    const Eigen::MatrixXd yr = forward(q, reverse_rows(x));
    EXPECT_LT((reverse_rows(yr) - y).cwiseAbs().maxCoeff(), 1e-12);
  }
}

// Each sequence of a batch is processed independently of the others.
TEST(Forward, BatchMatchesSingleSequences) {
  const ModelParams p = init_params(6, 5, 8);
  const Eigen::Index frames = 9, batch = 3;
  std::vector<Eigen::MatrixXd> xs;
  SequenceBatch b{Eigen::MatrixXd(6, frames * batch), frames, batch};
  for (Eigen::Index k = 0; k < batch; ++k) {
    xs.push_back(test::random_matrix(frames, 6, 20 + k));
    for (Eigen::Index t = 0; t < frames; ++t) b.data.col(t * batch + k) = xs[k].row(t).transpose();
  }
  const Eigen::MatrixXd out = forward_batch(p, b).output;
  for (Eigen::Index k = 0; k < batch; ++k) {
    const Eigen::MatrixXd single = forward(p, xs[k]);
    for (Eigen::Index t = 0; t < frames; ++t)
      EXPECT_LT((out.col(t * batch + k) - single.row(t).transpose()).cwiseAbs().maxCoeff(), 1e-13);
  }
}

TEST(Backward, ZeroUpstreamGivesZeroGradients) {
  const ModelParams p = init_params(6, 5, 1);
  const ModelParams g = backward(p, test::random_matrix(7, 6, 2), Eigen::MatrixXd::Zero(7, 6));
  for (const Matrix* a : arrays(g)) EXPECT_EQ(a->cwiseAbs().maxCoeff(), 0.0);
}

TEST(Backward, DoublingUpstreamDoublesGradients) {
  const ModelParams p = init_params(6, 5, 1);
  const Eigen::MatrixXd x = test::random_matrix(7, 6, 2);
  const Eigen::MatrixXd up = test::random_matrix(7, 6, 3);
  const ModelParams g1 = backward(p, x, up);
  const ModelParams g2 = backward(p, x, 2.0 * up);
  for (std::size_t k = 0; k < kArrayCount; ++k) EXPECT_TRUE(*arrays(g2)[k] == 2.0 * *arrays(g1)[k]) << kArrayNames[k];
}

TEST(Backward, MatchesCentralDifferences) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) EXPECT_LT(test::gradient_check_error(6, 5, 7, seed), 1e-4);
}

TEST(Backward, RejectsMismatchedUpstream) {
  const ModelParams p = init_params(6, 5, 1);
  EXPECT_THROW(backward(p, Eigen::MatrixXd::Zero(7, 6), Eigen::MatrixXd::Zero(6, 6)), ShapeError);
}

namespace {
ModelParams scalar_like(double value) {
  ModelParams p = ModelParams::zeros(1, 1);
  for (Matrix* a : arrays(p)) a->setConstant(value);
  return p;
}
}  // namespace

TEST(Adam, FirstStepFromZero) {
  ModelParams p = scalar_like(0.0);
  AdamState s = AdamState::for_params(p);
  adam_step(p, scalar_like(1.0), s, AdamHyper{});
  EXPECT_EQ(s.step, 1);
  // m_hat = 1, v_hat = 1: update = lr / (1 + eps).
  EXPECT_NEAR(p.w_out(0, 0), -0.0002 / (1.0 + 1e-8), 1e-18);
  for (const Matrix* a : arrays(p)) EXPECT_EQ(a->maxCoeff(), p.w_out(0, 0));
}

TEST(Adam, ZeroGradientLeavesParamsAndCountsStep) {
  ModelParams p = init_params(3, 2, 5);
  const ModelParams before = p;
  AdamState s = AdamState::for_params(p);
  adam_step(p, ModelParams::zeros(3, 2), s, AdamHyper{});
  EXPECT_EQ(s.step, 1);
  for (std::size_t k = 0; k < kArrayCount; ++k) EXPECT_TRUE(*arrays(p)[k] == *arrays(before)[k]);
}

TEST(Adam, MatchesScalarRecurrenceOverSeveralSteps) {
  ModelParams p = scalar_like(0.3);
  AdamState s = AdamState::for_params(p);
  const AdamHyper hp{0.01, 0.9, 0.999, 1e-8};
  double x = 0.3, m = 0.0, v = 0.0;
  for (int t = 1; t <= 5; ++t) {
    const double g = 0.5 * t - 1.0;
    adam_step(p, scalar_like(g), s, hp);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    x -= 0.01 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    EXPECT_NEAR(p.b_out(0, 0), x, 1e-15);
  }
}

TEST(Adam, NonFiniteGradientThrowsBeforeUpdating) {
  ModelParams p = init_params(3, 2, 5);
  const ModelParams before = p;
  AdamState s = AdamState::for_params(p);
  ModelParams g = ModelParams::zeros(3, 2);
  g.b_out(1, 0) = std::nan("");
  EXPECT_THROW(adam_step(p, g, s, AdamHyper{}), DivergedError);
  EXPECT_EQ(s.step, 0);
  for (std::size_t k = 0; k < kArrayCount; ++k) EXPECT_TRUE(*arrays(p)[k] == *arrays(before)[k]);
}
