#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "qprobe/losses.hpp"

using namespace qprobe;
using fixtures::EmbeddingPool;
using fixtures::LossUnderTest;

namespace {

// Linear probe over dim 1: Q(x) = w x + b.
Probe scalar_probe(double w, double b) {
  Probe p(ProbeKind::linear, 1, {});
  p.params()[0] = w;
  p.params()[1] = b;
  return p;
}

const std::vector<float> kOne = {1.0f};
const std::vector<float> kZero = {0.0f};

bool all_zero(const ProbeGradient& g) {
  return std::all_of(g.values.begin(), g.values.end(), [](double v) { return v == 0.0; });
}

}  // namespace

TEST(LossQ, PerfectFitIsZero) {
  const Probe p(ProbeKind::linear, 1, {});
  const std::vector<RewardSample> batch = {{kOne, 0.0}, {kZero, 0.0}};
  const auto r = loss_q(p, batch);
  EXPECT_EQ(r.value, 0.0);
  EXPECT_TRUE(all_zero(r.grad));
}

TEST(LossQ, SingleRecord) {
  const std::vector<RewardSample> batch = {{kZero, 1.0}};
  EXPECT_DOUBLE_EQ(loss_q(scalar_probe(0.0, 0.5), batch).value, 0.25);
}

TEST(LossQ, ZeroExactlyWhenFitIsExact) {
  Rng r(1);
  EmbeddingPool pool;
  Probe truth(ProbeKind::linear, 4, {});
  for (double& v : truth.params()) v = r.normal();
  std::vector<RewardSample> batch;
  for (int i = 0; i < 20; ++i) {
    const auto x = pool.make(r, 4);
    batch.push_back({x, probe_forward(truth, x)});
  }
  EXPECT_EQ(loss_q(truth, batch).value, 0.0);
  Probe off = truth;
  off.params()[0] += 1e-3;
  EXPECT_GT(loss_q(off, batch).value, 0.0);
}

TEST(LossCE, Values) {
  const std::vector<RewardSample> one = {{kZero, 1.0}};
  EXPECT_NEAR(loss_ce(scalar_probe(0.0, 0.0), one).value, std::log(2.0), 1e-15);
  EXPECT_LT(loss_ce(scalar_probe(0.0, 50.0), one).value, 1e-20);
  EXPECT_EQ(loss_ce(scalar_probe(0.0, 1e6), one).value, 0.0);
  const std::vector<RewardSample> zero = {{kZero, 0.0}};
  EXPECT_EQ(loss_ce(scalar_probe(0.0, -1e6), zero).value, 0.0);
  EXPECT_NEAR(loss_ce(scalar_probe(0.0, 1e6), zero).value, 1e6, 1e-6);
  const std::vector<RewardSample> half = {{kZero, 0.5}};
  EXPECT_THROW(loss_ce(scalar_probe(0.0, 0.0), half), ArgumentError);
}

TEST(SoftmaxRatio, EqualScoresGiveOneOverK) {
  Rng r(2);
  EmbeddingPool pool;
  const Probe p = fixtures::random_probe(ProbeKind::mlp, 4, r);
  const auto x = pool.make(r, 4);
  for (std::size_t k : {2, 3, 7, 48}) {
    const std::vector<Embedding> context(k - 1, x);
    EXPECT_DOUBLE_EQ(softmax_ratio(p, x, context, 0.1), 1.0 / static_cast<double>(k));
  }
}

TEST(SoftmaxRatio, ClosedForm) {
  const double beta = 0.3;
  const Probe p = scalar_probe(beta * std::log(2.0), 0.0);
  const std::vector<Embedding> context = {kZero};
  EXPECT_NEAR(softmax_ratio(p, kOne, context, beta), 2.0 / 3.0, 1e-15);
}

TEST(SoftmaxRatio, ExtremeRatiosStayFinite) {
  const Probe p = scalar_probe(1e6 * 0.1, 0.0);
  const std::vector<Embedding> context = {kZero, kOne, kZero};
  const double v = softmax_ratio(p, kOne, context, 0.1);
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_GT(v, 0.0);
  EXPECT_LE(v, 1.0);
  const double low = softmax_ratio(scalar_probe(-1e6, 0.0), kOne, std::vector<Embedding>{kZero}, 0.1);
  EXPECT_TRUE(std::isfinite(low));
  EXPECT_GE(low, 0.0);
}

TEST(LossPG, AdvantageZeroGivesZero) {
  Rng r(3);
  EmbeddingPool pool;
  const Probe p = fixtures::random_probe(ProbeKind::linear, 3, r);
  std::vector<PromptGroup> groups(2);
  for (auto& g : groups) {
    for (int i = 0; i < 4; ++i) g.records.push_back({pool.make(r, 3), 0.7});
  }
  const auto res = loss_pg(p, groups, {0.5, 0.7});
  EXPECT_EQ(res.value, 0.0);
  EXPECT_TRUE(all_zero(res.grad));
}

TEST(LossPG, HandEvaluatedPair) {
  const Probe p = scalar_probe(0.0, 0.3);
  const std::vector<PromptGroup> groups = {{"x", {{kOne, 1.0}, {kZero, 0.0}}}};
  EXPECT_EQ(loss_pg(p, groups, {1.0, 0.5}).value, 0.0);
  // Unequal scores: rho = softmax(Q / beta) with Q = (1, 0), beta = 1.
  const Probe tilted = scalar_probe(1.0, 0.0);
  const double rho1 = std::exp(1.0) / (std::exp(1.0) + 1.0);
  const double expected = -0.5 * (0.5 * rho1 + (-0.5) * (1.0 - rho1));
  EXPECT_NEAR(loss_pg(tilted, groups, {1.0, 0.5}).value, expected, 1e-15);
}

TEST(LossPG, UniformWeightsAtZeroProbe) {
  Rng r(4);
  EmbeddingPool pool;
  const Probe zero(ProbeKind::linear, 3, {});
  std::vector<PromptGroup> groups(5);
  double adv_sum = 0.0;
  const double b = 0.2;
  for (auto& g : groups) {
    for (int i = 0; i < 10; ++i) {
      const double reward = static_cast<double>(r.index(2));
      adv_sum += reward - b;
      g.records.push_back({pool.make(r, 3), reward});
    }
  }
  // Each group: -(1/g) sum_i A_i (1/g); averaged over 5 groups.
  EXPECT_NEAR(loss_pg(zero, groups, {0.1, b}).value, -adv_sum / 50.0 / 10.0, 1e-15);
}

TEST(LossPG, AdvantageInvariance) {
  Rng r(5);
  EmbeddingPool pool;
  const Probe p = fixtures::random_probe(ProbeKind::mlp, 4, r);
  std::vector<PromptGroup> groups(3), shifted(3);
  for (std::size_t gi = 0; gi < 3; ++gi) {
    for (int i = 0; i < 6; ++i) {
      const auto x = pool.make(r, 4);
      const double reward = r.normal();
      groups[gi].records.push_back({x, reward});
      shifted[gi].records.push_back({x, reward + 4.0});
    }
  }
  const auto a = loss_pg(p, groups, {0.3, 0.25});
  const auto b = loss_pg(p, shifted, {0.3, 4.25});
  EXPECT_NEAR(a.value, b.value, 1e-12);
  for (std::size_t i = 0; i < a.grad.values.size(); ++i) EXPECT_NEAR(a.grad.values[i], b.grad.values[i], 1e-12);
}

TEST(LossPG, GroupShapeErrors) {
  const Probe p = scalar_probe(0.0, 0.0);
  const std::vector<PromptGroup> single = {{"x", {{kOne, 1.0}}}};
  EXPECT_THROW(loss_pg(p, single, {}), ArgumentError);
  const std::vector<PromptGroup> ragged = {{"x", {{kOne, 1.0}, {kZero, 0.0}}},
                                           {"y", {{kOne, 1.0}, {kZero, 0.0}, {kOne, 0.0}}}};
  EXPECT_THROW(loss_pg(p, ragged, {}), ArgumentError);
  EXPECT_THROW(loss_pg(p, std::vector<PromptGroup>{}, {}), ArgumentError);
  const std::vector<PromptGroup> ok = {{"x", {{kOne, 1.0}, {kZero, 0.0}}}};
  EXPECT_THROW(loss_pg(p, ok, {0.0, 0.0}), ArgumentError);
}

TEST(LossQP, Values) {
  const std::vector<PreferenceSample> same = {{kOne, kOne}};
  EXPECT_NEAR(loss_qp(scalar_probe(2.0, 1.0), same).value, std::log(2.0), 1e-15);
  const std::vector<PreferenceSample> apart = {{kOne, kZero}};
  EXPECT_EQ(loss_qp(scalar_probe(1e6, 0.0), apart).value, 0.0);
  EXPECT_NEAR(loss_qp(scalar_probe(-1e6, 0.0), apart).value, 1e6, 1e-6);
}

TEST(LossQP, ShiftInvariance) {
  Rng r(6);
  EmbeddingPool pool;
  Probe p = fixtures::random_probe(ProbeKind::linear, 4, r);
  std::vector<PreferenceSample> batch;
  for (int i = 0; i < 10; ++i) batch.push_back({pool.make(r, 4), pool.make(r, 4)});
  const double before = loss_qp(p, batch).value;
  p.params()[4] += 123.0;  // bias shifts every score by the same constant
  EXPECT_NEAR(loss_qp(p, batch).value, before, 1e-12);
}

TEST(LossDPO, ClosedForms) {
  const std::vector<Embedding> none;
  EXPECT_NEAR(loss_dpo_approx(scalar_probe(0.0, 0.4), {kOne, kZero}, none, {}).value, std::log(2.0), 1e-15);
  const double beta = 0.2;
  const Probe p = scalar_probe(beta * std::log(3.0), 0.0);
  const DPOConfig cfg{1.0, beta, 2};
  // rho_w = 3/4, rho_l = 1/4.
  EXPECT_NEAR(loss_dpo_approx(p, {kOne, kZero}, none, cfg).value, softplus(-0.5), 1e-15);
  // With context {0}: f = (3, 1, 1), rho_w - rho_l = 2/5; alpha = 2.
  const std::vector<Embedding> ctx = {kZero};
  EXPECT_NEAR(loss_dpo_approx(p, {kOne, kZero}, ctx, {2.0, beta, 3}).value, softplus(-0.8), 1e-15);
  EXPECT_THROW(loss_dpo_approx(p, {kOne, kZero}, none, {0.0, beta, 2}), ArgumentError);
}

TEST(Losses, FiniteAtExtremeScores) {
  for (double w : {-1e8, -1e3, 1e3, 1e8}) {
    const Probe p = scalar_probe(w, 0.0);
    const std::vector<RewardSample> rs = {{kOne, 1.0}, {kZero, 0.0}};
    const std::vector<PreferenceSample> ps = {{kOne, kZero}, {kZero, kOne}};
    const std::vector<PromptGroup> gs = {{"x", {{kOne, 1.0}, {kZero, 0.0}}}};
    const std::vector<Embedding> ctx = {kOne, kZero};
    for (const auto& res : {loss_q(p, rs), loss_ce(p, rs), loss_pg(p, gs, {0.1, 0.5}), loss_qp(p, ps),
                            loss_dpo_approx(p, ps[0], ctx, {1.0, 0.1, 4})}) {
      EXPECT_TRUE(std::isfinite(res.value)) << "w = " << w;
      for (double g : res.grad.values) EXPECT_TRUE(std::isfinite(g)) << "w = " << w;
    }
  }
}

class GradientCheck : public ::testing::TestWithParam<std::tuple<LossUnderTest, ProbeKind>> {};

TEST_P(GradientCheck, MatchesCentralDifferences) {
  const auto [loss, kind] = GetParam();
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    EXPECT_LT(fixtures::random_instance_gradient_error(loss, kind, seed), 1e-4)
        << fixtures::name(loss) << " seed " << seed;
  }
}

INSTANTIATE_TEST_SUITE_P(AllLosses, GradientCheck,
                         ::testing::Combine(::testing::Values(LossUnderTest::q, LossUnderTest::ce, LossUnderTest::pg,
                                                              LossUnderTest::qp, LossUnderTest::dpo),
                                            ::testing::Values(ProbeKind::linear, ProbeKind::mlp)),
                         [](const auto& info) {
                           std::string n = fixtures::name(std::get<0>(info.param));
                           n.erase(std::remove_if(n.begin(), n.end(), [](char c) { return !std::isalnum(c); }),
                                   n.end());
                           return n + (std::get<1>(info.param) == ProbeKind::linear ? "_linear" : "_mlp");
                         });
