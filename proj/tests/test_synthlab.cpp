#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "qprobe/synthlab.hpp"
#include "test_util.hpp"

using namespace qprobe;

namespace {

SyntheticTaskSpec small_spec(RewardKind kind = RewardKind::binary_linear, std::uint64_t seed = 1) {
  SyntheticTaskSpec s;
  s.n_prompts = 40;
  s.actions_per_prompt = 12;
  s.dim = 6;
  s.reward_kind = kind;
  s.hidden_direction_seed = seed;
  return s;
}

void expect_same_prompts(const SyntheticTask& a, const SyntheticTask& b) {
  ASSERT_EQ(a.prompts.size(), b.prompts.size());
  EXPECT_EQ(a.prompt_ids, b.prompt_ids);
  for (std::size_t x = 0; x < a.prompts.size(); ++x) {
    EXPECT_EQ(a.prompts[x].p0, b.prompts[x].p0);
    EXPECT_EQ(a.prompts[x].embeddings, b.prompts[x].embeddings);
    EXPECT_EQ(a.prompts[x].rewards, b.prompts[x].rewards);
  }
}

// Per-prompt Bernoulli spread of a k = 1 uniform estimate.
double uniform_return_sigma(const SyntheticTask& task, std::size_t episodes) {
  double var = 0.0;
  for (const auto& m : task.prompts) {
    const double p = expected_base_reward(m);
    var += p * (1.0 - p) / static_cast<double>(episodes);
  }
  return std::sqrt(var) / static_cast<double>(task.prompts.size());
}

}  // namespace

TEST(Generation, SameSeedSameTask) {
  for (RewardKind kind : {RewardKind::binary_linear, RewardKind::continuous_linear, RewardKind::preference_bt}) {
    const auto a = generate_task(small_spec(kind, 4));
    const auto b = generate_task(small_spec(kind, 4));
    expect_same_prompts(a, b);
    EXPECT_EQ(a.hidden, b.hidden);
    const auto c = generate_task(small_spec(kind, 5));
    EXPECT_NE(a.prompts[0].p0, c.prompts[0].p0);
  }
}

TEST(Generation, NoiselessBinaryLabelsFollowHiddenDirection) {
  const auto task = generate_task(small_spec());
  for (std::size_t x = 0; x < task.prompts.size(); ++x) {
    const auto& m = task.prompts[x];
    std::size_t wins = 0;
    for (std::size_t a = 0; a < m.size(); ++a) {
      long double s = task.hidden.prompt_offsets[x];
      const auto phi = m.embeddings.row(a);
      for (std::size_t i = 0; i < task.dim(); ++i) {
        s += static_cast<long double>(task.hidden.reward_direction[i]) * phi[i];
      }
      EXPECT_EQ(m.rewards[a], s > 0 ? 1.0 : 0.0) << "prompt " << x << " action " << a;
      wins += m.rewards[a] == 1.0;
    }
    EXPECT_GT(wins, 0u);
    EXPECT_LT(wins, m.size());
  }
}

TEST(Generation, ContinuousRewardIsLinearPlusNoise) {
  auto spec = small_spec(RewardKind::continuous_linear);
  spec.noise_scale = 0.3;
  const auto task = generate_task(spec);
  for (std::size_t x = 0; x < 5; ++x) {
    const auto& m = task.prompts[x];
    for (std::size_t a = 0; a < m.size(); ++a) {
      double s = task.hidden.noise[x][a];
      for (std::size_t i = 0; i < task.dim(); ++i) s += task.hidden.reward_direction[i] * m.embeddings.row(a)[i];
      EXPECT_NEAR(m.rewards[a], s, 1e-12);
    }
  }
}

TEST(Generation, HiddenDirectionHasRequestedNorm) {
  auto spec = small_spec();
  spec.reward_scale = 2.5;
  spec.difficulty_alignment = 0.6;
  const auto task = generate_task(spec);
  double n2 = 0.0, d2 = 0.0, cross = 0.0;
  for (std::size_t i = 0; i < spec.dim; ++i) {
    n2 += std::pow(task.hidden.reward_direction[i], 2);
    d2 += std::pow(task.hidden.difficulty_direction[i], 2);
    cross += task.hidden.reward_direction[i] * task.hidden.difficulty_direction[i];
  }
  EXPECT_NEAR(std::sqrt(n2), 2.5, 1e-12);
  EXPECT_NEAR(d2, 1.0, 1e-12);
  EXPECT_NEAR(cross / std::sqrt(n2), 0.6, 1e-12);
}

TEST(Generation, InvalidSpecsThrow) {
  auto s = small_spec();
  s.n_prompts = 0;
  EXPECT_THROW(generate_task(s), ArgumentError);
  s = small_spec();
  s.base_temperature = 0.0;
  EXPECT_THROW(generate_task(s), ArgumentError);
  s = small_spec();
  s.success_min = 0.9;
  s.success_max = 0.1;
  EXPECT_THROW(generate_task(s), ArgumentError);
}

TEST(Export, RecordCountsAndIds) {
  SyntheticTaskSpec spec = small_spec();
  spec.n_prompts = 100;
  spec.actions_per_prompt = 20;
  const auto task = generate_task(spec);
  const auto d = export_training_data(task, 10, 3);
  EXPECT_EQ(d.size(), 1000u);
  EXPECT_EQ(d.prompts().size(), 100u);
  EXPECT_TRUE(d.binary_rewards());
  for (const auto& p : d.prompts()) EXPECT_EQ(p.records.size(), 10u);

  testutil::TempDir dir;
  save_task(task, dir / "t.task.json");
  const auto actions = load_dataset(dir / "t.actions.jsonl");
  EXPECT_EQ(actions.size(), 2000u);
}

TEST(Export, FrequenciesFollowBasePolicy) {
  SyntheticTaskSpec spec = small_spec();
  spec.n_prompts = 2;
  const auto task = generate_task(spec);
  const auto d = export_training_data(task, 50000, 9);
  const auto& m = task.prompts[1];
  std::vector<double> counts(m.size(), 0.0);
  for (std::size_t idx : d.prompts()[1].records) {
    const auto& rec = d.reward_records()[idx];
    const auto a = static_cast<std::size_t>(std::stoul(rec.completion_id.substr(rec.completion_id.find("-a") + 2)));
    EXPECT_EQ(d.embeddings().row(rec.row).size(), task.dim());
    EXPECT_EQ(rec.reward, m.rewards[a]);
    counts[a] += 1.0;
  }
  EXPECT_GT(oracle::chi_square_p_value(counts, m.p0), 1e-3);
}

TEST(Export, PromptSamplesDoNotDependOnSubset) {
  const auto task = generate_task(small_spec());
  const std::vector<std::size_t> one = {7};
  const std::vector<std::size_t> many = {3, 7, 11};
  const auto a = export_training_data(task, 10, 4, one);
  const auto b = export_training_data(task, 10, 4, many);
  const auto& pa = a.prompts()[static_cast<std::size_t>(a.find_prompt("p7"))];
  const auto& pb = b.prompts()[static_cast<std::size_t>(b.find_prompt("p7"))];
  ASSERT_EQ(pa.records.size(), pb.records.size());
  for (std::size_t i = 0; i < pa.records.size(); ++i) {
    EXPECT_EQ(a.reward_records()[pa.records[i]].completion_id, b.reward_records()[pb.records[i]].completion_id);
  }
  EXPECT_THROW(export_training_data(task, 0, 4), ArgumentError);
}

TEST(Export, SaturatedBradleyTerryPicksHigherUtility) {
  auto spec = small_spec(RewardKind::preference_bt);
  spec.reward_scale = 1e4;
  const auto task = generate_task(spec);
  const auto d = export_training_data(task, 20, 5);
  EXPECT_TRUE(d.is_preference_dataset());
  std::size_t agree = 0;
  for (const auto& pair : d.preference_pairs()) {
    const double uw = dot(task.hidden.reward_direction, d.embedding(pair.winner_row));
    const double ul = dot(task.hidden.reward_direction, d.embedding(pair.loser_row));
    agree += uw > ul;
  }
  EXPECT_GE(static_cast<double>(agree), 0.99 * static_cast<double>(d.size()));
}

TEST(Evaluation, UniformSingleDrawMatchesExactBaseReward) {
  const auto task = generate_task(small_spec());
  EvalOptions opts;
  opts.episodes = 400;
  const auto r = evaluate_policy(Selector::uniform(), task, SamplingConfig{1, 0.1, 0}, opts, Rng(11));
  const double exact = exact_base_return(task);
  EXPECT_EQ(r.base_expected_reward, exact);
  EXPECT_NEAR(r.expected_return, exact, 3.0 * uniform_return_sigma(task, 400));
  EXPECT_LE(r.return_ci.low, r.expected_return);
  EXPECT_GE(r.return_ci.high, r.expected_return);
}

TEST(Evaluation, OracleReturnEqualsPassAtK) {
  const auto task = generate_task(small_spec());
  for (std::size_t k : {1, 4, 16}) {
    const auto r = evaluate_policy(Selector::oracle(), task, SamplingConfig{k, 0.1, 0}, EvalOptions{}, Rng(12));
    ASSERT_EQ(r.pass_at_k.size(), k);
    EXPECT_EQ(r.expected_return, r.pass_at_k.back());
  }
}

TEST(Evaluation, PassAtKIsMonotoneAndMatchesClosedForm) {
  const auto task = generate_task(small_spec());
  EvalOptions opts;
  opts.episodes = 400;
  const auto r = evaluate_policy(Selector::uniform(), task, SamplingConfig{16, 0.1, 0}, opts, Rng(13));
  for (std::size_t j = 1; j < r.pass_at_k.size(); ++j) EXPECT_GE(r.pass_at_k[j], r.pass_at_k[j - 1]);
  for (std::size_t j : {1, 4, 16}) {
    EXPECT_NEAR(r.pass_at_k[j - 1], exact_pass_at_k(task, j), 0.02) << "pass@" << j;
  }
  EXPECT_NEAR(exact_pass_at_k(task, 1), exact_base_return(task), 1e-15);
}

TEST(Evaluation, ZeroProbeActsLikeUniformSelection) {
  const auto task = generate_task(small_spec());
  const Probe zero = init_probe(ProbeKind::linear, task.dim(), {}, 0);
  for (const auto& m : task.prompts) {
    const auto pi = exact_k_policy(zero, m, 0.1, 4);
    for (std::size_t a = 0; a < m.size(); ++a) EXPECT_NEAR(pi[a], m.p0[a], 1e-12);
  }
  EvalOptions opts;
  opts.episodes = 400;
  const auto p = evaluate_policy(Selector::of(zero), task, SamplingConfig{8, 0.1, 0}, opts, Rng(14));
  const auto u = evaluate_policy(Selector::uniform(), task, SamplingConfig{8, 0.1, 0}, opts, Rng(14));
  EXPECT_NEAR(p.expected_return, u.expected_return, 4.0 * std::sqrt(2.0) * uniform_return_sigma(task, 400));
  EXPECT_EQ(p.pass_at_k, u.pass_at_k);  // same candidate draws
}

TEST(Evaluation, ThreadCountDoesNotChangeResults) {
  const auto task = generate_task(small_spec());
  Probe probe = init_probe(ProbeKind::mlp, task.dim(), {5}, 3);
  EvalOptions one;
  EvalOptions four;
  four.threads = 4;
  const auto a = evaluate_policy(Selector::of(probe), task, SamplingConfig{8, 0.1, 0}, one, Rng(15));
  const auto b = evaluate_policy(Selector::of(probe), task, SamplingConfig{8, 0.1, 0}, four, Rng(15));
  EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
  EXPECT_EQ(a.per_prompt_return, b.per_prompt_return);
}

TEST(Evaluation, RejectsBadRequests) {
  const auto cont = generate_task(small_spec(RewardKind::continuous_linear));
  EXPECT_THROW(evaluate_policy(Selector::uniform(), cont, SamplingConfig{4, 0.1, 0}, EvalOptions{}, Rng(1)),
               ArgumentError);
  EXPECT_THROW(exact_pass_at_k(cont, 2), ArgumentError);
  const auto task = generate_task(small_spec());
  const Probe wrong = init_probe(ProbeKind::linear, task.dim() + 1, {}, 0);
  EXPECT_THROW(evaluate_policy(Selector::of(wrong), task, SamplingConfig{4, 0.1, 0}, EvalOptions{}, Rng(1)),
               ArgumentError);
  EvalOptions none;
  none.episodes = 0;
  EXPECT_THROW(evaluate_policy(Selector::uniform(), task, SamplingConfig{4, 0.1, 0}, none, Rng(1)), ArgumentError);
}

TEST(Evaluation, BootstrapIntervalOfConstantIsPoint) {
  const std::vector<double> v(30, 0.4);
  const auto ci = bootstrap_mean_ci(v, 200, 0.95, Rng(1));
  EXPECT_NEAR(ci.low, 0.4, 1e-15);
  EXPECT_NEAR(ci.high, 0.4, 1e-15);
}

TEST(KSweep, UniformIsFlatAndOracleGrows) {
  const auto task = generate_task(small_spec());
  const std::vector<std::size_t> ks = {1, 2, 4, 8, 16};
  EvalOptions opts;
  opts.episodes = 200;
  const auto uni = sweep_k(Selector::uniform(), task, ks, 0.1, opts, Rng(16));
  const auto orc = sweep_k(Selector::oracle(), task, ks, 0.1, opts, Rng(16));
  ASSERT_EQ(uni.size(), ks.size());
  const double base = exact_base_return(task);
  for (std::size_t i = 0; i < ks.size(); ++i) {
    EXPECT_EQ(uni[i].k, ks[i]);
    EXPECT_NEAR(uni[i].report.expected_return, base, 4.0 * uniform_return_sigma(task, 200));
    if (i > 0) EXPECT_GE(orc[i].report.expected_return, orc[i - 1].report.expected_return);
    EXPECT_NEAR(orc[i].report.expected_return, exact_pass_at_k(task, ks[i]), 0.03);
  }
}

TEST(DataSweep, CellsReproduceDirectTrials) {
  const auto task = generate_task(small_spec());
  DataSweepConfig cfg;
  cfg.train.learning_rate = 1e-2;
  cfg.train.epochs = 5;
  cfg.train.batch_size = 50;
  cfg.train.pg_prompts_per_batch = 5;
  cfg.sampling = SamplingConfig{4, 0.1, 0};
  cfg.eval.episodes = 10;
  cfg.eval.bootstrap_resamples = 50;
  cfg.seed = 8;
  const std::vector<std::size_t> sizes = {10, 40};
  const std::vector<LossKind> losses = {LossKind::pg, LossKind::q};
  const auto cells = sweep_data(task, sizes, losses, 2, cfg);
  ASSERT_EQ(cells.size(), 4u);
  for (const auto& cell : cells) {
    ASSERT_EQ(cell.trial_returns.size(), 2u);
    for (std::size_t t = 0; t < 2; ++t) {
      const auto prompts = trial_prompts(task.prompts.size(), cell.size, cfg.seed, t);
      EXPECT_EQ(cell.trial_returns[t], train_and_evaluate(task, prompts, cell.loss, cfg, t).expected_return);
    }
    EXPECT_EQ(cell.mean_return, mean_of(cell.trial_returns));
  }
  const auto small = trial_prompts(40, 10, 8, 1);
  const auto big = trial_prompts(40, 40, 8, 1);
  EXPECT_TRUE(std::equal(small.begin(), small.end(), big.begin()));
}

TEST(DataSweep, SizesOutsideTheTaskAreRejected) {
  const auto task = generate_task(small_spec());
  DataSweepConfig cfg;
  const std::vector<LossKind> losses = {LossKind::q};
  EXPECT_THROW(sweep_data(task, std::vector<std::size_t>{0}, losses, 1, cfg), ArgumentError);
  EXPECT_THROW(sweep_data(task, std::vector<std::size_t>{41}, losses, 1, cfg), ArgumentError);
  EXPECT_THROW(sweep_data(task, std::vector<std::size_t>{10}, losses, 0, cfg), ArgumentError);
}

TEST(Correlation, AffineScoresCorrelatePerfectly) {
  const std::vector<double> expected = {0.1, 0.5, 0.3, 0.9};
  std::vector<std::vector<double>> scores;
  for (double e : expected) scores.push_back({3.0 * e - 1.0, 3.0 * e - 1.0});
  const auto c = prompt_correlation_from_scores(scores, expected);
  ASSERT_TRUE(c.correlation);
  EXPECT_NEAR(*c.correlation, 1.0, 1e-12);
  for (auto& s : scores) s = {-s[0], -s[1]};
  EXPECT_NEAR(*prompt_correlation_from_scores(scores, expected).correlation, -1.0, 1e-12);
}

TEST(Correlation, ConstantScoresAreUndefined) {
  const std::vector<double> expected = {0.1, 0.5, 0.3};
  const std::vector<std::vector<double>> scores(3, std::vector<double>{2.0, 2.0});
  EXPECT_FALSE(prompt_correlation_from_scores(scores, expected).correlation);
  const auto task = generate_task(small_spec());
  const Probe zero = init_probe(ProbeKind::linear, task.dim(), {}, 0);
  EXPECT_FALSE(prompt_correlation_diagnostic(zero, task, 5, Rng(1)).correlation);
  EXPECT_FALSE(pearson(std::vector<double>{1.0}, std::vector<double>{2.0}));
}

TEST(TaskFile, RoundTrip) {
  for (RewardKind kind : {RewardKind::binary_linear, RewardKind::continuous_linear, RewardKind::preference_bt}) {
    auto spec = small_spec(kind);
    spec.noise_scale = 0.2;
    const auto task = generate_task(spec);
    testutil::TempDir dir;
    save_task(task, dir / "x.task.json");
    const auto back = load_task(dir / "x.task.json");
    expect_same_prompts(task, back);
    EXPECT_EQ(back.hidden, task.hidden);
    EXPECT_EQ(to_json(back.spec), to_json(task.spec));
  }
}

TEST(TaskFile, BadManifestIsFormatError) {
  testutil::TempDir dir;
  testutil::write(dir / "x.task.json", "{\"hello\": 1}");
  EXPECT_THROW(load_task(dir / "x.task.json"), FormatError);
  EXPECT_EQ(task_actions_path("/a/b/name.task.json"), std::filesystem::path("/a/b/name.actions.jsonl"));
}
