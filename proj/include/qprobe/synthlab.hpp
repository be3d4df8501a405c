#pragma once

// Synthetic reranking tasks with exactly known base policies and rewards.
//
// A task has n_prompts prompts with actions_per_prompt actions each. Prompt
// x has a mean embedding mu_x ~ N(0, I); action a has offset delta_a ~
// N(0, 0.5 I) and embedding phi = mu_x + delta_a (stored as float32). The
// base policy is softmax(logits / base_temperature) with logits ~ N(0, 1).
// With a hidden reward direction w* and per-action noise eps_a:
//
//   binary-linear      r = 1 if w*.phi + offset_x + eps_a > 0 else 0
//   continuous-linear  r = w*.phi + eps_a
//   preference-bt      utility u = w*.phi + eps_a; pairs are labelled by
//                      Bradley-Terry, P(a beats b) = sigmoid(u_a - u_b); the
//                      scored reward of an action is its win probability
//                      against a fresh base-policy draw, sum_b p0(b) sigmoid(u_a - u_b)
//
// Binary offsets are chosen per prompt so the base success rate is close
// to a target between success_min and success_max. The target rises with
// the prompt mean's projection on a hidden difficulty direction whose
// cosine with w* is difficulty_alignment, so prompt difficulty is visible
// in the embeddings.
//
// Hidden parameters live in HiddenParameters. Selection code never sees
// them: selectors receive candidate embeddings or scores only.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "qprobe/data.hpp"
#include "qprobe/error.hpp"
#include "qprobe/numeric.hpp"
#include "qprobe/probe.hpp"
#include "qprobe/rng.hpp"
#include "qprobe/sampler.hpp"
#include "qprobe/trainer.hpp"

namespace qprobe {

enum class RewardKind { binary_linear, continuous_linear, preference_bt };

inline std::string to_string(RewardKind k) {
  switch (k) {
    case RewardKind::binary_linear: return "binary-linear";
    case RewardKind::continuous_linear: return "continuous-linear";
    case RewardKind::preference_bt: return "preference-bt";
  }
  return "?";
}

inline RewardKind parse_reward_kind(const std::string& s) {
  if (s == "binary-linear") return RewardKind::binary_linear;
  if (s == "continuous-linear") return RewardKind::continuous_linear;
  if (s == "preference-bt") return RewardKind::preference_bt;
  throw ArgumentError("unknown reward kind '" + s + "'");
}

struct SyntheticTaskSpec {
  std::size_t n_prompts = 100;
  std::size_t actions_per_prompt = 20;
  std::size_t dim = 16;
  RewardKind reward_kind = RewardKind::binary_linear;
  double base_temperature = 1.0;
  double noise_scale = 0.0;
  std::uint64_t hidden_direction_seed = 0;
  double reward_scale = 1.0;  // norm of w*
  double success_min = 0.05;
  double success_max = 0.8;
  double difficulty_alignment = 0.0;

  void validate() const {
    if (n_prompts == 0 || actions_per_prompt == 0 || dim == 0) {
      throw ArgumentError("prompt, action and dim counts must be positive");
    }
    if (!(base_temperature > 0.0)) throw ArgumentError("base temperature must be positive");
    if (!(noise_scale >= 0.0)) throw ArgumentError("noise scale must be non-negative");
    if (!(reward_scale > 0.0)) throw ArgumentError("reward scale must be positive");
    if (!(success_min >= 0.0 && success_min <= success_max && success_max <= 1.0)) {
      throw ArgumentError("success range must satisfy 0 <= min <= max <= 1");
    }
    if (!(difficulty_alignment >= -1.0 && difficulty_alignment <= 1.0)) {
      throw ArgumentError("difficulty alignment must lie in [-1, 1]");
    }
  }
};

inline nlohmann::json to_json(const SyntheticTaskSpec& s) {
  return {{"n_prompts", s.n_prompts},
          {"actions_per_prompt", s.actions_per_prompt},
          {"dim", s.dim},
          {"reward_kind", to_string(s.reward_kind)},
          {"base_temperature", s.base_temperature},
          {"noise_scale", s.noise_scale},
          {"hidden_direction_seed", s.hidden_direction_seed},
          {"reward_scale", s.reward_scale},
          {"success_min", s.success_min},
          {"success_max", s.success_max},
          {"difficulty_alignment", s.difficulty_alignment}};
}

inline SyntheticTaskSpec task_spec_from_json(const nlohmann::json& j) {
  SyntheticTaskSpec s;
  s.n_prompts = j.at("n_prompts").get<std::size_t>();
  s.actions_per_prompt = j.at("actions_per_prompt").get<std::size_t>();
  s.dim = j.at("dim").get<std::size_t>();
  s.reward_kind = parse_reward_kind(j.at("reward_kind").get<std::string>());
  s.base_temperature = j.at("base_temperature").get<double>();
  s.noise_scale = j.at("noise_scale").get<double>();
  s.hidden_direction_seed = j.at("hidden_direction_seed").get<std::uint64_t>();
  s.reward_scale = j.value("reward_scale", 1.0);
  s.success_min = j.value("success_min", 0.05);
  s.success_max = j.value("success_max", 0.8);
  s.difficulty_alignment = j.value("difficulty_alignment", 0.0);
  return s;
}

/// Oracle-only generation parameters.
struct HiddenParameters {
  std::vector<double> reward_direction;      // w*
  std::vector<double> difficulty_direction;  // unit vector
  std::vector<double> prompt_offsets;        // binary threshold offsets (0 otherwise)
  std::vector<double> target_success;        // binary target base success rate
  std::vector<std::vector<double>> noise;    // eps per prompt and action
  std::vector<std::vector<double>> utility;  // preference-bt latent utilities

  friend bool operator==(const HiddenParameters&, const HiddenParameters&) = default;
};

struct SyntheticTask {
  SyntheticTaskSpec spec;
  std::vector<std::string> prompt_ids;
  std::vector<FiniteBaseModel> prompts;  // p0, embeddings and true rewards per prompt
  HiddenParameters hidden;

  bool binary() const { return spec.reward_kind == RewardKind::binary_linear; }
  std::size_t dim() const { return spec.dim; }
};

inline double standard_normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

inline double dot(std::span<const double> w, Embedding x) {
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * static_cast<double>(x[i]);
  return s;
}

/// Expected reward of a single base-policy draw: sum_a p0(a) r(a).
inline double expected_base_reward(const FiniteBaseModel& m) {
  double s = 0.0;
  for (std::size_t a = 0; a < m.size(); ++a) s += m.p0[a] * m.rewards[a];
  return s;
}

inline SyntheticTask generate_task(const SyntheticTaskSpec& spec) {
  spec.validate();
  const std::size_t d = spec.dim;
  const std::size_t n = spec.actions_per_prompt;
  const Rng root(spec.hidden_direction_seed);
  SyntheticTask task;
  task.spec = spec;
  auto& h = task.hidden;

  Rng dir_rng = root.derive("reward_direction");
  h.reward_direction.resize(d);
  double norm = 0.0;
  for (double& v : h.reward_direction) {
    v = dir_rng.normal();
    norm += v * v;
  }
  norm = std::sqrt(norm);
  for (double& v : h.reward_direction) v *= spec.reward_scale / norm;

  // Difficulty direction: alignment * w_hat + sqrt(1 - alignment^2) * (unit vector orthogonal to w*).
  Rng diff_rng = root.derive("difficulty_direction");
  std::vector<double> u(d);
  for (double& v : u) v = diff_rng.normal();
  std::vector<double> w_hat(d);
  for (std::size_t i = 0; i < d; ++i) w_hat[i] = h.reward_direction[i] / spec.reward_scale;
  double proj = 0.0;
  for (std::size_t i = 0; i < d; ++i) proj += u[i] * w_hat[i];
  double un = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    u[i] -= proj * w_hat[i];
    un += u[i] * u[i];
  }
  un = std::sqrt(un);
  const double a = spec.difficulty_alignment;
  const double b = std::sqrt(std::max(0.0, 1.0 - a * a));
  h.difficulty_direction.resize(d);
  for (std::size_t i = 0; i < d; ++i) {
    h.difficulty_direction[i] = a * w_hat[i] + (un > 0.0 ? b * u[i] / un : 0.0);
  }

  const double offset_sd = std::sqrt(0.5);
  for (std::size_t x = 0; x < spec.n_prompts; ++x) {
    Rng r = root.derive("prompt", x);
    std::vector<double> mu(d);
    for (double& v : mu) v = r.normal();
    FiniteBaseModel m;
    m.embeddings = EmbeddingTable(d);
    std::vector<float> phi(d);
    for (std::size_t act = 0; act < n; ++act) {
      for (std::size_t i = 0; i < d; ++i) phi[i] = static_cast<float>(mu[i] + offset_sd * r.normal());
      m.embeddings.append(phi);
    }
    std::vector<double> logits(n);
    for (double& l : logits) l = r.normal() / spec.base_temperature;
    m.p0 = softmax(logits);
    std::vector<double> eps(n);
    for (double& e : eps) e = spec.noise_scale * r.normal();

    std::vector<double> score(n);
    for (std::size_t act = 0; act < n; ++act) {
      score[act] = dot(h.reward_direction, m.embeddings.row(act)) + eps[act];
    }

    double offset = 0.0;
    double target = 0.0;
    m.rewards.assign(n, 0.0);
    switch (spec.reward_kind) {
      case RewardKind::binary_linear: {
        double mu_proj = 0.0;
        for (std::size_t i = 0; i < d; ++i) mu_proj += h.difficulty_direction[i] * mu[i];
        target = spec.success_min + (spec.success_max - spec.success_min) * standard_normal_cdf(mu_proj);
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t i, std::size_t j) { return score[i] > score[j]; });
        if (n == 1) {
          offset = 0.0;
        } else {
          // Top m actions succeed; pick m in [1, n-1] whose success mass is nearest the target.
          double cum = 0.0;
          double best_gap = std::numeric_limits<double>::infinity();
          std::size_t best_m = 1;
          for (std::size_t top = 1; top < n; ++top) {
            cum += m.p0[order[top - 1]];
            if (std::abs(cum - target) < best_gap) {
              best_gap = std::abs(cum - target);
              best_m = top;
            }
          }
          offset = -0.5 * (score[order[best_m - 1]] + score[order[best_m]]);
        }
        for (std::size_t act = 0; act < n; ++act) m.rewards[act] = score[act] + offset > 0.0 ? 1.0 : 0.0;
        break;
      }
      case RewardKind::continuous_linear:
        m.rewards = score;
        break;
      case RewardKind::preference_bt:
        for (std::size_t act = 0; act < n; ++act) {
          double win = 0.0;
          for (std::size_t other = 0; other < n; ++other) win += m.p0[other] * sigmoid(score[act] - score[other]);
          m.rewards[act] = win;
        }
        h.utility.push_back(score);
        break;
    }
    h.prompt_offsets.push_back(offset);
    h.target_success.push_back(target);
    h.noise.push_back(std::move(eps));
    task.prompt_ids.push_back("p" + std::to_string(x));
    task.prompts.push_back(std::move(m));
  }
  return task;
}

/// Offline training data drawn from the base policy. Reward tasks yield
/// `samples_per_prompt` i.i.d. completions per prompt labelled with their
/// true reward; preference tasks yield `samples_per_prompt` labelled pairs
/// per prompt (two i.i.d. draws of distinct actions, winner chosen by
/// Bradley-Terry). Prompt x draws from Rng(seed).derive("export", x), so a
/// prompt's samples do not depend on which other prompts are exported.
inline Dataset export_training_data(const SyntheticTask& task, std::size_t samples_per_prompt,
                                    std::uint64_t seed,
                                    std::optional<std::span<const std::size_t>> prompt_subset = std::nullopt) {
  if (samples_per_prompt < 1) throw ArgumentError("samples per prompt must be at least 1");
  std::vector<std::size_t> prompts;
  if (prompt_subset) {
    prompts.assign(prompt_subset->begin(), prompt_subset->end());
  } else {
    prompts.resize(task.prompts.size());
    std::iota(prompts.begin(), prompts.end(), 0);
  }
  Dataset out(task.dim(), task.binary());
  const Rng root(seed);
  const bool pref = task.spec.reward_kind == RewardKind::preference_bt;
  for (std::size_t x : prompts) {
    if (x >= task.prompts.size()) throw ArgumentError("prompt index out of range");
    const auto& m = task.prompts[x];
    const CategoricalSampler draw(m.p0);
    Rng r = root.derive("export", x);
    std::size_t support = 0;
    for (double p : m.p0) support += p > 0.0 ? 1 : 0;
    for (std::size_t s = 0; s < samples_per_prompt; ++s) {
      const std::size_t a = draw(r);
      if (!pref) {
        out.add_reward_record(task.prompt_ids[x], "s" + std::to_string(s) + "-a" + std::to_string(a),
                              m.embeddings.row(a), m.rewards[a]);
        continue;
      }
      std::size_t b = draw(r);
      while (b == a && support > 1) b = draw(r);
      const auto& u = task.hidden.utility[x];
      const bool a_wins = r.uniform() < sigmoid(u[a] - u[b]);
      const std::size_t w = a_wins ? a : b;
      const std::size_t l = a_wins ? b : a;
      out.add_preference_pair(task.prompt_ids[x], m.embeddings.row(w), m.embeddings.row(l));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

enum class SelectorKind { probe, uniform, oracle };

/// How one of k candidates is chosen. The oracle reads true rewards and
/// serves only as the pass@k skyline.
struct Selector {
  SelectorKind kind = SelectorKind::uniform;
  const Probe* probe = nullptr;

  static Selector uniform() { return {SelectorKind::uniform, nullptr}; }
  static Selector oracle() { return {SelectorKind::oracle, nullptr}; }
  static Selector of(const Probe& p) { return {SelectorKind::probe, &p}; }

  std::string name() const {
    switch (kind) {
      case SelectorKind::probe: return "probe";
      case SelectorKind::uniform: return "uniform";
      case SelectorKind::oracle: return "oracle";
    }
    return "?";
  }
};

struct EvalOptions {
  std::size_t episodes = 100;
  bool pass_at_k = true;  // only valid on binary tasks
  std::size_t bootstrap_resamples = 1000;
  double ci_level = 0.95;
  std::size_t threads = 1;
};

struct ConfidenceInterval {
  double low = 0.0;
  double high = 0.0;
};

struct EvalReport {
  std::string selector;
  std::size_t k = 0;
  double beta = 0.0;
  std::size_t episodes = 0;
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;
  double expected_return = 0.0;
  ConfidenceInterval return_ci;
  std::vector<double> pass_at_k;  // pass_at_k[j - 1] = pass@j, j = 1..k, same draws as the selector
  std::vector<double> per_prompt_return;
  double base_expected_reward = 0.0;  // exact E_x E_p0[r]
};

/// Percentile bootstrap CI of the mean of `values`.
inline ConfidenceInterval bootstrap_mean_ci(std::span<const double> values, std::size_t resamples,
                                            double level, Rng rng) {
  if (values.empty() || resamples == 0) return {};
  std::vector<double> means(resamples);
  for (auto& mean : means) {
    double s = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) s += values[rng.index(values.size())];
    mean = s / static_cast<double>(values.size());
  }
  std::sort(means.begin(), means.end());
  const double tail = 0.5 * (1.0 - level);
  const auto at = [&](double q) {
    return means[static_cast<std::size_t>(std::llround(q * static_cast<double>(resamples - 1)))];
  };
  return {at(tail), at(1.0 - tail)};
}

inline double mean_of(std::span<const double> v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

/// Exact E_x E_p0[r], averaged over prompts.
inline double exact_base_return(const SyntheticTask& task) {
  double s = 0.0;
  for (const auto& m : task.prompts) s += expected_base_reward(m);
  return s / static_cast<double>(task.prompts.size());
}

/// Exact pass@k averaged over prompts: 1 - P(all k draws fail).
inline double exact_pass_at_k(const SyntheticTask& task, std::size_t k) {
  if (!task.binary()) throw ArgumentError("pass@k is defined for binary rewards only");
  double s = 0.0;
  for (const auto& m : task.prompts) {
    s += 1.0 - std::pow(1.0 - expected_base_reward(m), static_cast<double>(k));
  }
  return s / static_cast<double>(task.prompts.size());
}

namespace detail {

template <typename Fn>
void for_each_index(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      for (std::size_t i = t; i < n; i += threads) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace detail

/// Draws k candidates per prompt and episode from p0, lets the selector
/// choose one and scores it with the true reward. Candidate draws come from
/// rng.derive("candidates", episode).derive(prompt) and selection randomness
/// from rng.derive("select", episode).derive(prompt), so different
/// selectors (and different k) see the same candidates. Results do not
/// depend on the thread count.
inline EvalReport evaluate_policy(const Selector& selector, const SyntheticTask& task,
                                  const SamplingConfig& config, const EvalOptions& options, const Rng& rng) {
  config.validate();
  if (options.episodes < 1) throw ArgumentError("episodes must be at least 1");
  if (options.pass_at_k && !task.binary()) {
    throw ArgumentError("pass@k requested on a task with non-binary rewards");
  }
  if (selector.kind == SelectorKind::probe) {
    if (selector.probe == nullptr) throw ArgumentError("probe selector without a probe");
    if (selector.probe->dim() != task.dim()) {
      throw ArgumentError("probe dim " + std::to_string(selector.probe->dim()) + " does not match task dim " +
                          std::to_string(task.dim()));
    }
  }
  const std::size_t n_prompts = task.prompts.size();
  const std::size_t k = config.k;
  std::vector<double> prompt_return(n_prompts, 0.0);
  std::vector<std::vector<double>> prompt_pass(n_prompts, std::vector<double>(options.pass_at_k ? k : 0, 0.0));
  std::vector<CategoricalSampler> samplers;
  samplers.reserve(n_prompts);
  for (const auto& m : task.prompts) samplers.emplace_back(m.p0);

  detail::for_each_index(n_prompts, options.threads, [&](std::size_t x) {
    const auto& m = task.prompts[x];
    std::vector<std::size_t> cand(k);
    std::vector<double> q(k);
    for (std::size_t e = 0; e < options.episodes; ++e) {
      Rng cand_rng = rng.derive("candidates", e).derive(x);
      Rng sel_rng = rng.derive("select", e).derive(x);
      for (std::size_t i = 0; i < k; ++i) cand[i] = samplers[x](cand_rng);
      std::size_t chosen = 0;
      switch (selector.kind) {
        case SelectorKind::probe:
          for (std::size_t i = 0; i < k; ++i) q[i] = probe_forward(*selector.probe, m.embeddings.row(cand[i]));
          chosen = select_scores(q, config.beta, sel_rng).index;
          break;
        case SelectorKind::uniform:
          chosen = sel_rng.index(k);
          break;
        case SelectorKind::oracle:
          for (std::size_t i = 1; i < k; ++i) {
            if (m.rewards[cand[i]] > m.rewards[cand[chosen]]) chosen = i;
          }
          break;
      }
      prompt_return[x] += m.rewards[cand[chosen]];
      if (options.pass_at_k) {
        bool any = false;
        for (std::size_t j = 0; j < k; ++j) {
          any = any || m.rewards[cand[j]] > 0.0;
          if (any) prompt_pass[x][j] += 1.0;
        }
      }
    }
  });

  EvalReport r;
  r.selector = selector.name();
  r.k = k;
  r.beta = config.beta;
  r.episodes = options.episodes;
  r.seed = rng.seed();
  r.stream = rng.stream();
  const double inv_e = 1.0 / static_cast<double>(options.episodes);
  for (double& v : prompt_return) v *= inv_e;
  r.per_prompt_return = prompt_return;
  r.expected_return = mean_of(prompt_return);
  r.return_ci = bootstrap_mean_ci(prompt_return, options.bootstrap_resamples, options.ci_level,
                                  rng.derive("bootstrap"));
  if (options.pass_at_k) {
    r.pass_at_k.assign(k, 0.0);
    for (std::size_t x = 0; x < n_prompts; ++x) {
      for (std::size_t j = 0; j < k; ++j) r.pass_at_k[j] += prompt_pass[x][j] * inv_e;
    }
    for (double& v : r.pass_at_k) v /= static_cast<double>(n_prompts);
  }
  r.base_expected_reward = exact_base_return(task);
  return r;
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j = {{"selector", r.selector},
                      {"k", r.k},
                      {"beta", r.beta},
                      {"episodes", r.episodes},
                      {"seed", r.seed},
                      {"stream", r.stream},
                      {"expected_return", r.expected_return},
                      {"return_ci", {r.return_ci.low, r.return_ci.high}},
                      {"base_expected_reward", r.base_expected_reward}};
  j["pass_at_k"] = r.pass_at_k;
  return j;
}

struct SweepPoint {
  std::size_t k = 0;
  EvalReport report;
};

/// evaluate_policy at every k in the schedule with the same rng, so
/// candidate sets are nested across k.
inline std::vector<SweepPoint> sweep_k(const Selector& selector, const SyntheticTask& task,
                                       std::span<const std::size_t> k_schedule, double beta,
                                       const EvalOptions& options, const Rng& rng) {
  std::vector<SweepPoint> out;
  for (std::size_t k : k_schedule) {
    SamplingConfig cfg{k, beta, rng.seed()};
    out.push_back({k, evaluate_policy(selector, task, cfg, options, rng)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Data-size sweep
// ---------------------------------------------------------------------------

struct DataSweepConfig {
  TrainConfig train;  // loss is overridden per cell
  ProbeKind probe_kind = ProbeKind::linear;
  std::vector<std::size_t> hidden_sizes;
  std::size_t samples_per_prompt = 10;
  SamplingConfig sampling;
  EvalOptions eval;
  std::uint64_t seed = 0;
};

inline std::uint64_t trial_seed(std::uint64_t seed, std::size_t trial) {
  return splitmix64(seed + 0x9e3779b97f4a7c15ULL * (trial + 1));
}

/// Trial `trial` of one sweep cell: export data for the given prompts,
/// train a fresh probe, evaluate it on every prompt of the task.
/// Export and training use trial_seed(seed, trial); evaluation uses
/// Rng(seed).derive("eval") for every cell.
inline EvalReport train_and_evaluate(const SyntheticTask& task, std::span<const std::size_t> prompts,
                                     LossKind loss, const DataSweepConfig& cfg, std::size_t trial) {
  const std::uint64_t ts = trial_seed(cfg.seed, trial);
  const Dataset data = export_training_data(task, cfg.samples_per_prompt, ts, prompts);
  TrainConfig tc = cfg.train;
  tc.loss = loss;
  tc.seed = ts;
  const Probe init = init_probe(cfg.probe_kind, task.dim(), cfg.hidden_sizes, ts);
  const auto [probe, report] = train(data, init, tc);
  return evaluate_policy(Selector::of(probe), task, cfg.sampling, cfg.eval, Rng(cfg.seed).derive("eval"));
}

/// Prompt subsample for a trial: the first `size` entries of a seeded
/// permutation, so subsets are nested across sizes.
inline std::vector<std::size_t> trial_prompts(std::size_t n_prompts, std::size_t size, std::uint64_t seed,
                                              std::size_t trial) {
  if (size > n_prompts) {
    throw ArgumentError("sweep size " + std::to_string(size) + " exceeds the task's " +
                        std::to_string(n_prompts) + " prompts");
  }
  std::vector<std::size_t> order(n_prompts);
  std::iota(order.begin(), order.end(), 0);
  Rng(seed).derive("subsample", trial).shuffle(order);
  order.resize(size);
  return order;
}

struct DataSweepCell {
  std::size_t size = 0;
  LossKind loss = LossKind::q;
  std::vector<double> trial_returns;
  double mean_return = 0.0;
  ConfidenceInterval ci;
};

inline std::vector<DataSweepCell> sweep_data(const SyntheticTask& task, std::span<const std::size_t> sizes,
                                             std::span<const LossKind> losses, std::size_t trials,
                                             const DataSweepConfig& cfg) {
  if (trials == 0) throw ArgumentError("sweep needs at least one trial");
  for (std::size_t s : sizes) {
    if (s == 0 || s > task.prompts.size()) {
      throw ArgumentError("sweep size " + std::to_string(s) + " is outside [1, " +
                          std::to_string(task.prompts.size()) + "]");
    }
  }
  std::vector<DataSweepCell> cells;
  for (std::size_t size : sizes) {
    for (LossKind loss : losses) {
      DataSweepCell cell{size, loss, {}, 0.0, {}};
      for (std::size_t t = 0; t < trials; ++t) {
        const auto prompts = trial_prompts(task.prompts.size(), size, cfg.seed, t);
        cell.trial_returns.push_back(train_and_evaluate(task, prompts, loss, cfg, t).expected_return);
      }
      cell.mean_return = mean_of(cell.trial_returns);
      cell.ci = bootstrap_mean_ci(cell.trial_returns, cfg.eval.bootstrap_resamples, cfg.eval.ci_level,
                                  Rng(cfg.seed).derive("sweep_ci", size));
      cells.push_back(std::move(cell));
    }
  }
  return cells;
}

// ---------------------------------------------------------------------------
// Per-prompt correlation diagnostic
// ---------------------------------------------------------------------------

struct PromptCorrelation {
  std::vector<double> expected_reward;  // per prompt, exact under p0
  std::vector<double> mean_score;       // per prompt, globally standardized
  std::optional<double> correlation;    // Pearson; empty when undefined
};

inline std::optional<double> pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) return std::nullopt;
  const double mx = mean_of(x);
  const double my = mean_of(y);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (!(sxx > 0.0) || !(syy > 0.0)) return std::nullopt;
  return sxy / std::sqrt(sxx * syy);
}

/// Standardizes all scores with the global mean and standard deviation,
/// averages them per prompt and correlates with the per-prompt expected
/// reward. Zero score variance leaves the correlation undefined.
inline PromptCorrelation prompt_correlation_from_scores(const std::vector<std::vector<double>>& scores,
                                                        std::span<const double> expected_reward) {
  PromptCorrelation out;
  out.expected_reward.assign(expected_reward.begin(), expected_reward.end());
  double sum = 0.0;
  std::size_t count = 0;
  for (const auto& s : scores) {
    for (double v : s) {
      sum += v;
      ++count;
    }
  }
  const double mean = count ? sum / static_cast<double>(count) : 0.0;
  double var = 0.0;
  for (const auto& s : scores) {
    for (double v : s) var += (v - mean) * (v - mean);
  }
  const double sd = count > 1 ? std::sqrt(var / static_cast<double>(count - 1)) : 0.0;
  out.mean_score.assign(scores.size(), 0.0);
  if (!(sd > 0.0)) return out;
  for (std::size_t x = 0; x < scores.size(); ++x) {
    double s = 0.0;
    for (double v : scores[x]) s += (v - mean) / sd;
    out.mean_score[x] = scores[x].empty() ? 0.0 : s / static_cast<double>(scores[x].size());
  }
  out.correlation = pearson(out.mean_score, out.expected_reward);
  return out;
}

inline PromptCorrelation prompt_correlation_diagnostic(const Probe& probe, const SyntheticTask& task,
                                                       std::size_t samples_per_prompt, const Rng& rng) {
  if (samples_per_prompt < 2) throw ArgumentError("correlation diagnostic needs at least 2 samples per prompt");
  std::vector<std::vector<double>> scores(task.prompts.size());
  std::vector<double> expected(task.prompts.size());
  for (std::size_t x = 0; x < task.prompts.size(); ++x) {
    const auto& m = task.prompts[x];
    const CategoricalSampler draw(m.p0);
    Rng r = rng.derive("diagnostic", x);
    for (std::size_t s = 0; s < samples_per_prompt; ++s) {
      scores[x].push_back(probe_forward(probe, m.embeddings.row(draw(r))));
    }
    expected[x] = expected_base_reward(m);
  }
  return prompt_correlation_from_scores(scores, expected);
}

// ---------------------------------------------------------------------------
// Random finite instances for checking the limit and optimality results
// ---------------------------------------------------------------------------

struct FiniteInstance {
  FiniteBaseModel base;
  Probe probe;
  std::vector<double> scores;  // probe scores, clipped to [-clip, clip]
};

/// n actions with N(0, I) embeddings, p0 = softmax of N(0, 1) logits, and a
/// linear probe with N(0, 1/dim) weights and zero bias. A constant probe
/// (all parameters zero) is used when `constant_probe` is set.
inline FiniteInstance random_finite_instance(std::size_t n_actions, std::size_t dim, std::uint64_t seed,
                                             double clip = 1.0, bool constant_probe = false) {
  if (n_actions == 0 || dim == 0) throw ArgumentError("instance needs actions and a positive dim");
  if (!(clip > 0.0)) throw ArgumentError("score clip must be positive");
  Rng r = Rng(seed).derive("finite_instance");
  FiniteInstance inst;
  inst.base.embeddings = EmbeddingTable(dim);
  std::vector<float> phi(dim);
  for (std::size_t a = 0; a < n_actions; ++a) {
    for (float& v : phi) v = static_cast<float>(r.normal());
    inst.base.embeddings.append(phi);
  }
  std::vector<double> logits(n_actions);
  for (double& l : logits) l = r.normal();
  inst.base.p0 = softmax(logits);
  inst.probe = Probe(ProbeKind::linear, dim, {});
  if (!constant_probe) {
    const double sd = 1.0 / std::sqrt(static_cast<double>(dim));
    for (std::size_t i = 0; i < dim; ++i) inst.probe.params()[i] = sd * r.normal();
  }
  inst.scores = score_actions(inst.probe, inst.base);
  for (double& q : inst.scores) q = std::clamp(q, -clip, clip);
  return inst;
}

// ---------------------------------------------------------------------------
// Task files: <stem>.task.json plus an action dataset <stem>.actions.jsonl
// (one reward record per action, completion ids "a<index>").
// ---------------------------------------------------------------------------

inline std::filesystem::path task_actions_path(const std::filesystem::path& task_json) {
  auto name = task_json.filename().string();
  const std::string suffix = ".task.json";
  if (name.size() > suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0) {
    name.resize(name.size() - suffix.size());
  }
  return task_json.parent_path() / (name + ".actions.jsonl");
}

inline void save_task(const SyntheticTask& task, const std::filesystem::path& task_json) {
  Dataset actions(task.dim(), task.binary());
  nlohmann::json prompts = nlohmann::json::array();
  for (std::size_t x = 0; x < task.prompts.size(); ++x) {
    const auto& m = task.prompts[x];
    for (std::size_t a = 0; a < m.size(); ++a) {
      actions.add_reward_record(task.prompt_ids[x], "a" + std::to_string(a), m.embeddings.row(a), m.rewards[a]);
    }
    prompts.push_back({{"prompt_id", task.prompt_ids[x]}, {"p0", m.p0}});
  }
  const auto actions_path = task_actions_path(task_json);
  save_dataset(actions, actions_path);
  const auto& h = task.hidden;
  nlohmann::json j = {{"qprobe_task", 1},
                      {"spec", to_json(task.spec)},
                      {"actions", actions_path.filename().string()},
                      {"prompts", prompts},
                      {"oracle_only",
                       {{"note", "hidden generation parameters; never read by selection code"},
                        {"reward_direction", h.reward_direction},
                        {"difficulty_direction", h.difficulty_direction},
                        {"prompt_offsets", h.prompt_offsets},
                        {"target_success", h.target_success},
                        {"noise", h.noise},
                        {"utility", h.utility}}}};
  detail::write_file(task_json, j.dump(1) + '\n');
}

inline SyntheticTask load_task(const std::filesystem::path& task_json) {
  const auto text = detail::read_file(task_json);
  const auto j = nlohmann::json::parse(text, nullptr, false);
  if (j.is_discarded() || !j.is_object() || !j.contains("qprobe_task")) {
    throw FormatError("task file " + task_json.string() + " is not a task manifest");
  }
  try {
    if (j.at("qprobe_task") != 1) throw FormatError("unsupported task format version");
    SyntheticTask task;
    task.spec = task_spec_from_json(j.at("spec"));
    const Dataset actions = load_dataset(task_json.parent_path() / j.at("actions").get<std::string>(),
                                         [](const std::string&) {});
    if (actions.dim() != task.spec.dim) throw SchemaError("task dim does not match its action file");
    for (const auto& p : j.at("prompts")) {
      const auto id = p.at("prompt_id").get<std::string>();
      const auto pos = actions.find_prompt(id);
      if (pos < 0) throw SchemaError("prompt '" + id + "' has no actions");
      FiniteBaseModel m;
      m.p0 = p.at("p0").get<std::vector<double>>();
      m.embeddings = EmbeddingTable(task.spec.dim);
      for (std::size_t idx : actions.prompts()[static_cast<std::size_t>(pos)].records) {
        const auto& rec = actions.reward_records()[idx];
        m.embeddings.append(actions.embedding(rec.row));
        m.rewards.push_back(rec.reward);
      }
      m.validate();
      task.prompt_ids.push_back(id);
      task.prompts.push_back(std::move(m));
    }
    const auto& h = j.at("oracle_only");
    task.hidden.reward_direction = h.at("reward_direction").get<std::vector<double>>();
    task.hidden.difficulty_direction = h.at("difficulty_direction").get<std::vector<double>>();
    task.hidden.prompt_offsets = h.at("prompt_offsets").get<std::vector<double>>();
    task.hidden.target_success = h.at("target_success").get<std::vector<double>>();
    task.hidden.noise = h.at("noise").get<std::vector<std::vector<double>>>();
    task.hidden.utility = h.at("utility").get<std::vector<std::vector<double>>>();
    return task;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("task file: ") + e.what());
  }
}

}  // namespace qprobe
