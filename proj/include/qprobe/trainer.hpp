#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "qprobe/data.hpp"
#include "qprobe/error.hpp"
#include "qprobe/losses.hpp"
#include "qprobe/probe.hpp"
#include "qprobe/rng.hpp"

namespace qprobe {

enum class LossKind { q, ce, pg, qp, dpo };

inline std::string to_string(LossKind k) {
  switch (k) {
    case LossKind::q: return "q";
    case LossKind::ce: return "ce";
    case LossKind::pg: return "pg";
    case LossKind::qp: return "qp";
    case LossKind::dpo: return "dpo";
  }
  return "?";
}

inline LossKind parse_loss_kind(const std::string& s) {
  if (s == "q") return LossKind::q;
  if (s == "ce") return LossKind::ce;
  if (s == "pg") return LossKind::pg;
  if (s == "qp") return LossKind::qp;
  if (s == "dpo") return LossKind::dpo;
  throw ArgumentError("unknown loss '" + s + "' (expected q, ce, pg, qp or dpo)");
}

inline bool uses_preferences(LossKind k) { return k == LossKind::qp || k == LossKind::dpo; }

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct TrainConfig {
  LossKind loss = LossKind::q;
  double learning_rate = 5e-5;
  std::size_t batch_size = 1000;
  std::size_t epochs = 150;
  std::size_t pg_group_size = 10;
  std::size_t pg_prompts_per_batch = 100;
  double beta = 0.1;
  std::uint64_t seed = 0;
  AdamConfig adam;
  std::optional<double> baseline;  // PG baseline; default is the dataset mean reward
  double dpo_alpha = 1.0;
  std::size_t dpo_context_size = 2;
  bool freeze_pg_groups = false;  // reuse epoch-0 group membership in every epoch

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
    if (batch_size == 0) throw ConfigError("batch size must be positive");
    if (pg_group_size == 0 || pg_prompts_per_batch == 0) {
      throw ConfigError("PG group size and prompts per batch must be positive");
    }
    if (!(beta > 0.0)) throw ConfigError("beta must be positive");
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0 &&
          adam.epsilon > 0.0)) {
      throw ConfigError("invalid Adam constants");
    }
    if (loss == LossKind::pg) {
      if (pg_group_size < 2) throw ConfigError("PG group size must be at least 2");
      if (batch_size != pg_group_size * pg_prompts_per_batch) {
        throw ConfigError("PG batch size " + std::to_string(batch_size) + " must equal group size " +
                          std::to_string(pg_group_size) + " x prompts per batch " +
                          std::to_string(pg_prompts_per_batch));
      }
    }
    if (loss == LossKind::dpo) {
      if (!(dpo_alpha > 0.0)) throw ConfigError("DPO alpha must be positive");
      if (dpo_context_size < 2) throw ConfigError("DPO context size must be at least 2");
    }
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json j = {{"loss", to_string(c.loss)},
                      {"learning_rate", c.learning_rate},
                      {"batch_size", c.batch_size},
                      {"epochs", c.epochs},
                      {"pg_group_size", c.pg_group_size},
                      {"pg_prompts_per_batch", c.pg_prompts_per_batch},
                      {"beta", c.beta},
                      {"seed", c.seed},
                      {"adam", {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"epsilon", c.adam.epsilon}}},
                      {"dpo_alpha", c.dpo_alpha},
                      {"dpo_context_size", c.dpo_context_size},
                      {"freeze_pg_groups", c.freeze_pg_groups}};
  j["baseline"] = c.baseline ? nlohmann::json(*c.baseline) : nlohmann::json(nullptr);
  return j;
}

struct TrainReport {
  std::vector<double> epoch_loss;  // mean batch loss per epoch, before each update
  std::size_t steps = 0;
  double wall_seconds = 0.0;
  std::uint64_t seed = 0;
  std::optional<double> baseline;  // PG only
  TrainConfig config;
};

/// JSON form of a report. Wall time is omitted unless requested so that
/// reruns write identical bytes.
inline nlohmann::json to_json(const TrainReport& r, bool include_timing = false) {
  nlohmann::json j = {{"epochs", r.epoch_loss.size()},
                      {"epoch_loss", r.epoch_loss},
                      {"steps", r.steps},
                      {"seed", r.seed},
                      {"config", to_json(r.config)}};
  j["baseline"] = r.baseline ? nlohmann::json(*r.baseline) : nlohmann::json(nullptr);
  if (include_timing) j["wall_seconds"] = r.wall_seconds;
  return j;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;

  AdamState() = default;
  explicit AdamState(std::size_t n) : m(n, 0.0), v(n, 0.0) {}
};

/// One bias-corrected Adam update, in place.
inline void adam_step(std::span<double> params, std::span<const double> grad, AdamState& state,
                      double learning_rate, double beta1, double beta2, double epsilon) {
  if (grad.size() != params.size() || state.m.size() != params.size() ||
      state.v.size() != params.size()) {
    throw InternalError("adam_step: parameter, gradient and state shapes differ");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(beta1, t);
  const double c2 = 1.0 - std::pow(beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * grad[i];
    state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * grad[i] * grad[i];
    const double m_hat = state.m[i] / c1;
    const double v_hat = state.v[i] / c2;
    params[i] -= learning_rate * m_hat / (std::sqrt(v_hat) + epsilon);
  }
}

inline void adam_step(std::span<double> params, std::span<const double> grad, AdamState& state,
                      double learning_rate, const AdamConfig& c = {}) {
  adam_step(params, grad, state, learning_rate, c.beta1, c.beta2, c.epsilon);
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// Prompt-grouped batches for the PG loss. Each prompt's records are
/// shuffled and cut into groups of `group_size` (a remainder is dropped);
/// the groups are shuffled and cut into batches of `prompts_per_batch`
/// groups, dropping a partial last batch. When fewer than
/// `prompts_per_batch` groups exist, one batch holds all of them.
/// Group membership is redrawn every epoch unless `freeze_groups` is set;
/// batch order is always redrawn.
inline std::vector<std::vector<PromptGroup>> make_pg_batches(const Dataset& dataset,
                                                              std::size_t group_size,
                                                              std::size_t prompts_per_batch,
                                                              std::uint64_t seed, std::size_t epoch,
                                                              bool freeze_groups = false) {
  if (group_size == 0 || prompts_per_batch == 0) {
    throw ArgumentError("group size and prompts per batch must be positive");
  }
  if (!dataset.is_reward_dataset()) {
    throw ConfigError("PG batching needs reward records");
  }
  const Rng root(seed);
  const Rng membership = root.derive("pg_groups", freeze_groups ? 0 : epoch);
  std::vector<PromptGroup> groups;
  const auto& prompts = dataset.prompts();
  for (std::size_t pi = 0; pi < prompts.size(); ++pi) {
    const auto& entry = prompts[pi];
    if (entry.records.size() < group_size) {
      throw ConfigError("prompt '" + entry.prompt_id + "' has " +
                        std::to_string(entry.records.size()) + " completions, PG groups need " +
                        std::to_string(group_size));
    }
    std::vector<std::size_t> idx = entry.records;
    Rng r = membership.derive(pi);
    r.shuffle(idx);
    for (std::size_t start = 0; start + group_size <= idx.size(); start += group_size) {
      PromptGroup g{entry.prompt_id, {}};
      g.records.reserve(group_size);
      for (std::size_t k = start; k < start + group_size; ++k) {
        const auto& rec = dataset.reward_records()[idx[k]];
        g.records.push_back({dataset.embedding(rec.row), rec.reward});
      }
      groups.push_back(std::move(g));
    }
  }
  Rng order = root.derive("pg_batch_order", epoch);
  order.shuffle(groups);

  std::vector<std::vector<PromptGroup>> batches;
  if (groups.size() < prompts_per_batch) {
    if (!groups.empty()) batches.push_back(std::move(groups));
    return batches;
  }
  for (std::size_t start = 0; start + prompts_per_batch <= groups.size(); start += prompts_per_batch) {
    batches.emplace_back(std::make_move_iterator(groups.begin() + static_cast<std::ptrdiff_t>(start)),
                         std::make_move_iterator(groups.begin() +
                                                 static_cast<std::ptrdiff_t>(start + prompts_per_batch)));
  }
  return batches;
}

namespace detail {

// Shuffled index batches over [0, n); partial last batch dropped, but a
// dataset smaller than one batch becomes a single batch.
inline std::vector<std::vector<std::size_t>> index_batches(std::size_t n, std::size_t batch_size,
                                                           Rng rng) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order);
  const std::size_t b = std::min(batch_size, n);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; b > 0 && start + b <= n; start += b) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(start + b));
  }
  return out;
}

// Rows of every pair that shares a prompt, for drawing DPO context samples.
inline std::vector<std::vector<std::size_t>> rows_by_prompt(const Dataset& d) {
  std::vector<std::vector<std::size_t>> rows(d.prompts().size());
  for (std::size_t pi = 0; pi < d.prompts().size(); ++pi) {
    for (std::size_t idx : d.prompts()[pi].records) {
      rows[pi].push_back(d.preference_pairs()[idx].winner_row);
      rows[pi].push_back(d.preference_pairs()[idx].loser_row);
    }
  }
  return rows;
}

}  // namespace detail

inline double mean_reward(const Dataset& d) {
  if (d.reward_records().empty()) return 0.0;
  double s = 0.0;
  for (const auto& r : d.reward_records()) s += r.reward;
  return s / static_cast<double>(d.reward_records().size());
}

/// Minibatch Adam training. A pure function of (dataset, probe, config).
inline std::pair<Probe, TrainReport> train(const Dataset& dataset, const Probe& initial,
                                           const TrainConfig& config) {
  config.validate();
  if (initial.dim() != dataset.dim()) {
    throw ConfigError("probe dim " + std::to_string(initial.dim()) + " does not match dataset dim " +
                      std::to_string(dataset.dim()));
  }
  if (uses_preferences(config.loss)) {
    if (!dataset.is_preference_dataset()) {
      throw ConfigError("loss '" + to_string(config.loss) + "' needs preference pairs");
    }
  } else {
    if (!dataset.is_reward_dataset()) {
      throw ConfigError("loss '" + to_string(config.loss) + "' needs reward records");
    }
    if (config.loss == LossKind::ce) {
      for (const auto& r : dataset.reward_records()) {
        if (r.reward != 0.0 && r.reward != 1.0) {
          throw ConfigError("loss 'ce' needs rewards in {0, 1}; found " + std::to_string(r.reward));
        }
      }
    }
  }

  const auto t0 = std::chrono::steady_clock::now();
  Probe probe = initial;
  TrainReport report;
  report.seed = config.seed;
  report.config = config;
  if (config.loss == LossKind::pg) {
    report.baseline = config.baseline.value_or(mean_reward(dataset));
  }
  if (config.epochs == 0) return {initial, report};
  if (config.epochs == 0) {
    return {probe, report};
  }

  AdamState adam(probe.param_count());
  const Rng root(config.seed);
  const auto dpo_rows = config.loss == LossKind::dpo ? detail::rows_by_prompt(dataset)
                                                     : std::vector<std::vector<std::size_t>>{};
  auto apply = [&](const LossResult& r) {
    adam_step(probe.params(), r.grad.values, adam, config.learning_rate, config.adam);
    ++report.steps;
    return r.value;
  };

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    double loss_sum = 0.0;
    std::size_t n_batches = 0;
    if (config.loss == LossKind::pg) {
      const PGConfig pg{config.beta, *report.baseline};
      for (const auto& batch : make_pg_batches(dataset, config.pg_group_size,
                                               config.pg_prompts_per_batch, config.seed, epoch,
                                               config.freeze_pg_groups)) {
        loss_sum += apply(loss_pg(probe, batch, pg));
        ++n_batches;
      }
    } else if (config.loss == LossKind::q || config.loss == LossKind::ce) {
      const auto& recs = dataset.reward_records();
      for (const auto& idx : detail::index_batches(recs.size(), config.batch_size,
                                                   root.derive("epoch_order", epoch))) {
        std::vector<RewardSample> batch;
        batch.reserve(idx.size());
        for (std::size_t i : idx) batch.push_back({dataset.embedding(recs[i].row), recs[i].reward});
        loss_sum += apply(config.loss == LossKind::q ? loss_q(probe, batch) : loss_ce(probe, batch));
        ++n_batches;
      }
    } else {
      const auto& pairs = dataset.preference_pairs();
      Rng ctx_rng = root.derive("dpo_context", epoch);
      const DPOConfig dpo{config.dpo_alpha, config.beta, config.dpo_context_size};
      for (const auto& idx : detail::index_batches(pairs.size(), config.batch_size,
                                                   root.derive("epoch_order", epoch))) {
        if (config.loss == LossKind::qp) {
          std::vector<PreferenceSample> batch;
          batch.reserve(idx.size());
          for (std::size_t i : idx) {
            batch.push_back({dataset.embedding(pairs[i].winner_row), dataset.embedding(pairs[i].loser_row)});
          }
          loss_sum += apply(loss_qp(probe, batch));
        } else {
          std::vector<DPOSample> batch;
          batch.reserve(idx.size());
          for (std::size_t i : idx) {
            DPOSample s{{dataset.embedding(pairs[i].winner_row), dataset.embedding(pairs[i].loser_row)}, {}};
            const auto& pool = dpo_rows[static_cast<std::size_t>(dataset.find_prompt(pairs[i].prompt_id))];
            std::vector<std::size_t> others;
            for (std::size_t row : pool) {
              if (row != pairs[i].winner_row && row != pairs[i].loser_row) others.push_back(row);
            }
            for (std::size_t c = 0; c + 2 < config.dpo_context_size && !others.empty(); ++c) {
              s.context.push_back(dataset.embedding(others[ctx_rng.index(others.size())]));
            }
            batch.push_back(std::move(s));
          }
          loss_sum += apply(loss_dpo_approx(probe, batch, dpo));
        }
        ++n_batches;
      }
    }
    report.epoch_loss.push_back(n_batches ? loss_sum / static_cast<double>(n_batches) : 0.0);
  }

  probe.metadata().loss = to_string(config.loss);
  probe.metadata().seed = config.seed;
  if (config.loss == LossKind::pg || config.loss == LossKind::dpo) {
    probe.metadata().beta = config.beta;
  }
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {probe, report};
}

}  // namespace qprobe
