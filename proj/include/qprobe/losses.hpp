#pragma once

// Training objectives for probes. Every loss returns its value together with
// the analytic gradient with respect to the probe parameters. Gradients are
// assembled in two passes: scores first, then dLoss/dQ_i pushed back through
// the probe with accumulate_probe_gradient.

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "qprobe/data.hpp"
#include "qprobe/error.hpp"
#include "qprobe/numeric.hpp"
#include "qprobe/probe.hpp"

namespace qprobe {

struct RewardSample {
  Embedding x;
  double reward = 0.0;
};

struct PreferenceSample {
  Embedding winner;
  Embedding loser;
};

/// Completions of one prompt, contrasted against each other by the PG loss.
struct PromptGroup {
  std::string prompt_id;
  std::vector<RewardSample> records;
};

struct PGConfig {
  double beta = 0.1;
  double baseline = 0.0;
};

struct DPOConfig {
  double alpha = 1.0;
  double beta = 0.1;
  std::size_t context_size = 2;  // k: winner + loser + (k - 2) context draws
};

/// A preference pair plus extra base-model draws for the DPO-style loss.
struct DPOSample {
  PreferenceSample pair;
  std::vector<Embedding> context;
};

struct LossResult {
  double value = 0.0;
  ProbeGradient grad;
};

namespace detail {

inline void require_positive_beta(double beta) {
  if (!(beta > 0.0) || !std::isfinite(beta)) {
    throw ArgumentError("beta must be positive and finite");
  }
}

inline void validate(const DPOConfig& c) {
  if (!(c.alpha > 0.0)) throw ArgumentError("DPO alpha must be positive");
  require_positive_beta(c.beta);
  if (c.context_size < 2) throw ArgumentError("DPO context size must be at least 2");
}

}  // namespace detail

/// Mean squared error between scores and rewards.
inline LossResult loss_q(const Probe& probe, std::span<const RewardSample> batch) {
  if (batch.empty()) throw ArgumentError("loss_q: empty batch");
  LossResult out{0.0, ProbeGradient(probe)};
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (const auto& s : batch) {
    const double err = probe_forward(probe, s.x) - s.reward;
    out.value += err * err;
    accumulate_probe_gradient(probe, s.x, 2.0 * err * inv_n, std::span<double>(out.grad.values));
  }
  out.value *= inv_n;
  return out;
}

/// Binary cross-entropy on sigmoid(Q): mean of softplus(Q) - r * Q.
inline LossResult loss_ce(const Probe& probe, std::span<const RewardSample> batch) {
  if (batch.empty()) throw ArgumentError("loss_ce: empty batch");
  for (const auto& s : batch) {
    if (s.reward != 0.0 && s.reward != 1.0) {
      throw ArgumentError("loss_ce: reward " + std::to_string(s.reward) + " is not in {0, 1}");
    }
  }
  LossResult out{0.0, ProbeGradient(probe)};
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (const auto& s : batch) {
    const double q = probe_forward(probe, s.x);
    out.value += softplus(q) - s.reward * q;
    accumulate_probe_gradient(probe, s.x, (sigmoid(q) - s.reward) * inv_n,
                              std::span<double>(out.grad.values));
  }
  out.value *= inv_n;
  return out;
}

/// Probability that `target` is chosen by the beta-softmax over
/// {target} U context: f(t) / (f(t) + sum_i f(c_i)), f = exp(Q / beta).
inline double softmax_ratio(const Probe& probe, Embedding target, std::span<const Embedding> context,
                            double beta) {
  detail::require_positive_beta(beta);
  if (context.empty()) throw ArgumentError("softmax_ratio: empty context");
  std::vector<double> z;
  z.reserve(context.size() + 1);
  z.push_back(probe_forward(probe, target) / beta);
  for (const auto& c : context) z.push_back(probe_forward(probe, c) / beta);
  return std::exp(z[0] - log_sum_exp(z));
}

/// Importance-weighted policy-gradient loss. Within a group of g records,
/// rho_i is the softmax weight of record i against the other g - 1, and the
/// group loss is -(1/g) sum_i (r_i - baseline) rho_i. Groups are averaged.
/// All groups must have the same size.
inline LossResult loss_pg(const Probe& probe, std::span<const PromptGroup> groups,
                          const PGConfig& config) {
  detail::require_positive_beta(config.beta);
  if (groups.empty()) throw ArgumentError("loss_pg: no groups");
  const std::size_t g = groups.front().records.size();
  for (const auto& grp : groups) {
    if (grp.records.size() < 2) {
      throw ArgumentError("loss_pg: group for prompt '" + grp.prompt_id + "' has fewer than 2 records");
    }
    if (grp.records.size() != g) {
      throw ArgumentError("loss_pg: groups must all have the same size");
    }
  }
  LossResult out{0.0, ProbeGradient(probe)};
  const double inv_groups = 1.0 / static_cast<double>(groups.size());
  const double inv_g = 1.0 / static_cast<double>(g);
  std::vector<double> z(g);
  std::vector<double> rho(g);
  for (const auto& grp : groups) {
    for (std::size_t i = 0; i < g; ++i) {
      z[i] = probe_forward(probe, grp.records[i].x) / config.beta;
    }
    softmax(z, rho);
    double weighted_adv = 0.0;  // sum_i A_i rho_i
    for (std::size_t i = 0; i < g; ++i) {
      weighted_adv += (grp.records[i].reward - config.baseline) * rho[i];
    }
    out.value -= inv_g * weighted_adv;
    for (std::size_t j = 0; j < g; ++j) {
      const double adv = grp.records[j].reward - config.baseline;
      const double dq = -inv_g / config.beta * rho[j] * (adv - weighted_adv) * inv_groups;
      accumulate_probe_gradient(probe, grp.records[j].x, dq, std::span<double>(out.grad.values));
    }
  }
  out.value *= inv_groups;
  return out;
}

/// Bradley-Terry preference loss: mean of -log sigmoid(Q(w) - Q(l)).
inline LossResult loss_qp(const Probe& probe, std::span<const PreferenceSample> batch) {
  if (batch.empty()) throw ArgumentError("loss_qp: empty batch");
  LossResult out{0.0, ProbeGradient(probe)};
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (const auto& s : batch) {
    const double margin = probe_forward(probe, s.winner) - probe_forward(probe, s.loser);
    out.value += softplus(-margin);
    const double dm = -sigmoid(-margin) * inv_n;
    accumulate_probe_gradient(probe, s.winner, dm, std::span<double>(out.grad.values));
    accumulate_probe_gradient(probe, s.loser, -dm, std::span<double>(out.grad.values));
  }
  out.value *= inv_n;
  return out;
}

/// DPO-style preference loss with the softmax weights standing in for the
/// policy/base density ratio: -log sigmoid(alpha (rho_w - rho_l)), where
/// rho_w and rho_l are softmax weights over {winner, loser} U context.
inline LossResult loss_dpo_approx(const Probe& probe, const PreferenceSample& pair,
                                  std::span<const Embedding> context, const DPOConfig& config) {
  detail::validate(config);
  const std::size_t m = context.size() + 2;
  std::vector<double> z(m);
  z[0] = probe_forward(probe, pair.winner) / config.beta;
  z[1] = probe_forward(probe, pair.loser) / config.beta;
  for (std::size_t i = 0; i < context.size(); ++i) {
    z[i + 2] = probe_forward(probe, context[i]) / config.beta;
  }
  std::vector<double> rho(m);
  softmax(z, rho);
  const double diff = rho[0] - rho[1];
  const double d = config.alpha * diff;
  LossResult out{softplus(-d), ProbeGradient(probe)};
  const double dl_dd = -sigmoid(-d);
  // dd/dz_j = alpha * (rho_w [j == w] - rho_l [j == l] - (rho_w - rho_l) rho_j)
  auto push = [&](Embedding x, std::size_t j) {
    double dd = -diff * rho[j];
    if (j == 0) dd += rho[0];
    if (j == 1) dd -= rho[1];
    const double dq = dl_dd * config.alpha * dd / config.beta;
    accumulate_probe_gradient(probe, x, dq, std::span<double>(out.grad.values));
  };
  push(pair.winner, 0);
  push(pair.loser, 1);
  for (std::size_t i = 0; i < context.size(); ++i) push(context[i], i + 2);
  return out;
}

/// Batch mean of loss_dpo_approx.
inline LossResult loss_dpo_approx(const Probe& probe, std::span<const DPOSample> batch,
                                  const DPOConfig& config) {
  if (batch.empty()) throw ArgumentError("loss_dpo_approx: empty batch");
  LossResult out{0.0, ProbeGradient(probe)};
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (const auto& s : batch) {
    const auto r = loss_dpo_approx(probe, s.pair, s.context, config);
    out.value += r.value * inv_n;
    for (std::size_t i = 0; i < r.grad.values.size(); ++i) {
      out.grad.values[i] += r.grad.values[i] * inv_n;
    }
  }
  return out;
}

}  // namespace qprobe
