#pragma once

// Inference-time reranking policies and exact evaluators on finite action
// sets.
//
// Scores enter as Q values; every policy works on f(a) = exp(Q(a) / beta),
// always computed relative to the largest score so that small beta does not
// overflow.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "qprobe/data.hpp"
#include "qprobe/error.hpp"
#include "qprobe/numeric.hpp"
#include "qprobe/probe.hpp"
#include "qprobe/rng.hpp"

namespace qprobe {

struct SamplingConfig {
  std::size_t k = 48;
  double beta = 0.1;  // 0 selects the argmax
  std::uint64_t seed = 0;

  void validate() const {
    if (k < 1) throw ArgumentError("k must be at least 1");
    if (!(beta >= 0.0) || !std::isfinite(beta)) throw ArgumentError("beta must be finite and >= 0");
  }
};

/// Exactly enumerable base policy over n actions.
struct FiniteBaseModel {
  std::vector<double> p0;
  EmbeddingTable embeddings;
  std::vector<double> rewards;  // empty when no reward oracle is attached

  std::size_t size() const { return p0.size(); }

  void validate() const {
    if (p0.empty()) throw ArgumentError("base model has no actions");
    double s = 0.0;
    for (double p : p0) {
      if (!(p >= 0.0) || !std::isfinite(p)) throw ArgumentError("base probabilities must be >= 0");
      s += p;
    }
    if (std::abs(s - 1.0) > 1e-12) {
      throw ArgumentError("base probabilities sum to " + std::to_string(s) + ", not 1");
    }
    if (embeddings.rows() != p0.size()) {
      throw ArgumentError("base model needs one embedding per action");
    }
    if (!rewards.empty() && rewards.size() != p0.size()) {
      throw ArgumentError("base model needs one reward per action");
    }
  }
};

struct Candidate {
  std::string completion_id;
  Embedding x;
};

struct CandidateSet {
  std::string prompt_id;
  std::vector<Candidate> candidates;
};

struct Selection {
  std::size_t index = 0;
  std::vector<double> weights;  // selection probability of each candidate
};

/// Probe scores of every action of a finite base model.
inline std::vector<double> score_actions(const Probe& probe, const FiniteBaseModel& base) {
  std::vector<double> q(base.size());
  for (std::size_t a = 0; a < base.size(); ++a) q[a] = probe_forward(probe, base.embeddings.row(a));
  return q;
}

/// Candidate sets grouped by prompt, in dataset order.
inline std::vector<CandidateSet> candidate_sets(const Dataset& d) {
  std::vector<CandidateSet> out;
  for (const auto& entry : d.prompts()) {
    CandidateSet cs{entry.prompt_id, {}};
    for (std::size_t i : entry.records) {
      const auto& r = d.reward_records()[i];
      cs.candidates.push_back({r.completion_id, d.embedding(r.row)});
    }
    out.push_back(std::move(cs));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Selection among k candidates
// ---------------------------------------------------------------------------

/// Selection weights for scores at temperature beta: softmax(q / beta), or a
/// one-hot argmax (lowest index on ties) when beta == 0.
inline std::vector<double> selection_weights(std::span<const double> q, double beta) {
  if (q.empty()) throw ArgumentError("empty candidate set");
  if (!(beta >= 0.0)) throw ArgumentError("beta must be >= 0");
  std::vector<double> w(q.size(), 0.0);
  if (beta == 0.0) {
    w[static_cast<std::size_t>(std::max_element(q.begin(), q.end()) - q.begin())] = 1.0;
    return w;
  }
  std::vector<double> z(q.size());
  for (std::size_t i = 0; i < q.size(); ++i) z[i] = q[i] / beta;
  softmax(z, w);
  return w;
}

/// Draws one candidate from selection_weights(q, beta). The argmax path
/// consumes no randomness.
inline Selection select_scores(std::span<const double> q, double beta, Rng& rng) {
  Selection s{0, selection_weights(q, beta)};
  if (beta == 0.0) {
    s.index = static_cast<std::size_t>(std::max_element(s.weights.begin(), s.weights.end()) -
                                       s.weights.begin());
  } else {
    s.index = rng.categorical(s.weights);
  }
  return s;
}

inline Selection select(const Probe& probe, const CandidateSet& candidates,
                        const SamplingConfig& config, Rng& rng) {
  config.validate();
  if (candidates.candidates.empty()) throw ArgumentError("empty candidate set");
  std::vector<double> q(candidates.candidates.size());
  for (std::size_t i = 0; i < q.size(); ++i) q[i] = probe_forward(probe, candidates.candidates[i].x);
  return select_scores(q, config.beta, rng);
}

// ---------------------------------------------------------------------------
// Rejection sampling
// ---------------------------------------------------------------------------

struct RejectionResult {
  std::size_t action = 0;
  std::size_t iterations = 0;
};

/// Draws a ~ p0 and accepts it with probability exp(q(a) / beta) / M until
/// acceptance. Requires M >= max_a exp(q(a) / beta) over actions with p0 > 0.
inline RejectionResult rejection_sample(std::span<const double> q, std::span<const double> p0,
                                        double beta, double M, Rng& rng) {
  if (!(beta > 0.0)) throw ArgumentError("rejection sampling needs beta > 0");
  if (q.size() != p0.size() || q.empty()) throw ArgumentError("scores and base policy differ in size");
  if (!(M > 0.0)) throw ArgumentError("rejection bound M must be positive");
  const double log_m = std::log(M);
  for (std::size_t a = 0; a < q.size(); ++a) {
    if (p0[a] > 0.0 && q[a] / beta > log_m) {
      throw ArgumentError("rejection bound M = " + std::to_string(M) + " is below exp(Q/beta) = " +
                          std::to_string(std::exp(q[a] / beta)) + " for action " + std::to_string(a));
    }
  }
  const CategoricalSampler draw(p0);
  for (std::size_t it = 1;; ++it) {
    const std::size_t a = draw(rng);
    if (rng.uniform() < std::exp(q[a] / beta - log_m)) return {a, it};
  }
}

inline RejectionResult rejection_sample(const Probe& probe, const FiniteBaseModel& base, double beta,
                                        double M, Rng& rng) {
  base.validate();
  return rejection_sample(score_actions(probe, base), base.p0, beta, M, rng);
}

// ---------------------------------------------------------------------------
// Limit policy and exact finite-k policy
// ---------------------------------------------------------------------------

/// p0(a) exp(q(a)/beta) / sum_b p0(b) exp(q(b)/beta).
inline std::vector<double> limit_policy(std::span<const double> q, std::span<const double> p0,
                                        double beta) {
  if (!(beta > 0.0)) throw ArgumentError("limit policy needs beta > 0 (use argmax for beta = 0)");
  if (q.size() != p0.size() || q.empty()) throw ArgumentError("scores and base policy differ in size");
  double zmax = -std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < q.size(); ++a) {
    if (p0[a] > 0.0) zmax = std::max(zmax, q[a] / beta);
  }
  std::vector<double> pi(q.size(), 0.0);
  double s = 0.0;
  for (std::size_t a = 0; a < q.size(); ++a) {
    if (p0[a] > 0.0) {
      pi[a] = p0[a] * std::exp(q[a] / beta - zmax);
      s += pi[a];
    }
  }
  for (double& v : pi) v /= s;
  return pi;
}

inline std::vector<double> limit_policy(const Probe& probe, const FiniteBaseModel& base, double beta) {
  base.validate();
  return limit_policy(score_actions(probe, base), base.p0, beta);
}

/// Number of count vectors (c_1..c_n) with sum k: C(k + n - 1, n - 1).
inline double count_vectors(std::size_t n, std::size_t k) {
  double c = 1.0;
  for (std::size_t i = 1; i < n; ++i) {
    c = c * static_cast<double>(k + i) / static_cast<double>(i);
  }
  return c;
}

inline constexpr double kDefaultEnumerationGuard = 1e7;

namespace detail {

struct KPolicyEnumerator {
  std::size_t n = 0;
  std::size_t k = 0;
  std::vector<double> f;                      // exp(z - zmax)
  std::vector<std::vector<double>> binom;     // binom[m][c] = C(m, c)
  std::vector<std::vector<double>> powers;    // powers[j][c] = p0_j^c
  std::vector<std::size_t> counts;
  std::vector<double> pi;

  void run(std::size_t j, std::size_t remaining, double prob) {
    if (j + 1 == n) {
      const double factor = binom[remaining][remaining] * powers[j][remaining];
      if (factor == 0.0) return;
      counts[j] = remaining;
      leaf(prob * factor);
      return;
    }
    for (std::size_t c = 0; c <= remaining; ++c) {
      const double factor = binom[remaining][c] * powers[j][c];
      if (factor == 0.0) continue;
      counts[j] = c;
      run(j + 1, remaining - c, prob * factor);
    }
    counts[j] = 0;
  }

  void leaf(double prob) {
    double denom = 0.0;
    for (std::size_t a = 0; a < n; ++a) denom += static_cast<double>(counts[a]) * f[a];
    for (std::size_t a = 0; a < n; ++a) {
      if (counts[a] != 0) pi[a] += prob * (static_cast<double>(counts[a]) * f[a] / denom);
    }
  }
};

}  // namespace detail

/// Exact law of the softmax-over-k policy: the expectation over all count
/// vectors c of k i.i.d. draws from p0 of c_a f(a) / sum_j c_j f(a_j),
/// weighted by Multinomial(c; k, p0). Throws ResourceError when the number
/// of count vectors exceeds `guard`.
inline std::vector<double> exact_k_policy(std::span<const double> q, std::span<const double> p0,
                                          double beta, std::size_t k,
                                          double guard = kDefaultEnumerationGuard) {
  if (!(beta > 0.0)) throw ArgumentError("exact_k_policy needs beta > 0");
  if (k < 1) throw ArgumentError("k must be at least 1");
  if (q.size() != p0.size() || q.empty()) throw ArgumentError("scores and base policy differ in size");
  const std::size_t n = q.size();
  const double vectors = count_vectors(n, k);
  if (vectors > guard) {
    throw ResourceError("exact enumeration needs " + std::to_string(vectors) +
                        " count vectors (guard " + std::to_string(guard) +
                        "); use the Monte Carlo estimate instead");
  }
  detail::KPolicyEnumerator e;
  e.n = n;
  e.k = k;
  double zmax = -std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < n; ++a) zmax = std::max(zmax, q[a] / beta);
  e.f.resize(n);
  for (std::size_t a = 0; a < n; ++a) e.f[a] = std::exp(q[a] / beta - zmax);
  e.binom.assign(k + 1, std::vector<double>(k + 1, 0.0));
  for (std::size_t m = 0; m <= k; ++m) {
    e.binom[m][0] = 1.0;
    for (std::size_t c = 1; c <= m; ++c) e.binom[m][c] = e.binom[m - 1][c - 1] + (c <= m - 1 ? e.binom[m - 1][c] : 0.0);
  }
  e.powers.assign(n, std::vector<double>(k + 1, 1.0));
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t c = 1; c <= k; ++c) e.powers[j][c] = e.powers[j][c - 1] * p0[j];
  }
  e.counts.assign(n, 0);
  e.pi.assign(n, 0.0);
  e.run(0, k, 1.0);
  return e.pi;
}

inline std::vector<double> exact_k_policy(const Probe& probe, const FiniteBaseModel& base, double beta,
                                          std::size_t k, double guard = kDefaultEnumerationGuard) {
  base.validate();
  return exact_k_policy(score_actions(probe, base), base.p0, beta, k, guard);
}

struct MonteCarloPolicy {
  std::vector<double> estimate;
  std::vector<double> standard_error;
  std::size_t draws = 0;
};

/// Monte Carlo estimate of the softmax-over-k policy from `draws` simulated
/// selections, with binomial standard errors.
inline MonteCarloPolicy monte_carlo_k_policy(std::span<const double> q, std::span<const double> p0,
                                             double beta, std::size_t k, std::size_t draws, Rng& rng) {
  if (draws == 0) throw ArgumentError("Monte Carlo needs at least one draw");
  const CategoricalSampler draw(p0);
  std::vector<double> counts(q.size(), 0.0);
  std::vector<std::size_t> actions(k);
  std::vector<double> cand_q(k);
  for (std::size_t t = 0; t < draws; ++t) {
    for (std::size_t i = 0; i < k; ++i) {
      actions[i] = draw(rng);
      cand_q[i] = q[actions[i]];
    }
    counts[actions[select_scores(cand_q, beta, rng).index]] += 1.0;
  }
  MonteCarloPolicy out;
  out.draws = draws;
  const double nd = static_cast<double>(draws);
  for (double c : counts) {
    const double p = c / nd;
    out.estimate.push_back(p);
    out.standard_error.push_back(std::sqrt(p * (1.0 - p) / nd));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Verification of the limit and its KL-regularized optimality
// ---------------------------------------------------------------------------

struct ConvergenceRow {
  std::size_t k = 0;
  double tv = 0.0;
};

/// TV distance between the exact softmax-over-k policy and the limit policy
/// for every k in the schedule.
inline std::vector<ConvergenceRow> verify_limit_convergence(std::span<const double> q,
                                                            std::span<const double> p0, double beta,
                                                            std::span<const std::size_t> k_schedule,
                                                            double guard = kDefaultEnumerationGuard) {
  const auto limit = limit_policy(q, p0, beta);
  std::vector<ConvergenceRow> rows;
  for (std::size_t k : k_schedule) {
    rows.push_back({k, total_variation(exact_k_policy(q, p0, beta, k, guard), limit)});
  }
  return rows;
}

inline std::vector<ConvergenceRow> verify_limit_convergence(const Probe& probe, const FiniteBaseModel& base,
                                                            double beta,
                                                            std::span<const std::size_t> k_schedule,
                                                            double guard = kDefaultEnumerationGuard) {
  base.validate();
  return verify_limit_convergence(score_actions(probe, base), base.p0, beta, k_schedule, guard);
}

/// True when each TV value is strictly below its predecessor, treating
/// values within `tie_tol` of zero as converged.
inline bool strictly_decreasing(std::span<const ConvergenceRow> rows, double tie_tol = 1e-12) {
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const bool converged = rows[i].tv <= tie_tol && rows[i - 1].tv <= tie_tol;
    if (!(rows[i].tv < rows[i - 1].tv) && !converged) return false;
  }
  return true;
}

/// E_pi[q] - beta KL(pi || p0), with 0 log 0 = 0.
inline double kl_regularized_objective(std::span<const double> pi, std::span<const double> q,
                                       std::span<const double> p0, double beta) {
  double value = 0.0;
  double kl = 0.0;
  for (std::size_t a = 0; a < pi.size(); ++a) {
    if (pi[a] > 0.0) {
      value += pi[a] * q[a];
      kl += pi[a] * std::log(pi[a] / p0[a]);
    }
  }
  return value - beta * kl;
}

struct KlOptimalityReport {
  double limit_objective = 0.0;
  double base_objective = 0.0;   // J(p0) = E_p0[q]
  double best_other = -std::numeric_limits<double>::infinity();
  std::size_t trials = 0;
  std::size_t violations = 0;    // perturbed policies beating the limit policy
  double margin = 0.0;           // limit_objective - best_other

  bool holds() const { return violations == 0 && limit_objective >= base_objective; }
};

/// Compares the limit policy's KL-regularized objective against `trials`
/// other distributions: Dirichlet(1) draws, mixtures of the limit policy
/// with a Dirichlet draw, and log-normal multiplicative perturbations of the
/// limit policy, in rotation.
inline KlOptimalityReport verify_kl_optimality(std::span<const double> q, std::span<const double> p0,
                                               double beta, std::size_t trials, Rng& rng) {
  if (!(beta > 0.0)) throw ArgumentError("KL optimality check needs beta > 0");
  for (double p : p0) {
    if (!(p > 0.0)) throw ArgumentError("KL optimality check needs p0 with full support");
  }
  const auto star = limit_policy(q, p0, beta);
  KlOptimalityReport r;
  r.limit_objective = kl_regularized_objective(star, q, p0, beta);
  r.base_objective = kl_regularized_objective(p0, q, p0, beta);
  r.trials = trials;
  const std::vector<double> ones(q.size(), 1.0);
  const double tol = 1e-12 * std::max(1.0, std::abs(r.limit_objective));
  std::vector<double> pi(q.size());
  for (std::size_t t = 0; t < trials; ++t) {
    switch (t % 3) {
      case 0:
        pi = rng.dirichlet(ones);
        break;
      case 1: {
        const auto d = rng.dirichlet(ones);
        const double mix = rng.uniform();
        for (std::size_t a = 0; a < pi.size(); ++a) pi[a] = (1.0 - mix) * star[a] + mix * d[a];
        break;
      }
      default: {
        const double scale = rng.uniform(0.0, 0.5);
        double s = 0.0;
        for (std::size_t a = 0; a < pi.size(); ++a) {
          pi[a] = star[a] * std::exp(scale * rng.normal());
          s += pi[a];
        }
        for (double& v : pi) v /= s;
        break;
      }
    }
    const double j = kl_regularized_objective(pi, q, p0, beta);
    r.best_other = std::max(r.best_other, j);
    if (j > r.limit_objective + tol) ++r.violations;
  }
  r.best_other = std::max(r.best_other, r.base_objective);
  r.margin = r.limit_objective - r.best_other;
  return r;
}

inline KlOptimalityReport verify_kl_optimality(const Probe& probe, const FiniteBaseModel& base,
                                               double beta, std::size_t trials, Rng& rng) {
  base.validate();
  return verify_kl_optimality(score_actions(probe, base), base.p0, beta, trials, rng);
}

}  // namespace qprobe
