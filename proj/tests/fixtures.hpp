#pragma once

// Random loss instances shared by the unit tests and the acceptance run.

#include <deque>
#include <vector>

#include "oracles.hpp"
#include "qprobe/losses.hpp"
#include "qprobe/rng.hpp"

namespace fixtures {

/// Owns embedding storage so spans handed to the losses stay valid.
class EmbeddingPool {
 public:
  qprobe::Embedding make(qprobe::Rng& r, std::size_t dim) {
    auto& v = store_.emplace_back(dim);
    for (float& x : v) x = static_cast<float>(r.normal());
    return v;
  }

 private:
  std::deque<std::vector<float>> store_;
};

inline qprobe::Probe random_probe(qprobe::ProbeKind kind, std::size_t dim, qprobe::Rng& r, double scale = 0.3) {
  qprobe::Probe p(kind, dim, kind == qprobe::ProbeKind::mlp ? std::vector<std::size_t>{6} : std::vector<std::size_t>{});
  for (double& v : p.params()) v = scale * r.normal();
  return p;
}

/// Relative error between a loss's analytic gradient and central finite
/// differences (h = 1e-5) of its value.
template <typename LossFn>
double loss_gradient_error(const qprobe::Probe& p, LossFn&& loss) {
  const auto analytic = loss(p);
  qprobe::Probe work = p;
  const auto fd = oracle::central_difference(
      [&](const std::vector<double>& theta) {
        std::copy(theta.begin(), theta.end(), work.params().begin());
        return loss(work).value;
      },
      std::vector<double>(p.params().begin(), p.params().end()), 1e-5);
  return oracle::relative_error(analytic.grad.values, fd);
}

enum class LossUnderTest { q, ce, pg, qp, dpo };

inline const char* name(LossUnderTest l) {
  switch (l) {
    case LossUnderTest::q: return "L_Q";
    case LossUnderTest::ce: return "L_CE";
    case LossUnderTest::pg: return "L_PG";
    case LossUnderTest::qp: return "L_QP";
    case LossUnderTest::dpo: return "DPO-approx";
  }
  return "?";
}

/// Gradient-check error of one random instance of `loss` for a probe of the
/// given kind, fully determined by `seed`.
inline double random_instance_gradient_error(LossUnderTest loss, qprobe::ProbeKind kind, std::uint64_t seed) {
  using namespace qprobe;
  Rng r = Rng(seed).derive("gradient_instance");
  const std::size_t dim = 5;
  EmbeddingPool pool;
  const Probe probe = random_probe(kind, dim, r);
  switch (loss) {
    case LossUnderTest::q:
    case LossUnderTest::ce: {
      std::vector<RewardSample> batch;
      for (int i = 0; i < 8; ++i) {
        const double reward = loss == LossUnderTest::q ? r.normal() : static_cast<double>(r.index(2));
        batch.push_back({pool.make(r, dim), reward});
      }
      if (loss == LossUnderTest::q) {
        return loss_gradient_error(probe, [&](const Probe& p) { return loss_q(p, batch); });
      }
      return loss_gradient_error(probe, [&](const Probe& p) { return loss_ce(p, batch); });
    }
    case LossUnderTest::pg: {
      const std::size_t g = 10;
      std::vector<PromptGroup> groups(3);
      for (auto& grp : groups) {
        for (std::size_t i = 0; i < g; ++i) grp.records.push_back({pool.make(r, dim), static_cast<double>(r.index(2))});
      }
      const PGConfig cfg{r.uniform(0.2, 1.0), r.uniform(0.2, 0.8)};
      return loss_gradient_error(probe, [&](const Probe& p) { return loss_pg(p, groups, cfg); });
    }
    case LossUnderTest::qp: {
      std::vector<PreferenceSample> batch;
      for (int i = 0; i < 8; ++i) batch.push_back({pool.make(r, dim), pool.make(r, dim)});
      return loss_gradient_error(probe, [&](const Probe& p) { return loss_qp(p, batch); });
    }
    case LossUnderTest::dpo: {
      const DPOConfig cfg{r.uniform(0.5, 2.0), r.uniform(0.2, 1.0), 2 + r.index(4)};
      std::vector<DPOSample> batch;
      for (int i = 0; i < 4; ++i) {
        DPOSample s{{pool.make(r, dim), pool.make(r, dim)}, {}};
        for (std::size_t c = 2; c < cfg.context_size; ++c) s.context.push_back(pool.make(r, dim));
        batch.push_back(std::move(s));
      }
      return loss_gradient_error(probe, [&](const Probe& p) { return loss_dpo_approx(p, batch, cfg); });
    }
  }
  return 1.0;
}

}  // namespace fixtures
