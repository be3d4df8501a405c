// Generate a small task, train a linear probe with the PG loss and compare
// best-of-k selection against the base policy.

#include <iostream>

#include "qprobe/qprobe.hpp"

int main() {
  using namespace qprobe;

  SyntheticTaskSpec spec;
  spec.n_prompts = 50;
  spec.hidden_direction_seed = 7;
  const SyntheticTask task = generate_task(spec);
  const Dataset data = export_training_data(task, 10, 7);

  TrainConfig cfg;
  cfg.loss = LossKind::pg;
  cfg.learning_rate = 1e-2;
  cfg.epochs = 100;
  cfg.pg_prompts_per_batch = 50;
  cfg.batch_size = cfg.pg_group_size * cfg.pg_prompts_per_batch;
  cfg.seed = 7;
  const auto [probe, report] = train(data, init_probe(ProbeKind::linear, task.dim(), {}, 7), cfg);
  std::cout << "final training loss " << report.epoch_loss.back() << '\n';

  const Rng rng = Rng(7).derive("eval");
  EvalOptions opts;
  opts.episodes = 50;
  const auto base = evaluate_policy(Selector::uniform(), task, {1, 0.1, 7}, opts, rng);
  const auto tuned = evaluate_policy(Selector::of(probe), task, {48, 0.1, 7}, opts, rng);
  std::cout << "base pass@1       " << base.expected_return << '\n'
            << "probe return @48  " << tuned.expected_return << " [" << tuned.return_ci.low << ", "
            << tuned.return_ci.high << "]\n"
            << "oracle pass@48    " << tuned.pass_at_k.back() << '\n';
}
