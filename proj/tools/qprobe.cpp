// qprobe command-line tool: gen, train, rerank, eval, sweep, verify.
//
// Exit codes: 0 success, 2 usage or validation error, 3 enumeration guard
// exceeded, 1 internal error or failed verification.

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qprobe/qprobe.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace qprobe;

namespace {

struct Globals {
  std::uint64_t seed = 0;
  std::string output_dir = ".";
  bool json_output = false;
  std::size_t threads = 1;
};

struct CommandResult {
  json report;
  std::string text;
  json config;
  std::vector<std::string> outputs;
  int exit_code = 0;
};

std::string num(const json& v) { return v.dump(); }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

fs::path output_path(const Globals& g, const std::string& name) { return fs::path(g.output_dir) / name; }

void require_file(const std::string& path, const char* what) {
  if (!fs::exists(path)) throw ArgumentError(std::string(what) + " '" + path + "' does not exist");
}

// ---------------------------------------------------------------------------
// gen

struct GenFlags {
  SyntheticTaskSpec spec;
  std::string reward = "binary-linear";
  std::size_t samples_per_prompt = 10;
  std::string name = "task";
};

CommandResult run_gen(const Globals& g, GenFlags f) {
  f.spec.reward_kind = parse_reward_kind(f.reward);
  f.spec.hidden_direction_seed = g.seed;
  f.spec.validate();
  if (f.samples_per_prompt < 1) throw ArgumentError("--samples-per-prompt must be at least 1");
  const SyntheticTask task = generate_task(f.spec);
  const Dataset data = export_training_data(task, f.samples_per_prompt, g.seed);

  const auto task_path = output_path(g, f.name + ".task.json");
  const auto data_path = output_path(g, f.name + ".train.jsonl");
  save_task(task, task_path);
  save_dataset(data, data_path);

  CommandResult r;
  r.config = {{"spec", to_json(f.spec)}, {"samples_per_prompt", f.samples_per_prompt}, {"name", f.name}};
  r.outputs = {task_path.filename().string(), task_actions_path(task_path).filename().string(),
               embeddings_path_for(task_actions_path(task_path)).filename().string(),
               data_path.filename().string(), embeddings_path_for(data_path).filename().string()};
  r.report = {{"prompts", task.prompts.size()},
              {"actions_per_prompt", f.spec.actions_per_prompt},
              {"records", data.size()},
              {"dim", task.dim()},
              {"reward", to_string(f.spec.reward_kind)},
              {"base_expected_reward", exact_base_return(task)},
              {"task", task_path.filename().string()},
              {"dataset", data_path.filename().string()}};
  std::ostringstream t;
  t << "prompts " << num(r.report["prompts"]) << ", records " << num(r.report["records"]) << ", dim "
    << num(r.report["dim"]) << " (" << f.reward << ")\n"
    << "base expected reward " << num(r.report["base_expected_reward"]) << '\n'
    << "task " << task_path.string() << "\ndataset " << data_path.string() << '\n';
  r.text = t.str();
  return r;
}

// ---------------------------------------------------------------------------
// train (training flags are shared with the data sweep)

struct TrainFlags {
  std::string loss = "pg";
  std::string probe_kind = "linear";
  std::vector<std::size_t> hidden;
  bool no_bias = false;
  TrainConfig config;
  std::optional<double> baseline;
  bool timing = false;
};

void add_train_flags(CLI::App* app, TrainFlags& f, bool with_loss) {
  if (with_loss) {
    app->add_option("--loss", f.loss, "q | ce | pg | qp | dpo")->capture_default_str();
  }
  app->add_option("--probe-kind", f.probe_kind, "linear | mlp")->capture_default_str();
  app->add_option("--hidden", f.hidden, "MLP hidden layer sizes, comma separated")->delimiter(',');
  app->add_flag("--no-bias", f.no_bias, "probe without bias terms");
  app->add_option("--lr", f.config.learning_rate, "Adam learning rate")->capture_default_str();
  app->add_option("--batch", f.config.batch_size, "batch size")->capture_default_str();
  app->add_option("--epochs", f.config.epochs, "epochs")->capture_default_str();
  app->add_option("--group-size", f.config.pg_group_size, "PG records per group")->capture_default_str();
  app->add_option("--prompts-per-batch", f.config.pg_prompts_per_batch, "PG groups per batch")
      ->capture_default_str();
  app->add_option("--beta", f.config.beta, "softmax temperature used by pg and dpo")->capture_default_str();
  app->add_option("--baseline", f.baseline, "PG baseline (default: dataset mean reward)");
  app->add_option("--dpo-alpha", f.config.dpo_alpha, "DPO scale")->capture_default_str();
  app->add_option("--context-size", f.config.dpo_context_size, "DPO draws per pair (k)")->capture_default_str();
  app->add_flag("--freeze-groups", f.config.freeze_pg_groups, "reuse the first epoch's PG groups");
  app->add_option("--adam-beta1", f.config.adam.beta1)->capture_default_str();
  app->add_option("--adam-beta2", f.config.adam.beta2)->capture_default_str();
  app->add_option("--adam-eps", f.config.adam.epsilon)->capture_default_str();
}

json probe_config_json(const TrainFlags& f) {
  return {{"kind", f.probe_kind}, {"hidden_sizes", f.hidden}, {"bias", !f.no_bias}};
}

CommandResult run_train(const Globals& g, TrainFlags f, const std::string& data_path, const std::string& name) {
  require_file(data_path, "dataset");
  f.config.loss = parse_loss_kind(f.loss);
  f.config.seed = g.seed;
  f.config.baseline = f.baseline;
  const ProbeKind kind = parse_probe_kind(f.probe_kind);
  if (kind == ProbeKind::mlp && f.hidden.empty()) f.hidden = {32};
  if (kind == ProbeKind::linear && !f.hidden.empty()) throw ArgumentError("--hidden applies to mlp probes only");
  f.config.validate();
  const Dataset data = load_dataset(data_path);
  const Probe init = init_probe(kind, data.dim(), f.hidden, g.seed, !f.no_bias);
  const auto [probe, report] = train(data, init, f.config);

  const auto probe_path = output_path(g, name + ".json");
  const auto report_path = output_path(g, name + ".report.json");
  save_probe(probe, probe_path);
  write_text(report_path, to_json(report, f.timing).dump(1) + '\n');

  CommandResult r;
  r.config = {{"data", data_path}, {"name", name}, {"probe", probe_config_json(f)},
              {"train", to_json(f.config)}, {"timing", f.timing}};
  r.outputs = {probe_path.filename().string(), report_path.filename().string()};
  r.report = to_json(report, f.timing);
  r.report["probe"] = probe_path.filename().string();
  r.report["final_loss"] = report.epoch_loss.empty() ? json(nullptr) : json(report.epoch_loss.back());
  std::ostringstream t;
  t << "loss " << f.loss << ", " << num(r.report["epochs"]) << " epochs, " << num(r.report["steps"])
    << " steps\n";
  if (!report.epoch_loss.empty()) {
    t << "first epoch loss " << num(json(report.epoch_loss.front())) << "\nfinal epoch loss "
      << num(r.report["final_loss"]) << '\n';
  }
  if (report.baseline) t << "baseline " << num(r.report["baseline"]) << '\n';
  if (f.timing) t << "wall seconds " << num(r.report["wall_seconds"]) << '\n';
  t << "probe " << probe_path.string() << '\n';
  r.text = t.str();
  return r;
}

// ---------------------------------------------------------------------------
// rerank

struct RerankFlags {
  std::string probe;
  std::string candidates;
  std::size_t k = 0;  // 0 = every candidate of the prompt
  double beta = 0.1;
  std::string name = "rerank";
};

CommandResult run_rerank(const Globals& g, const RerankFlags& f) {
  require_file(f.probe, "probe");
  require_file(f.candidates, "candidate manifest");
  const Probe probe = load_probe(f.probe);
  const Dataset data = load_dataset(f.candidates);
  if (!data.is_reward_dataset()) throw ArgumentError("candidate manifest holds no completion records");
  if (probe.dim() != data.dim()) {
    throw ArgumentError("probe dim " + std::to_string(probe.dim()) + " does not match candidate dim " +
                        std::to_string(data.dim()));
  }
  const Rng root = Rng(g.seed).derive("rerank");
  const auto sets = candidate_sets(data);
  std::string lines;
  double mean_reward = 0.0;
  for (std::size_t i = 0; i < sets.size(); ++i) {
    CandidateSet cs = sets[i];
    if (f.k > 0 && cs.candidates.size() > f.k) cs.candidates.resize(f.k);
    Rng rng = root.derive(i);
    const Selection s = select(probe, cs, SamplingConfig{cs.candidates.size(), f.beta, g.seed}, rng);
    const auto& rec = data.reward_records()[data.prompts()[i].records[s.index]];
    mean_reward += rec.reward;
    lines += json{{"prompt_id", cs.prompt_id},
                  {"completion_id", cs.candidates[s.index].completion_id},
                  {"index", s.index},
                  {"candidates", cs.candidates.size()},
                  {"weight", s.weights[s.index]},
                  {"reward", rec.reward}}
                 .dump() +
             '\n';
  }
  mean_reward /= static_cast<double>(sets.size());
  const auto out_path = output_path(g, f.name + ".selections.jsonl");
  write_text(out_path, lines);

  CommandResult r;
  r.config = {{"probe", f.probe}, {"candidates", f.candidates}, {"k", f.k}, {"beta", f.beta}, {"name", f.name}};
  r.outputs = {out_path.filename().string()};
  r.report = {{"prompts", sets.size()},
              {"beta", f.beta},
              {"mean_selected_reward", mean_reward},
              {"selections", out_path.filename().string()}};
  r.text = "reranked " + num(r.report["prompts"]) + " prompts at beta " + num(r.report["beta"]) +
           "\nmean selected reward " + num(r.report["mean_selected_reward"]) + "\nselections " +
           out_path.string() + '\n';
  return r;
}

// ---------------------------------------------------------------------------
// eval / sweep

struct SelectorFlags {
  std::string probe;
  bool no_probe = false;
  bool oracle = false;
};

void add_selector_flags(CLI::App* app, SelectorFlags& f) {
  auto* p = app->add_option("--probe", f.probe, "probe file");
  auto* n = app->add_flag("--no-probe", f.no_probe, "uniform selection (base policy)");
  auto* o = app->add_flag("--oracle", f.oracle, "true-reward argmax (pass@k skyline)");
  p->excludes(n)->excludes(o);
  n->excludes(o);
}

struct EvalFlags {
  std::string task;
  SelectorFlags selector;
  std::size_t k = 48;
  std::optional<double> beta;
  std::size_t episodes = 100;
  bool no_pass_at_k = false;
  std::size_t bootstrap = 1000;
  std::string name;
};

struct LoadedSelector {
  std::optional<Probe> probe;
  Selector selector;
};

LoadedSelector load_selector(const SelectorFlags& f) {
  LoadedSelector s;
  if (f.oracle) {
    s.selector = Selector::oracle();
  } else if (f.no_probe) {
    s.selector = Selector::uniform();
  } else {
    if (f.probe.empty()) throw ArgumentError("choose one of --probe FILE, --no-probe or --oracle");
    require_file(f.probe, "probe");
    s.probe = load_probe(f.probe);
    s.selector = Selector::of(*s.probe);
  }
  return s;
}

double default_beta(const SyntheticTask& task, const std::optional<double>& beta) {
  if (beta) return *beta;
  return task.spec.reward_kind == RewardKind::preference_bt ? 0.0 : 0.1;
}

EvalOptions eval_options(const Globals& g, const SyntheticTask& task, const EvalFlags& f) {
  EvalOptions o;
  o.episodes = f.episodes;
  o.pass_at_k = task.binary() && !f.no_pass_at_k;
  o.bootstrap_resamples = f.bootstrap;
  o.threads = g.threads;
  return o;
}

json selector_config(const SelectorFlags& f) {
  return {{"probe", f.probe.empty() ? json(nullptr) : json(f.probe)}, {"no_probe", f.no_probe}, {"oracle", f.oracle}};
}

std::string eval_text(const json& rep) {
  std::ostringstream t;
  t << "selector " << rep["selector"].get<std::string>() << ", k " << num(rep["k"]) << ", beta "
    << num(rep["beta"]) << ", episodes " << num(rep["episodes"]) << '\n'
    << "expected return " << num(rep["expected_return"]) << " (95% CI " << num(rep["return_ci"][0]) << ", "
    << num(rep["return_ci"][1]) << ")\n";
  const auto& pk = rep["pass_at_k"];
  if (!pk.empty()) {
    t << "pass@1 " << num(pk.front());
    if (pk.size() > 1) t << ", pass@" << pk.size() << ' ' << num(pk.back());
    t << '\n';
  }
  t << "base expected reward " << num(rep["base_expected_reward"]) << '\n';
  return t.str();
}

CommandResult run_eval(const Globals& g, const EvalFlags& f) {
  require_file(f.task, "task");
  const SyntheticTask task = load_task(f.task);
  const auto sel = load_selector(f.selector);
  const double beta = default_beta(task, f.beta);
  const EvalOptions opts = eval_options(g, task, f);
  const EvalReport rep =
      evaluate_policy(sel.selector, task, SamplingConfig{f.k, beta, g.seed}, opts, Rng(g.seed).derive("eval"));

  const std::string name = f.name.empty() ? "eval" : f.name;
  const auto out_path = output_path(g, name + ".json");
  const json j = to_json(rep);
  write_text(out_path, j.dump(1) + '\n');

  CommandResult r;
  r.config = {{"task", f.task}, {"selector", selector_config(f.selector)}, {"k", f.k}, {"beta", beta},
              {"episodes", f.episodes}, {"pass_at_k", opts.pass_at_k}, {"bootstrap", f.bootstrap},
              {"name", name}};
  r.outputs = {out_path.filename().string()};
  r.report = j;
  r.text = eval_text(j);
  return r;
}

struct SweepFlags {
  EvalFlags eval;
  std::vector<std::size_t> ks = {1, 2, 4, 8, 16, 32, 48};
  std::vector<std::size_t> sizes;
  std::vector<std::string> losses = {"pg", "q"};
  std::size_t trials = 10;
  std::size_t samples_per_prompt = 10;
  TrainFlags train;
};

CommandResult run_sweep_k(const Globals& g, const SweepFlags& f, const SyntheticTask& task) {
  const auto sel = load_selector(f.eval.selector);
  const double beta = default_beta(task, f.eval.beta);
  const EvalOptions opts = eval_options(g, task, f.eval);
  const auto points = sweep_k(sel.selector, task, f.ks, beta, opts, Rng(g.seed).derive("eval"));

  json rows = json::array();
  std::ostringstream t;
  t << "selector " << sel.selector.name() << ", beta " << num(json(beta)) << '\n' << "k\treturn\tci_low\tci_high";
  if (opts.pass_at_k) t << "\tpass@k";
  t << '\n';
  for (const auto& p : points) {
    json row = {{"k", p.k},
                {"expected_return", p.report.expected_return},
                {"return_ci", {p.report.return_ci.low, p.report.return_ci.high}}};
    row["pass_at_k"] = opts.pass_at_k ? json(p.report.pass_at_k.back()) : json(nullptr);
    t << num(row["k"]) << '\t' << num(row["expected_return"]) << '\t' << num(row["return_ci"][0]) << '\t'
      << num(row["return_ci"][1]);
    if (opts.pass_at_k) t << '\t' << num(row["pass_at_k"]);
    t << '\n';
    rows.push_back(std::move(row));
  }
  CommandResult r;
  r.report = {{"mode", "k"}, {"selector", sel.selector.name()}, {"beta", beta},
              {"episodes", f.eval.episodes}, {"rows", rows}};
  r.config = {{"task", f.eval.task}, {"selector", selector_config(f.eval.selector)}, {"k", f.ks},
              {"beta", beta}, {"episodes", f.eval.episodes}, {"pass_at_k", opts.pass_at_k},
              {"bootstrap", f.eval.bootstrap}};
  r.text = t.str();
  return r;
}

CommandResult run_sweep_data(const Globals& g, SweepFlags f, const SyntheticTask& task) {
  if (!f.eval.selector.probe.empty() || f.eval.selector.no_probe || f.eval.selector.oracle) {
    throw ArgumentError("--sizes trains fresh probes; --probe, --no-probe and --oracle do not apply");
  }
  std::vector<LossKind> losses;
  for (const auto& l : f.losses) losses.push_back(parse_loss_kind(l));
  const ProbeKind kind = parse_probe_kind(f.train.probe_kind);
  if (kind == ProbeKind::mlp && f.train.hidden.empty()) f.train.hidden = {32};
  DataSweepConfig cfg;
  cfg.train = f.train.config;
  cfg.train.baseline = f.train.baseline;
  cfg.probe_kind = kind;
  cfg.hidden_sizes = f.train.hidden;
  cfg.samples_per_prompt = f.samples_per_prompt;
  cfg.sampling = SamplingConfig{f.eval.k, default_beta(task, f.eval.beta), g.seed};
  cfg.eval = eval_options(g, task, f.eval);
  cfg.eval.pass_at_k = false;
  cfg.seed = g.seed;
  for (LossKind l : losses) {
    TrainConfig probe_cfg = cfg.train;
    probe_cfg.loss = l;
    probe_cfg.validate();
  }
  const auto cells = sweep_data(task, f.sizes, losses, f.trials, cfg);

  json rows = json::array();
  std::ostringstream t;
  t << "size\tloss\tmean_return\tci_low\tci_high\n";
  for (const auto& c : cells) {
    json row = {{"size", c.size},
                {"loss", to_string(c.loss)},
                {"mean_return", c.mean_return},
                {"return_ci", {c.ci.low, c.ci.high}},
                {"trial_returns", c.trial_returns}};
    t << num(row["size"]) << '\t' << to_string(c.loss) << '\t' << num(row["mean_return"]) << '\t'
      << num(row["return_ci"][0]) << '\t' << num(row["return_ci"][1]) << '\n';
    rows.push_back(std::move(row));
  }
  CommandResult r;
  r.report = {{"mode", "data"}, {"k", cfg.sampling.k}, {"beta", cfg.sampling.beta}, {"trials", f.trials},
              {"cells", rows}};
  json train_cfg = to_json(cfg.train);
  train_cfg.erase("loss");
  train_cfg.erase("seed");
  r.config = {{"task", f.eval.task}, {"sizes", f.sizes}, {"losses", f.losses}, {"trials", f.trials},
              {"samples_per_prompt", f.samples_per_prompt}, {"k", cfg.sampling.k},
              {"beta", cfg.sampling.beta}, {"episodes", f.eval.episodes}, {"bootstrap", f.eval.bootstrap},
              {"probe", probe_config_json(f.train)}, {"train", train_cfg}};
  r.text = t.str();
  return r;
}

CommandResult run_sweep(const Globals& g, const SweepFlags& f) {
  require_file(f.eval.task, "task");
  const SyntheticTask task = load_task(f.eval.task);
  CommandResult r = f.sizes.empty() ? run_sweep_k(g, f, task) : run_sweep_data(g, f, task);
  const std::string name = f.eval.name.empty() ? "sweep" : f.eval.name;
  const auto out_path = output_path(g, name + ".json");
  write_text(out_path, r.report.dump(1) + '\n');
  r.config["name"] = name;
  r.outputs = {out_path.filename().string()};
  return r;
}

// ---------------------------------------------------------------------------
// verify

struct VerifyFlags {
  std::size_t actions = 5;
  std::size_t dim = 8;
  double beta = 0.5;
  std::vector<std::size_t> ks = {1, 2, 4, 8, 16, 32, 64};
  std::size_t instances = 1;
  std::size_t trials = 1000;
  double clip = 1.0;
  bool constant_probe = false;
  double guard = kDefaultEnumerationGuard;
  std::size_t monte_carlo = 0;
  std::string name = "verify";
};

CommandResult run_verify(const Globals& g, const VerifyFlags& f) {
  if (!(f.beta > 0.0)) throw ArgumentError("--beta must be positive");
  if (f.instances < 1) throw ArgumentError("--instances must be at least 1");
  if (f.ks.empty()) throw ArgumentError("--k needs at least one value");
  for (std::size_t k : f.ks) {
    if (k < 1) throw ArgumentError("--k values must be at least 1");
    if (count_vectors(f.actions, k) > f.guard && f.monte_carlo == 0) {
      throw ResourceError("k = " + std::to_string(k) + " with " + std::to_string(f.actions) +
                          " actions exceeds the enumeration guard; rerun with --monte-carlo DRAWS");
    }
  }
  bool ok = true;
  json instances = json::array();
  std::ostringstream t;
  for (std::size_t i = 0; i < f.instances; ++i) {
    const auto inst = random_finite_instance(f.actions, f.dim, trial_seed(g.seed, i), f.clip, f.constant_probe);
    const auto limit = limit_policy(inst.scores, inst.base.p0, f.beta);
    std::vector<ConvergenceRow> exact_rows;
    json rows = json::array();
    t << "instance " << i << "\nk\tTV\tmethod\n";
    for (std::size_t k : f.ks) {
      json row = {{"k", k}};
      if (count_vectors(f.actions, k) <= f.guard) {
        const double tv = total_variation(exact_k_policy(inst.scores, inst.base.p0, f.beta, k, f.guard), limit);
        exact_rows.push_back({k, tv});
        row["tv"] = tv;
        row["method"] = "exact";
      } else {
        Rng mc = Rng(g.seed).derive("verify_monte_carlo", i).derive(k);
        const auto est = monte_carlo_k_policy(inst.scores, inst.base.p0, f.beta, k, f.monte_carlo, mc);
        row["tv"] = total_variation(est.estimate, limit);
        row["method"] = "monte-carlo";
        row["draws"] = f.monte_carlo;
      }
      t << num(row["k"]) << '\t' << num(row["tv"]) << '\t' << row["method"].get<std::string>() << '\n';
      rows.push_back(std::move(row));
    }
    Rng kl_rng = Rng(g.seed).derive("verify_kl", i);
    const auto kl = verify_kl_optimality(inst.scores, inst.base.p0, f.beta, f.trials, kl_rng);
    const bool decreasing = strictly_decreasing(exact_rows);
    ok = ok && decreasing && kl.holds();
    json inst_json = {{"instance", i},
                      {"rows", rows},
                      {"tv_strictly_decreasing", decreasing},
                      {"kl",
                       {{"limit_objective", kl.limit_objective},
                        {"base_objective", kl.base_objective},
                        {"best_other", kl.best_other},
                        {"trials", kl.trials},
                        {"violations", kl.violations},
                        {"margin", kl.margin},
                        {"holds", kl.holds()}}}};
    t << "TV strictly decreasing: " << (decreasing ? "yes" : "no") << '\n'
      << "KL objective: limit " << num(inst_json["kl"]["limit_objective"]) << ", base "
      << num(inst_json["kl"]["base_objective"]) << ", best perturbed " << num(inst_json["kl"]["best_other"])
      << ", margin " << num(inst_json["kl"]["margin"]) << ", violations " << kl.violations << '/'
      << kl.trials << '\n';
    instances.push_back(std::move(inst_json));
  }
  t << (ok ? "verification passed\n" : "verification FAILED\n");

  CommandResult r;
  r.report = {{"actions", f.actions}, {"dim", f.dim}, {"beta", f.beta}, {"passed", ok}, {"instances", instances}};
  r.config = {{"actions", f.actions}, {"dim", f.dim}, {"beta", f.beta}, {"k", f.ks},
              {"instances", f.instances}, {"trials", f.trials}, {"clip", f.clip},
              {"constant_probe", f.constant_probe}, {"guard", f.guard}, {"monte_carlo", f.monte_carlo},
              {"name", f.name}};
  const auto out_path = output_path(g, f.name + ".json");
  write_text(out_path, r.report.dump(1) + '\n');
  r.outputs = {out_path.filename().string()};
  r.text = t.str();
  r.exit_code = ok ? 0 : 1;
  return r;
}

// ---------------------------------------------------------------------------

void emit(const Globals& g, const std::string& subcommand, const CommandResult& r) {
  json manifest = {{"qprobe_run", 1},
                   {"subcommand", subcommand},
                   {"seed", g.seed},
                   {"threads", g.threads},
                   {"output_dir", g.output_dir},
                   {"config", r.config},
                   {"outputs", r.outputs},
                   {"exit_code", r.exit_code}};
  write_text(output_path(g, subcommand + ".run.json"), manifest.dump(1) + '\n');
  if (g.json_output) {
    std::cout << r.report.dump(2) << '\n';
  } else {
    std::cout << r.text;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Q-probe reranking toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "root seed for every random stream")->capture_default_str();
  app.add_option("--output-dir", g.output_dir, "directory for written files")->capture_default_str();
  app.add_flag("--json", g.json_output, "machine-readable output on stdout");
  app.add_option("--threads", g.threads, "worker threads for evaluation")
      ->check(CLI::Range(std::size_t{1}, std::size_t{256}))
      ->capture_default_str();

  GenFlags gen;
  auto* gen_cmd = app.add_subcommand("gen", "generate a synthetic task and its training data");
  gen_cmd->add_option("--prompts", gen.spec.n_prompts)->capture_default_str();
  gen_cmd->add_option("--actions", gen.spec.actions_per_prompt)->capture_default_str();
  gen_cmd->add_option("--dim", gen.spec.dim)->capture_default_str();
  gen_cmd->add_option("--reward", gen.reward, "binary-linear | continuous-linear | preference-bt")
      ->capture_default_str();
  gen_cmd->add_option("--temperature", gen.spec.base_temperature, "base policy temperature")
      ->capture_default_str();
  gen_cmd->add_option("--noise", gen.spec.noise_scale, "reward noise scale")->capture_default_str();
  gen_cmd->add_option("--reward-scale", gen.spec.reward_scale, "norm of the hidden reward direction")
      ->capture_default_str();
  gen_cmd->add_option("--success-min", gen.spec.success_min)->capture_default_str();
  gen_cmd->add_option("--success-max", gen.spec.success_max)->capture_default_str();
  gen_cmd->add_option("--difficulty-alignment", gen.spec.difficulty_alignment)->capture_default_str();
  gen_cmd->add_option("--samples-per-prompt", gen.samples_per_prompt, "exported samples (pairs) per prompt")
      ->capture_default_str();
  gen_cmd->add_option("--name", gen.name, "output file stem")->capture_default_str();

  TrainFlags train_flags;
  std::string train_data;
  std::string train_name = "probe";
  auto* train_cmd = app.add_subcommand("train", "train a probe on a dataset");
  train_cmd->add_option("--data", train_data, "dataset manifest (.jsonl)")->required();
  train_cmd->add_option("--name", train_name, "output file stem")->capture_default_str();
  train_cmd->add_flag("--timing", train_flags.timing, "record wall time in the report");
  add_train_flags(train_cmd, train_flags, true);

  RerankFlags rerank;
  auto* rerank_cmd = app.add_subcommand("rerank", "select one completion per prompt with a probe");
  rerank_cmd->add_option("--probe", rerank.probe, "probe file")->required();
  rerank_cmd->add_option("--candidates", rerank.candidates, "candidate dataset manifest")->required();
  rerank_cmd->add_option("--k", rerank.k, "candidates per prompt (0 = all)")->capture_default_str();
  rerank_cmd->add_option("--beta", rerank.beta, "selection temperature (0 = argmax)")->capture_default_str();
  rerank_cmd->add_option("--name", rerank.name, "output file stem")->capture_default_str();

  EvalFlags eval;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a selector on a synthetic task");
  eval_cmd->add_option("--task", eval.task, "task manifest (.task.json)")->required();
  add_selector_flags(eval_cmd, eval.selector);
  eval_cmd->add_option("--k", eval.k, "candidates per episode")->capture_default_str();
  eval_cmd->add_option("--beta", eval.beta, "selection temperature (default 0.1; 0 for preference tasks)");
  eval_cmd->add_option("--episodes", eval.episodes)->capture_default_str();
  eval_cmd->add_flag("--no-pass-at-k", eval.no_pass_at_k, "skip pass@k on binary tasks");
  eval_cmd->add_option("--bootstrap", eval.bootstrap, "bootstrap resamples")->capture_default_str();
  eval_cmd->add_option("--name", eval.name, "output file stem (default eval)");

  SweepFlags sweep;
  auto* sweep_cmd = app.add_subcommand("sweep", "sweep k, or sweep training-set size with --sizes");
  sweep_cmd->add_option("--task", sweep.eval.task, "task manifest (.task.json)")->required();
  add_selector_flags(sweep_cmd, sweep.eval.selector);
  sweep_cmd->add_option("--k", sweep.ks, "k schedule (k mode)")->delimiter(',')->capture_default_str();
  sweep_cmd->add_option("--eval-k", sweep.eval.k, "candidates per episode (data mode)")->capture_default_str();
  sweep_cmd->add_option("--select-beta", sweep.eval.beta,
                        "selection temperature (default 0.1; 0 for preference tasks)");
  sweep_cmd->add_option("--episodes", sweep.eval.episodes)->capture_default_str();
  sweep_cmd->add_flag("--no-pass-at-k", sweep.eval.no_pass_at_k);
  sweep_cmd->add_option("--bootstrap", sweep.eval.bootstrap)->capture_default_str();
  sweep_cmd->add_option("--sizes", sweep.sizes, "prompt counts (data mode)")->delimiter(',');
  sweep_cmd->add_option("--losses", sweep.losses, "losses to compare (data mode)")
      ->delimiter(',')
      ->capture_default_str();
  sweep_cmd->add_option("--trials", sweep.trials)->capture_default_str();
  sweep_cmd->add_option("--samples-per-prompt", sweep.samples_per_prompt)->capture_default_str();
  sweep_cmd->add_option("--name", sweep.eval.name, "output file stem (default sweep)");
  add_train_flags(sweep_cmd, sweep.train, false);

  VerifyFlags verify;
  auto* verify_cmd = app.add_subcommand("verify", "check the large-k limit and its optimality exactly");
  verify_cmd->add_option("--actions", verify.actions)->capture_default_str();
  verify_cmd->add_option("--dim", verify.dim)->capture_default_str();
  verify_cmd->add_option("--beta", verify.beta)->capture_default_str();
  verify_cmd->add_option("--k", verify.ks, "k schedule")->delimiter(',')->capture_default_str();
  verify_cmd->add_option("--instances", verify.instances)->capture_default_str();
  verify_cmd->add_option("--trials", verify.trials, "perturbed distributions per instance")
      ->capture_default_str();
  verify_cmd->add_option("--clip", verify.clip, "clip probe scores to [-clip, clip]")->capture_default_str();
  verify_cmd->add_flag("--constant-probe", verify.constant_probe, "use an all-zero probe");
  verify_cmd->add_option("--guard", verify.guard, "largest number of count vectors to enumerate")
      ->capture_default_str();
  verify_cmd->add_option("--monte-carlo", verify.monte_carlo,
                         "estimate k values beyond the guard with this many draws")
      ->capture_default_str();
  verify_cmd->add_option("--name", verify.name, "output file stem")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    fs::create_directories(g.output_dir);
    CommandResult r;
    std::string name;
    if (*gen_cmd) {
      name = "gen";
      r = run_gen(g, gen);
    } else if (*train_cmd) {
      name = "train";
      r = run_train(g, train_flags, train_data, train_name);
    } else if (*rerank_cmd) {
      name = "rerank";
      r = run_rerank(g, rerank);
    } else if (*eval_cmd) {
      name = "eval";
      r = run_eval(g, eval);
    } else if (*sweep_cmd) {
      name = "sweep";
      r = run_sweep(g, sweep);
    } else {
      name = "verify";
      r = run_verify(g, verify);
    }
    emit(g, name, r);
    return r.exit_code;
  } catch (const ResourceError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const InternalError& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 1;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 1;
  }
}
