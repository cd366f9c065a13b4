// flowalign: desk-scale lab for preference alignment of rectified-flow models.
//
// Subcommands:
//   verify    run the numerical verification suite (no artifacts needed)
//   pipeline  pretrain -> curate -> align -> evaluate, writing all artifacts
//   sweep     beta / lambda / objectives sweeps with CSV + plot output
//   curate    run only the curation stage against a checkpoint
//   evaluate  metric report for a policy/reference checkpoint pair
//
// Exit codes: 0 success, 1 check failure, 2 usage error, 3 data error.

#include <filesystem>
#include <iostream>

#include <CLI11.hpp>

#include "flowalign/pipeline.hpp"
#include "flowalign/verify.hpp"

namespace fs = std::filesystem;
using namespace flowalign;

namespace {

ExperimentConfig load_config(const std::string& path, std::uint64_t seed_override,
                             bool has_seed, const std::string& out_override) {
  ExperimentConfig cfg =
      path.empty() ? ExperimentConfig{} : ExperimentConfig::load(path);
  if (has_seed) cfg.seed = seed_override;
  if (!out_override.empty()) cfg.out_dir = out_override;
  cfg.validate();
  return cfg;
}

int cmd_verify(std::uint64_t seed, bool json, int coords, long mc) {
  VerifyOptions opts;
  opts.seed = seed;
  opts.grad_coords = coords;
  opts.kl_mc = mc;
  const VerifyReport report = run_verification(opts);
  std::cout << (json ? report.to_json() : report.to_text());
  if (!report.all_pass()) {
    const CheckResult* f = report.first_failure();
    std::cerr << "first failing check: " << (f ? f->name : "?") << "\n";
    return 1;
  }
  return 0;
}

int cmd_pipeline(const ExperimentConfig& cfg) {
  const PipelineResult result = run_pipeline(cfg);
  std::cout << result.audit.to_text();
  const CsvTable metrics = metrics_csv(result.reference_metrics, result.policy_metrics);
  std::cout << render_table(metrics.header, metrics.rows);
  std::cout << "artifacts written to " << cfg.out_dir << "\n";
  return 0;
}

int cmd_curate_only(const ExperimentConfig& cfg, const std::string& model_path) {
  fs::create_directories(cfg.out_dir);
  VelocityField model = model_path.empty()
                            ? build_world(cfg).reference
                            : VelocityField::load(model_path);
  const StageSeeds seeds = StageSeeds::from(cfg.seed);
  const CurationResult cur =
      curate(model, cfg.scene, cfg.curate.n_candidates, cfg.curate.k_per_condition,
             cfg.curate.threshold, seeds.curate, cfg.curate.ode_steps,
             cfg.curate.bad_threshold);
  write_text_file(cfg.out_dir + "/curation_audit.txt", cur.audit.to_text());
  write_text_file(cfg.out_dir + "/curation_scores.csv", scores_to_csv(cur.scores));
  save_preference_set(cfg.out_dir + "/curated.prefset", cfg.scene, cur.curated, &cur.audit);
  save_preference_set(cfg.out_dir + "/pairs_winners.prefset", cfg.scene, cur.winners, nullptr);
  save_preference_set(cfg.out_dir + "/pairs_losers.prefset", cfg.scene, cur.losers, nullptr);
  save_preference_set(cfg.out_dir + "/unpaired_bad.prefset", cfg.scene, cur.unpaired_bad,
                      nullptr);
  std::cout << cur.audit.to_text();
  if (cur.audit.status != "ok") {
    std::cerr << "curation produced no entries above threshold "
              << cfg.curate.threshold << "; lower curate.threshold\n";
    return 3;
  }
  return 0;
}

int cmd_evaluate(const ExperimentConfig& cfg, const std::string& policy_path,
                 const std::string& reference_path, const std::string& curated_path) {
  fs::create_directories(cfg.out_dir);
  const VelocityField policy = VelocityField::load(policy_path);
  const VelocityField reference = VelocityField::load(reference_path);
  const StageSeeds seeds = StageSeeds::from(cfg.seed);

  EvalSets evals;
  evals.spec = cfg.scene;
  SceneSpec stored;
  const PreferenceSet curated = load_preference_set(curated_path, &stored);
  if (!(stored == cfg.scene))
    throw std::runtime_error("evaluate: preference set scene does not match config scene");
  if (curated.entries.empty()) throw std::runtime_error("evaluate: empty preference set");
  const int cap = std::min<int>(cfg.eval_alignment_cap,
                                static_cast<int>(curated.entries.size()));
  evals.alignment_set.assign(curated.entries.begin(), curated.entries.begin() + cap);
  const Mask mask = hand_mask(cfg.scene);
  for (const auto& [z, c] : generate_dataset(cfg.scene, cfg.eval_retention, seeds.retention)) {
    PrefEntry e;
    e.z1 = z;
    e.c = c;
    e.mask = mask;
    e.score = 1.0;
    evals.retention_set.push_back(std::move(e));
  }

  const MetricReport ref_m = evaluate(reference, reference, evals, cfg.scene, cfg.eval);
  const MetricReport pol_m = evaluate(policy, reference, evals, cfg.scene, cfg.eval);
  const CsvTable metrics = metrics_csv(ref_m, pol_m);
  write_text_file(cfg.out_dir + "/metrics.csv", metrics.to_string());
  std::cout << render_table(metrics.header, metrics.rows);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"flowalign: preference alignment lab for rectified-flow models"};
  app.require_subcommand(1);

  std::string config_path, out_dir, model_path, policy_path, reference_path, curated_path;
  std::string sweep_kind;
  std::uint64_t seed = 0;
  bool json = false;
  int jobs = 1;
  int coords = 100;
  long mc = 200000;

  auto* verify = app.add_subcommand("verify", "run the numerical verification suite");
  verify->add_flag("--json", json, "machine-readable report");
  auto* verify_seed = verify->add_option("--seed", seed, "verification seed");
  verify->add_option("--coords", coords, "coordinates per gradient check")
      ->check(CLI::PositiveNumber);
  verify->add_option("--mc", mc, "Monte Carlo samples for the KL rate identity")
      ->check(CLI::Range(100000L, 100000000L));

  auto* pipeline = app.add_subcommand("pipeline", "run pretrain/curate/align/evaluate");
  pipeline->add_option("--config", config_path, "experiment config file");
  auto* pipe_seed = pipeline->add_option("--seed", seed, "seed override");
  pipeline->add_option("--out", out_dir, "output directory override");

  auto* sweep = app.add_subcommand("sweep", "run a beta/lambda/objectives sweep");
  sweep->add_option("--kind", sweep_kind, "beta, lambda, or objectives")->required();
  sweep->add_option("--config", config_path, "experiment config file");
  auto* sweep_seed = sweep->add_option("--seed", seed, "seed override");
  sweep->add_option("--out", out_dir, "output directory override");
  sweep->add_option("--jobs", jobs, "concurrent sweep members")->check(CLI::PositiveNumber);

  auto* curate_cmd = app.add_subcommand("curate", "run the curation stage only");
  curate_cmd->add_option("--config", config_path, "experiment config file");
  auto* curate_seed = curate_cmd->add_option("--seed", seed, "seed override");
  curate_cmd->add_option("--out", out_dir, "output directory override");
  curate_cmd->add_option("--model", model_path, "checkpoint to curate from (default: pretrain)");

  auto* eval_cmd = app.add_subcommand("evaluate", "evaluate checkpoints");
  eval_cmd->add_option("--config", config_path, "experiment config file");
  auto* eval_seed = eval_cmd->add_option("--seed", seed, "seed override");
  eval_cmd->add_option("--out", out_dir, "output directory override");
  eval_cmd->add_option("--policy", policy_path, "policy checkpoint")->required();
  eval_cmd->add_option("--reference", reference_path, "reference checkpoint")->required();
  eval_cmd->add_option("--curated", curated_path, "curated preference set")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return (app.exit(e) == 0) ? 0 : 2;
  }

  try {
    if (verify->parsed())
      return cmd_verify(verify_seed->count() ? seed : 1, json, coords, mc);
    if (pipeline->parsed())
      return cmd_pipeline(
          load_config(config_path, seed, pipe_seed->count() > 0, out_dir));
    if (sweep->parsed()) {
      std::string table;
      const int rc = run_sweep_command(
          load_config(config_path, seed, sweep_seed->count() > 0, out_dir), sweep_kind, jobs,
          &table);
      std::cout << table;
      return rc;
    }
    if (curate_cmd->parsed())
      return cmd_curate_only(load_config(config_path, seed, curate_seed->count() > 0, out_dir),
                             model_path);
    if (eval_cmd->parsed())
      return cmd_evaluate(load_config(config_path, seed, eval_seed->count() > 0, out_dir),
                          policy_path, reference_path, curated_path);
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 2;
}
