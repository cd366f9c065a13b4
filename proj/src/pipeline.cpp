#include "flowalign/pipeline.hpp"

#include <filesystem>
#include <sstream>

namespace fs = std::filesystem;

namespace flowalign {

namespace {

std::vector<PrefEntry> to_entries(const std::vector<std::pair<Vec, Vec>>& data,
                                  const SceneSpec& spec) {
  const Mask mask = hand_mask(spec);
  std::vector<PrefEntry> out;
  out.reserve(data.size());
  for (const auto& [z, c] : data) {
    PrefEntry e;
    e.z1 = z;
    e.c = c;
    e.mask = mask;
    e.score = 1.0;
    out.push_back(std::move(e));
  }
  return out;
}

void write_csv(const std::string& path, const CsvTable& table) {
  write_text_file(path, table.to_string());
}

std::vector<double> csv_numbers(const CsvTable& t, const std::string& column) {
  const int ix = csv_column(t, column);
  std::vector<double> out;
  out.reserve(t.rows.size());
  for (const auto& row : t.rows) out.push_back(std::strtod(row[static_cast<std::size_t>(ix)].c_str(), nullptr));
  return out;
}

void plot_from_train_log(const std::string& out_dir) {
  const std::string log_path = out_dir + "/train_log.csv";
  if (!fs::exists(log_path)) return;
  const CsvTable t = read_csv(log_path);
  const std::vector<double> steps = csv_numbers(t, "step");
  const struct {
    const char* column;
    const char* file;
    const char* title;
  } charts[] = {
      {"loss", "loss.svg", "training loss"},
      {"delta", "delta.svg", "delta estimate (fixed probe)"},
      {"grad_norm", "grad_norm.svg", "gradient norm"},
      {"param_dev", "param_dev.svg", "parameter deviation from reference"},
  };
  for (const auto& ch : charts) {
    ChartSeries s{ch.column, steps, csv_numbers(t, ch.column)};
    write_text_file(out_dir + "/plots/" + ch.file,
                    line_chart(ch.title, "step", ch.column, {s}));
  }
}

void plot_from_sweep(const std::string& out_dir, const std::string& csv_name,
                     const std::string& param) {
  const std::string path = out_dir + "/" + csv_name;
  if (!fs::exists(path)) return;
  const CsvTable t = read_csv(path);
  const std::vector<double> x = csv_numbers(t, param);
  for (const char* col : {"alignment", "retention", "hand_err", "param_dev"}) {
    ChartSeries s{col, x, csv_numbers(t, col)};
    write_text_file(out_dir + "/plots/sweep_" + std::string(col) + ".svg",
                    line_chart(param + " sweep", param, col, {s}));
  }
}

}  // namespace

StageSeeds StageSeeds::from(std::uint64_t seed) {
  std::uint64_t s = seed;
  StageSeeds out{};
  out.pretrain = util::splitmix64(s);
  out.curate = util::splitmix64(s);
  out.train = util::splitmix64(s);
  out.retention = util::splitmix64(s);
  out.eval = util::splitmix64(s);
  return out;
}

WorldArtifacts build_world(const ExperimentConfig& cfg) {
  cfg.validate();
  const StageSeeds seeds = StageSeeds::from(cfg.seed);

  PretrainConfig pc;
  pc.steps = cfg.pretrain.steps;
  pc.batch_size = cfg.pretrain.batch_size;
  pc.learning_rate = cfg.pretrain.learning_rate;
  pc.corrupt_prob = cfg.pretrain.corrupt_prob;
  pc.seed = seeds.pretrain;
  pc.shape = cfg.model;

  PretrainResult pre = pretrain_base(cfg.scene, pc);
  WorldArtifacts world{pre.model.frozen_copy(), {}, {}, std::move(pre.log)};

  world.curation = curate(world.reference, cfg.scene, cfg.curate.n_candidates,
                          cfg.curate.k_per_condition, cfg.curate.threshold, seeds.curate,
                          cfg.curate.ode_steps, cfg.curate.bad_threshold);

  world.evals.spec = cfg.scene;
  const auto& curated = world.curation.curated.entries;
  const int cap = std::min<int>(cfg.eval_alignment_cap, static_cast<int>(curated.size()));
  world.evals.alignment_set.assign(curated.begin(), curated.begin() + cap);
  world.evals.retention_set =
      to_entries(generate_dataset(cfg.scene, cfg.eval_retention, seeds.retention), cfg.scene);
  return world;
}

PipelineResult run_pipeline(const ExperimentConfig& cfg) {
  cfg.validate();
  const StageSeeds seeds = StageSeeds::from(cfg.seed);
  const std::string out = cfg.out_dir;
  fs::create_directories(out + "/plots");

  cfg.save(out + "/config.txt");

  WorldArtifacts world = build_world(cfg);
  world.reference.save(out + "/reference.ckpt");
  write_csv(out + "/pretrain_log.csv", pretrain_log_csv(world.pretrain_log));

  write_text_file(out + "/curation_audit.txt", world.curation.audit.to_text());
  write_text_file(out + "/curation_scores.csv", scores_to_csv(world.curation.scores));
  save_preference_set(out + "/curated.prefset", cfg.scene, world.curation.curated,
                      &world.curation.audit);
  save_preference_set(out + "/pairs_winners.prefset", cfg.scene, world.curation.winners, nullptr);
  save_preference_set(out + "/pairs_losers.prefset", cfg.scene, world.curation.losers, nullptr);
  save_preference_set(out + "/unpaired_bad.prefset", cfg.scene, world.curation.unpaired_bad,
                      nullptr);
  {
    SceneSpec spec_copy = cfg.scene;
    std::vector<std::pair<Vec, Vec>> retention;
    retention.reserve(world.evals.retention_set.size());
    for (const auto& e : world.evals.retention_set) retention.emplace_back(e.z1, e.c);
    save_dataset(out + "/retention_eval.dataset", spec_copy, retention);
  }

  if (world.curation.curated.entries.empty())
    throw std::runtime_error(
        "pipeline: curation produced an empty set (status=empty_curated_set); lower "
        "curate.threshold or increase curate.n_candidates");

  VelocityField policy =
      world.reference.spawn_policy(cfg.train.adapter_rank, seeds.train ^ 0xada9cedull);

  TrainConfig tc = cfg.train;
  tc.seed = seeds.train;
  TrainData data;
  data.good = &world.curation.curated.entries;
  data.winners = &world.curation.winners.entries;
  data.losers = &world.curation.losers.entries;
  data.bad = &world.curation.unpaired_bad.entries;

  PipelineResult result;
  result.audit = world.curation.audit;
  result.run = train(policy, world.reference, data, tc, &world.evals, &cfg.eval);

  policy.save(out + "/policy.ckpt");
  if (policy.has_adapter()) adapter_merge(policy).save(out + "/policy_merged.ckpt");

  write_csv(out + "/train_log.csv", train_log_csv(result.run, {}));
  write_csv(out + "/eval_log.csv", eval_log_csv(result.run));

  result.reference_metrics =
      evaluate(world.reference, world.reference, world.evals, cfg.scene, cfg.eval);
  result.policy_metrics = evaluate(policy, world.reference, world.evals, cfg.scene, cfg.eval);
  write_csv(out + "/metrics.csv", metrics_csv(result.reference_metrics, result.policy_metrics));

  render_plots(out);
  return result;
}

void render_plots(const std::string& out_dir) {
  fs::create_directories(out_dir + "/plots");
  plot_from_train_log(out_dir);
  plot_from_sweep(out_dir, "sweep_beta.csv", "beta");
  plot_from_sweep(out_dir, "sweep_lambda.csv", "lambda");
}

int run_sweep_command(const ExperimentConfig& cfg, const std::string& kind, int jobs,
                      std::string* rendered_table) {
  cfg.validate();
  const StageSeeds seeds = StageSeeds::from(cfg.seed);
  const std::string out = cfg.out_dir;
  fs::create_directories(out + "/plots");
  cfg.save(out + "/config.txt");

  WorldArtifacts world = build_world(cfg);
  if (world.curation.curated.entries.empty())
    throw std::runtime_error(
        "sweep: curation produced an empty set; lower curate.threshold or increase "
        "curate.n_candidates");

  TrainConfig tc = cfg.train;
  tc.seed = seeds.train;
  TrainData data;
  data.good = &world.curation.curated.entries;
  data.winners = &world.curation.winners.entries;
  data.losers = &world.curation.losers.entries;
  data.bad = &world.curation.unpaired_bad.entries;

  CsvTable table;
  if (kind == "beta") {
    const auto rows = sweep_beta(world.reference, data, world.evals, cfg.scene, tc,
                                 cfg.sweep.beta_grid, jobs);
    table = sweep_csv("beta", rows);
    write_csv(out + "/sweep_beta.csv", table);
  } else if (kind == "lambda") {
    const auto rows = sweep_lambda(world.reference, data, world.evals, cfg.scene, tc,
                                   cfg.sweep.lambda_grid, jobs);
    table = sweep_csv("lambda", rows);
    write_csv(out + "/sweep_lambda.csv", table);
  } else if (kind == "objectives") {
    const auto cmp = compare_objectives(world.reference, world.curation, world.evals, cfg.scene,
                                        tc, cfg.sweep.objectives, jobs);
    table = comparison_csv(cmp);
    write_csv(out + "/comparison.csv", table);
  } else {
    throw std::invalid_argument("sweep: unknown kind '" + kind +
                                "' (expected beta, lambda, or objectives)");
  }

  render_plots(out);
  if (rendered_table != nullptr) *rendered_table = render_table(table.header, table.rows);
  return 0;
}

}  // namespace flowalign
