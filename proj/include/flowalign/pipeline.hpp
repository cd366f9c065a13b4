#pragma once

#include <string>

#include "flowalign/config.hpp"
#include "flowalign/trainlab.hpp"

namespace flowalign {

// Derived per-stage seeds so stages are independently reproducible.
struct StageSeeds {
  std::uint64_t pretrain, curate, train, retention, eval;
  static StageSeeds from(std::uint64_t seed);
};

struct PipelineResult {
  CurationAudit audit;
  MetricReport reference_metrics;
  MetricReport policy_metrics;
  RunRecord run;
};

// Full workflow: pretrain the base -> curate self-generated samples ->
// align the policy with the configured objective -> evaluate. All artifacts
// (checkpoints, datasets, preference sets, telemetry CSVs, plots) are written
// under cfg.out_dir; identical config+seed reproduces identical bytes.
PipelineResult run_pipeline(const ExperimentConfig& cfg);

// Shared building blocks (used by the sweep/curate/evaluate commands and the
// acceptance suite).
struct WorldArtifacts {
  VelocityField reference;
  CurationResult curation;
  EvalSets evals;
  std::vector<StepRow> pretrain_log;
};

WorldArtifacts build_world(const ExperimentConfig& cfg);

int run_sweep_command(const ExperimentConfig& cfg, const std::string& kind, int jobs,
                      std::string* rendered_table);

// Rebuilds every plot in out_dir/plots purely from the CSV files on disk.
void render_plots(const std::string& out_dir);

}  // namespace flowalign
