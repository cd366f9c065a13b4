#pragma once

#include <optional>
#include <string>
#include <vector>

#include "flowalign/dataworld.hpp"
#include "flowalign/objectives.hpp"
#include "flowalign/oracles.hpp"
#include "flowalign/report.hpp"

namespace flowalign {

enum class OptimizerKind { sgd, adam };
std::string optimizer_name(OptimizerKind k);
OptimizerKind optimizer_from_name(const std::string& name);

struct TrainConfig {
  ObjectiveConfig objective;
  int steps = 1000;
  int batch_size = 64;
  double learning_rate = 2e-2;
  OptimizerKind optimizer = OptimizerKind::sgd;
  std::uint64_t seed = 1;
  int adapter_rank = 8;
  int eval_every = 100;
  // Fixed probe used for the per-step delta trace (smooth, comparable
  // across steps because entries, z0 draws and the t-grid never change).
  int delta_probe_entries = 16;
  int delta_probe_tgrid = 4;

  void validate() const;
};

struct StepRow {
  int step = 0;
  double loss = 0.0;
  double delta = 0.0;
  double grad_norm = 0.0;
  double param_dev = 0.0;
};

struct EvalRow {
  int step = 0;
  double alignment = 0.0;
  double retention = 0.0;
  double hand_err = 0.0;
  double body_err = 0.0;
  double delta = 0.0;
  double delta_se = 0.0;
};

struct RunRecord {
  std::vector<StepRow> steps;
  std::vector<EvalRow> evals;
  DeltaEstimate delta_final;
  double final_param_dev = 0.0;
  bool diverged = false;
  int divergence_step = -1;
};

// Alignment is measured against curated preference data, retention against
// held-out clean data; hand_err/body_err split the retention error with the
// training hand mask (the held-out hand-region metric the weighting
// targets).
struct MetricReport {
  double alignment = 0.0;
  double retention = 0.0;
  double hand_err = 0.0;
  double body_err = 0.0;
  DeltaEstimate delta_final;
  double param_dev = 0.0;
};

struct EvalSets {
  SceneSpec spec;
  std::vector<PrefEntry> alignment_set;
  std::vector<PrefEntry> retention_set;
};

struct EvalConfig {
  int t_grid = 16;
  int z0_draws = 4;
  long delta_samples = 2048;
  std::uint64_t seed = 7;
};

struct TrainData {
  const std::vector<PrefEntry>* good = nullptr;
  const std::vector<PrefEntry>* winners = nullptr;
  const std::vector<PrefEntry>* losers = nullptr;
  const std::vector<PrefEntry>* bad = nullptr;
};

// Runs the configured objective; deterministic given the seed. The policy is
// expected to start at the reference (fresh adapter). Optional eval sets add
// periodic metric rows to the record.
RunRecord train(VelocityField& policy, const VelocityField& reference, const TrainData& data,
                const TrainConfig& config, const EvalSets* evals = nullptr,
                const EvalConfig* eval_config = nullptr);

MetricReport evaluate(const VelocityField& policy, const VelocityField& reference,
                      const EvalSets& sets, const SceneSpec& spec,
                      const EvalConfig& config = EvalConfig{});

// Deterministic-quadrature velocity error of an arbitrary field against a
// set of (z1, c) entries; the masked variant restricts the error to mask==1
// coordinates. Exposed so closed-form fields can be measured in tests.
double field_flow_error(const VelocityFn2& field, std::span<const PrefEntry> entries,
                        const Mask* restrict_to, int t_grid, int z0_draws, std::uint64_t seed);

struct PretrainConfig {
  int steps = 4000;
  int batch_size = 64;
  double learning_rate = 1e-3;
  double corrupt_prob = 0.5;
  std::uint64_t seed = 11;
  ModelShape shape;
};

struct PretrainResult {
  VelocityField model;  // policy role, fully trained parameters
  std::vector<StepRow> log;
};

// Trains a fresh base model with the plain velocity-matching objective on a
// mixture of clean and hand-corrupted draws, manufacturing a prior that is
// solid on body coordinates but unreliable on hands.
PretrainResult pretrain_base(const SceneSpec& spec, const PretrainConfig& config);

struct SweepRow {
  double value = 0.0;  // the swept beta or lambda
  MetricReport metrics;
  double final_loss = 0.0;
  RunRecord record;
};

std::vector<SweepRow> sweep_beta(const VelocityField& reference, const TrainData& data,
                                 const EvalSets& evals, const SceneSpec& spec,
                                 const TrainConfig& base, std::span<const double> beta_grid,
                                 int jobs = 1);

std::vector<SweepRow> sweep_lambda(const VelocityField& reference, const TrainData& data,
                                   const EvalSets& evals, const SceneSpec& spec,
                                   const TrainConfig& base, std::span<const double> lambda_grid,
                                   int jobs = 1);

struct ObjectiveRow {
  ObjectiveKind kind = ObjectiveKind::ipa;
  std::string status;  // "ok" or the reason the run was skipped
  MetricReport metrics;
  double final_loss = 0.0;
  RunRecord record;
};

struct ObjectiveComparison {
  std::vector<ObjectiveRow> rows;
  int pair_yield = 0;
  int bad_yield = 0;
};

// Trains each objective from the same frozen reference under a matched step
// and batch budget on the same curated data. paired_dpo is skipped with a
// status when no strict pairs exist; kto when no bad samples exist.
ObjectiveComparison compare_objectives(const VelocityField& reference,
                                       const CurationResult& data, const EvalSets& evals,
                                       const SceneSpec& spec, const TrainConfig& base,
                                       std::span<const ObjectiveKind> kinds, int jobs = 1);

// --- telemetry rendering -------------------------------------------------

CsvTable train_log_csv(const RunRecord& record, const std::vector<std::string>& header_comments);
CsvTable eval_log_csv(const RunRecord& record);
CsvTable pretrain_log_csv(const std::vector<StepRow>& log);
CsvTable metrics_csv(const MetricReport& reference_metrics, const MetricReport& policy_metrics);
CsvTable sweep_csv(const std::string& param_name, const std::vector<SweepRow>& rows);
CsvTable comparison_csv(const ObjectiveComparison& cmp);

// Runs tasks 0..n-1 on up to `jobs` threads; results are independent of the
// schedule because every task only touches its own slot.
void parallel_for(int n, int jobs, const std::function<void(int)>& fn);

}  // namespace flowalign
