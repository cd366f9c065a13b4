#pragma once

#include <string>
#include <vector>

#include "flowalign/dataworld.hpp"
#include "flowalign/trainlab.hpp"

namespace flowalign {

// Flat key=value experiment configuration with dotted section prefixes.
// Every key has a default; unknown keys are rejected; serialization is
// canonical so parse(serialize(c)) round-trips exactly.
struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::string out_dir = "out";

  SceneSpec scene;
  ModelShape model;  // state/cond dims are derived from the scene

  struct Pretrain {
    int steps = 6000;
    int batch_size = 64;
    double learning_rate = 1e-3;
    double corrupt_prob = 0.5;
  } pretrain;

  struct Curate {
    int n_candidates = 256;
    int k_per_condition = 4;
    double threshold = 0.9;
    double bad_threshold = 0.15;
    int ode_steps = 64;
  } curate;

  TrainConfig train;

  EvalConfig eval;
  int eval_alignment_cap = 128;  // alignment set truncation for speed
  int eval_retention = 256;      // held-out clean entries

  struct Sweep {
    std::vector<double> beta_grid{30.0, 300.0, 3000.0};
    std::vector<double> lambda_grid{0.0, 1.0, 10.0};
    std::vector<ObjectiveKind> objectives{
        ObjectiveKind::ipa,     ObjectiveKind::ipa_halo, ObjectiveKind::sft,
        ObjectiveKind::sft_l2,  ObjectiveKind::pos_dpo,  ObjectiveKind::kto,
        ObjectiveKind::paired_dpo};
  } sweep;

  void validate() const;
  std::string serialize() const;
  static ExperimentConfig parse(const std::string& text);
  static ExperimentConfig load(const std::string& path);
  void save(const std::string& path) const;
};

}  // namespace flowalign
