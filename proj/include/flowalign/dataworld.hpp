#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "flowalign/flowcore.hpp"

namespace flowalign {

// Synthetic conditioned-generation domain. A state is n_body smooth
// coordinates followed by n_hand "hand" coordinates. Hand dimensions come in
// cos/sin pairs: per condition the clean law places them exactly on one of
// n_modes ring positions whose rotation and radius depend smoothly on the
// condition, so the conditional hand law is sharply multimodal while body
// dimensions follow a smooth unimodal law.
struct SceneSpec {
  int n_body = 6;
  int n_hand = 2;  // must be even
  int cond_dim = 4;
  int n_modes = 4;
  double body_noise = 2.5;    // body coordinates carry broad, irreducible spread
  double ring_radius = 1.0;
  double ring_radius_span = 0.2;
  double blur_sigma = 0.65;   // corruption blur scale at severity 1
  double score_norm = 1.0;    // hand distance whose square maps to quality 0
  double mode_flip_prob = 0.02;  // chance a clean draw uses a random mode
  std::uint64_t world_seed = 99;

  int state_dim() const { return n_body + n_hand; }
  void validate() const;
  bool operator==(const SceneSpec&) const = default;
};

Mask hand_mask(const SceneSpec& spec);

// Deterministic maps derived from the spec (body response and ring layout).
class SceneModel {
 public:
  explicit SceneModel(const SceneSpec& spec);

  const SceneSpec& spec() const { return spec_; }
  Vec sample_condition(util::Rng& rng) const;
  Vec body_mean(const Vec& c) const;
  // Hand coordinates of mode k under condition c (all hand dims).
  Vec hand_mode(const Vec& c, int k) const;
  // Preferred mode of the condition; a small flip probability keeps the
  // choice stochastic.
  int preferred_mode(const Vec& c) const;
  int mode_index(const Vec& c, util::Rng& rng) const;
  Vec clean_sample(const Vec& c, util::Rng& rng) const;

 private:
  SceneSpec spec_;
  std::vector<Vec> body_w_;   // per body dim: linear response over c
  Vec body_phase_;
  std::vector<Vec> ring_rot_w_;     // per hand pair: rotation response
  std::vector<Vec> ring_radius_w_;  // per hand pair: radius response
  std::vector<Vec> mode_select_w_;  // per mode: preference response over c
};

struct QualityScore {
  double value = 0.0;  // in [0,1]; 1 iff hands sit exactly on a clean mode
  Vec hand_err;        // absolute per-dimension error against the best mode
};

enum class Provenance { self_generated_curated, paired_winner, paired_loser, unpaired_bad };
std::string provenance_name(Provenance p);

struct PrefEntry {
  Vec z1;
  Vec c;
  Mask mask;
  Provenance tag = Provenance::self_generated_curated;
  double score = 0.0;
};

struct PreferenceSet {
  std::vector<PrefEntry> entries;
  double threshold = 0.0;  // quality bar the curated entries passed
};

struct CurationAudit {
  int n_conditions = 0;
  int k_per_condition = 0;
  int n_candidates = 0;
  double threshold = 0.0;
  double bad_threshold = 0.0;
  int n_good = 0;
  int n_bad_strict = 0;
  int n_pairs = 0;  // strict winner/loser pairs (Case-4 analog)
  long case1_pairs = 0;
  long case2_pairs = 0;
  long case3_pairs = 0;
  long case4_pairs = 0;
  std::string status;  // "ok" or "empty_curated_set"

  std::string to_text() const;
};

struct ScoreRow {
  int condition = 0;
  int sample = 0;
  double score = 0.0;
  char band = 'm';  // 'g' good, 'b' strict bad, 'm' mixed
};

struct CurationResult {
  PreferenceSet curated;       // good-only entries
  PreferenceSet winners;       // strict pairs, aligned with losers
  PreferenceSet losers;
  PreferenceSet unpaired_bad;  // all strict-bad candidates
  CurationAudit audit;
  std::vector<ScoreRow> scores;
};

// n clean (z1, condition) pairs, deterministic in seed.
std::vector<std::pair<Vec, Vec>> generate_dataset(const SceneSpec& spec, int n,
                                                  std::uint64_t seed);

// Ring-mixing corruption of the hand block: rotates each hand pair part-way
// toward another mode position and adds blur, both scaled by severity. Body
// coordinates are returned untouched; severity 0 is the identity.
Vec corrupt_hands(const Vec& z, const SceneSpec& spec, double severity, std::uint64_t seed);

QualityScore quality_score(const Vec& z, const Vec& c, const SceneSpec& spec);

// Samples k endpoints per condition with sample_ode, scores them, and splits
// the candidates into good-only, strict winner/loser pairs, and unpaired bad
// sets. Zero survivors is reported through audit.status, never silently.
CurationResult curate(const VelocityField& model, const SceneSpec& spec, int n_candidates,
                      int k_per_condition, double threshold, std::uint64_t seed,
                      int ode_steps = 64, double bad_threshold = 0.5);

// Versioned text containers.
void save_dataset(const std::string& path, const SceneSpec& spec,
                  const std::vector<std::pair<Vec, Vec>>& data);
std::vector<std::pair<Vec, Vec>> load_dataset(const std::string& path, SceneSpec* spec_out);

void save_preference_set(const std::string& path, const SceneSpec& spec,
                         const PreferenceSet& set, const CurationAudit* audit);
PreferenceSet load_preference_set(const std::string& path, SceneSpec* spec_out);

std::string scores_to_csv(const std::vector<ScoreRow>& rows);

}  // namespace flowalign
