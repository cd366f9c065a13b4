#pragma once

#include <optional>
#include <span>
#include <string>

#include "flowalign/flowcore.hpp"

namespace flowalign {

// Per-coordinate weights w = 1 + lambda * mask. Squared errors are weighted
// by w, i.e. the sqrt(w) factor sits inside the norm.
struct SpatialWeight {
  double lambda = 0.0;
  Mask mask;
  Vec weights;
};

SpatialWeight make_spatial_weight(const Mask& mask, double lambda);

enum class ObjectiveKind { ipa, ipa_halo, pos_dpo, paired_dpo, sft, sft_l2, kto };

std::string objective_name(ObjectiveKind k);
ObjectiveKind objective_from_name(const std::string& name);
bool objective_uses_beta(ObjectiveKind k);

struct ObjectiveConfig {
  ObjectiveKind kind = ObjectiveKind::ipa;
  double beta = 300.0;
  double lambda = 10.0;        // hand-weight coefficient for the *_halo / sft kinds
  double kto_good_weight = 1.0;
  double kto_bad_weight = 1.0;
  int kto_ref_batch = 16;      // held batch size for the KTO reference point
  double sft_anchor = 1.0;     // coefficient of the L2 anchor term

  void validate() const;
};

// Time-weighted velocity-gap integrand
//   1/2 (1-t)^2 ( ||sqrt(w) . (v - v_ref)||^2 - ||sqrt(w) . (v - v_policy)||^2 )
// with w = 1 when no weight is given.
double delta_integrand(const VelocityField& policy, const VelocityField& reference,
                       const FlowSample& sample, const SpatialWeight* weight);

// -log sigmoid(beta * delta_integrand), averaged over the batch, with exact
// gradient w.r.t. the policy's trainable parameters. The reference receives
// no gradient.
LossGrad ipa_loss(const VelocityField& policy, const VelocityField& reference,
                  std::span<const FlowSample> batch, const ObjectiveConfig& config,
                  const SpatialWeight* weight);

// Same log-sigmoid loss without the 1/2 (1-t)^2 time factor.
LossGrad pos_dpo_loss(const VelocityField& policy, const VelocityField& reference,
                      std::span<const FlowSample> batch, const ObjectiveConfig& config);

// Winner/loser objective: -log sigmoid(beta * (d_win - d_lose)) with the time
// factor applied to both terms. Pairs must share (t, c).
LossGrad paired_dpo_loss(const VelocityField& policy, const VelocityField& reference,
                         std::span<const FlowSample> win_batch,
                         std::span<const FlowSample> lose_batch, const ObjectiveConfig& config);

LossGrad sft_loss(const VelocityField& policy, std::span<const FlowSample> batch,
                  const SpatialWeight* weight);

LossGrad sft_l2_anchor_loss(const VelocityField& policy, const VelocityField& reference,
                            std::span<const FlowSample> batch, double anchor_coeff,
                            const SpatialWeight* weight);

// Unpaired objective: desirable term -log sigmoid(beta (d_good - z_ref)) and
// undesirable term -log sigmoid(beta (z_ref - d_bad)), where z_ref is the
// mean integrand over ref_batch clipped at 0 and treated as a constant.
// Terms are combined as a weighted per-sample mean so the anchor at
// policy == reference is exactly ln 2.
LossGrad kto_loss(const VelocityField& policy, const VelocityField& reference,
                  std::span<const FlowSample> good_batch, std::span<const FlowSample> bad_batch,
                  std::span<const FlowSample> ref_batch, const ObjectiveConfig& config);

namespace detail {
// ipa_loss with the time factor forced to the constant 1; shared by
// pos_dpo_loss and by the structural-equivalence tests.
LossGrad log_sigmoid_gap_loss(const VelocityField& policy, const VelocityField& reference,
                              std::span<const FlowSample> batch, double beta,
                              const SpatialWeight* weight, bool unit_time_weight);
}  // namespace detail

}  // namespace flowalign
