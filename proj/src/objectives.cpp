#include "flowalign/objectives.hpp"

#include <sstream>

namespace flowalign {

namespace {

using util::neg_log_sigmoid;
using util::sigmoid;

const Vec* weight_vec(const SpatialWeight* w, std::size_t dim) {
  if (w == nullptr) return nullptr;
  if (w->weights.size() != dim)
    throw std::invalid_argument("spatial weight dimension mismatch");
  return &w->weights;
}

double wsq(double r, const Vec* w, std::size_t j) {
  return (w != nullptr) ? (*w)[j] * r * r : r * r;
}

void require_policy(const VelocityField& policy, const char* op) {
  if (policy.role() != Role::policy)
    throw std::invalid_argument(std::string(op) + ": model must be policy-role");
}

void require_nonempty(std::span<const FlowSample> batch, const char* op) {
  if (batch.empty()) throw std::invalid_argument(std::string(op) + ": empty batch");
}

[[noreturn]] void throw_nonfinite(const char* op, std::size_t i) {
  std::ostringstream os;
  os << op << ": non-finite value at sample " << i;
  throw std::runtime_error(os.str());
}

// Weighted squared errors of policy/reference outputs against the target
// velocity for one sample, plus the traced policy forward for backprop.
struct GapEval {
  VelocityField::ForwardTrace trace;
  Vec ref_out;
  double err_ref = 0.0;     // ||sqrt(w).(v - v_ref)||^2
  double err_policy = 0.0;  // ||sqrt(w).(v - v_policy)||^2
};

GapEval eval_gap(const VelocityField& policy, const VelocityField& reference,
                 const FlowSample& s, const Vec* w) {
  GapEval g;
  g.trace = policy.forward_trace(s.zt, s.t, s.c);
  g.ref_out = reference.forward(s.zt, s.t, s.c);
  for (std::size_t j = 0; j < s.v.size(); ++j) {
    g.err_ref += wsq(s.v[j] - g.ref_out[j], w, j);
    g.err_policy += wsq(s.v[j] - g.trace.output[j], w, j);
  }
  return g;
}

// dL/dy for the policy given d(loss)/d(err_policy) = coeff:
// d(err_policy)/dy_j = -2 w_j (v_j - y_j).
void backprop_err_policy(const VelocityField& policy, const GapEval& g, const FlowSample& s,
                         const Vec* w, double coeff, Vec& grad) {
  Vec dLdy(g.trace.output.size());
  for (std::size_t j = 0; j < dLdy.size(); ++j) {
    const double wj = (w != nullptr) ? (*w)[j] : 1.0;
    dLdy[j] = -2.0 * wj * (s.v[j] - g.trace.output[j]);
  }
  policy.backward(g.trace, dLdy, grad, coeff);
}

double time_weight(double t) { return 0.5 * (1.0 - t) * (1.0 - t); }

}  // namespace

SpatialWeight make_spatial_weight(const Mask& mask, double lambda) {
  if (lambda < 0.0) throw std::invalid_argument("make_spatial_weight: lambda must be >= 0");
  SpatialWeight w;
  w.lambda = lambda;
  w.mask = mask;
  w.weights.resize(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i] != 0 && mask[i] != 1)
      throw std::invalid_argument("make_spatial_weight: mask must be binary");
    w.weights[i] = 1.0 + lambda * static_cast<double>(mask[i]);
  }
  return w;
}

std::string objective_name(ObjectiveKind k) {
  switch (k) {
    case ObjectiveKind::ipa: return "ipa";
    case ObjectiveKind::ipa_halo: return "ipa_halo";
    case ObjectiveKind::pos_dpo: return "pos_dpo";
    case ObjectiveKind::paired_dpo: return "paired_dpo";
    case ObjectiveKind::sft: return "sft";
    case ObjectiveKind::sft_l2: return "sft_l2";
    case ObjectiveKind::kto: return "kto";
  }
  throw std::logic_error("objective_name: unknown kind");
}

ObjectiveKind objective_from_name(const std::string& name) {
  if (name == "ipa") return ObjectiveKind::ipa;
  if (name == "ipa_halo") return ObjectiveKind::ipa_halo;
  if (name == "pos_dpo") return ObjectiveKind::pos_dpo;
  if (name == "paired_dpo") return ObjectiveKind::paired_dpo;
  if (name == "sft") return ObjectiveKind::sft;
  if (name == "sft_l2") return ObjectiveKind::sft_l2;
  if (name == "kto") return ObjectiveKind::kto;
  throw std::invalid_argument("unknown objective '" + name + "'");
}

bool objective_uses_beta(ObjectiveKind k) {
  return k == ObjectiveKind::ipa || k == ObjectiveKind::ipa_halo ||
         k == ObjectiveKind::pos_dpo || k == ObjectiveKind::paired_dpo ||
         k == ObjectiveKind::kto;
}

void ObjectiveConfig::validate() const {
  if (objective_uses_beta(kind) && !(beta > 0.0))
    throw std::invalid_argument("objective config: beta must be > 0 for preference objectives");
  if (lambda < 0.0) throw std::invalid_argument("objective config: lambda must be >= 0");
  if (kind == ObjectiveKind::kto) {
    if (kto_good_weight <= 0.0 || kto_bad_weight <= 0.0)
      throw std::invalid_argument("objective config: kto weights must be > 0");
    if (kto_ref_batch < 1)
      throw std::invalid_argument("objective config: kto_ref_batch must be >= 1");
  }
}

double delta_integrand(const VelocityField& policy, const VelocityField& reference,
                       const FlowSample& sample, const SpatialWeight* weight) {
  const Vec* w = weight_vec(weight, sample.v.size());
  const Vec py = policy.forward(sample.zt, sample.t, sample.c);
  const Vec ry = reference.forward(sample.zt, sample.t, sample.c);
  double err_ref = 0.0, err_policy = 0.0;
  for (std::size_t j = 0; j < sample.v.size(); ++j) {
    err_ref += wsq(sample.v[j] - ry[j], w, j);
    err_policy += wsq(sample.v[j] - py[j], w, j);
  }
  const double d = time_weight(sample.t) * (err_ref - err_policy);
  if (!std::isfinite(d)) throw std::runtime_error("delta_integrand: non-finite model output");
  return d;
}

namespace detail {

LossGrad log_sigmoid_gap_loss(const VelocityField& policy, const VelocityField& reference,
                              std::span<const FlowSample> batch, double beta,
                              const SpatialWeight* weight, bool unit_time_weight) {
  require_policy(policy, "ipa_loss");
  require_nonempty(batch, "ipa_loss");
  if (!(beta > 0.0)) throw std::invalid_argument("ipa_loss: beta must be > 0");

  LossGrad out;
  out.grad.assign(static_cast<std::size_t>(policy.num_trainable()), 0.0);
  const double inv_n = 1.0 / static_cast<double>(batch.size());

  for (std::size_t i = 0; i < batch.size(); ++i) {
    const FlowSample& s = batch[i];
    const Vec* w = weight_vec(weight, s.v.size());
    const GapEval g = eval_gap(policy, reference, s, w);
    const double tw = unit_time_weight ? 1.0 : time_weight(s.t);
    const double d = tw * (g.err_ref - g.err_policy);
    const double x = beta * d;
    const double li = neg_log_sigmoid(x);
    if (!std::isfinite(li)) throw_nonfinite("ipa_loss", i);
    out.value += li * inv_n;
    // d(-log sigmoid(x))/dx = -sigmoid(-x); dd/d(err_policy) = -tw.
    const double coeff = inv_n * sigmoid(-x) * beta * tw;
    backprop_err_policy(policy, g, s, w, coeff, out.grad);
  }
  return out;
}

}  // namespace detail

LossGrad ipa_loss(const VelocityField& policy, const VelocityField& reference,
                  std::span<const FlowSample> batch, const ObjectiveConfig& config,
                  const SpatialWeight* weight) {
  return detail::log_sigmoid_gap_loss(policy, reference, batch, config.beta, weight, false);
}

LossGrad pos_dpo_loss(const VelocityField& policy, const VelocityField& reference,
                      std::span<const FlowSample> batch, const ObjectiveConfig& config) {
  return detail::log_sigmoid_gap_loss(policy, reference, batch, config.beta, nullptr, true);
}

LossGrad paired_dpo_loss(const VelocityField& policy, const VelocityField& reference,
                         std::span<const FlowSample> win_batch,
                         std::span<const FlowSample> lose_batch,
                         const ObjectiveConfig& config) {
  require_policy(policy, "paired_dpo_loss");
  require_nonempty(win_batch, "paired_dpo_loss");
  if (win_batch.size() != lose_batch.size())
    throw std::invalid_argument("paired_dpo_loss: win/lose batch length mismatch");
  if (!(config.beta > 0.0)) throw std::invalid_argument("paired_dpo_loss: beta must be > 0");

  LossGrad out;
  out.grad.assign(static_cast<std::size_t>(policy.num_trainable()), 0.0);
  const double inv_n = 1.0 / static_cast<double>(win_batch.size());

  for (std::size_t i = 0; i < win_batch.size(); ++i) {
    const FlowSample& sw = win_batch[i];
    const FlowSample& sl = lose_batch[i];
    if (sw.t != sl.t) {
      std::ostringstream os;
      os << "paired_dpo_loss: mismatched t within pair " << i;
      throw std::invalid_argument(os.str());
    }
    const GapEval gw = eval_gap(policy, reference, sw, nullptr);
    const GapEval gl = eval_gap(policy, reference, sl, nullptr);
    const double dw = time_weight(sw.t) * (gw.err_ref - gw.err_policy);
    const double dl = time_weight(sl.t) * (gl.err_ref - gl.err_policy);
    const double x = config.beta * (dw - dl);
    const double li = neg_log_sigmoid(x);
    if (!std::isfinite(li)) throw_nonfinite("paired_dpo_loss", i);
    out.value += li * inv_n;
    const double base = inv_n * sigmoid(-x) * config.beta;
    backprop_err_policy(policy, gw, sw, nullptr, base * time_weight(sw.t), out.grad);
    backprop_err_policy(policy, gl, sl, nullptr, -base * time_weight(sl.t), out.grad);
  }
  return out;
}

LossGrad sft_loss(const VelocityField& policy, std::span<const FlowSample> batch,
                  const SpatialWeight* weight) {
  require_policy(policy, "sft_loss");
  require_nonempty(batch, "sft_loss");

  LossGrad out;
  out.grad.assign(static_cast<std::size_t>(policy.num_trainable()), 0.0);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const FlowSample& s = batch[i];
    const Vec* w = weight_vec(weight, s.v.size());
    const auto tr = policy.forward_trace(s.zt, s.t, s.c);
    double e = 0.0;
    Vec dLdy(tr.output.size());
    for (std::size_t j = 0; j < tr.output.size(); ++j) {
      const double wj = (w != nullptr) ? (*w)[j] : 1.0;
      const double r = tr.output[j] - s.v[j];
      e += wj * r * r;
      dLdy[j] = 2.0 * wj * r;
    }
    if (!std::isfinite(e)) throw_nonfinite("sft_loss", i);
    out.value += e * inv_n;
    policy.backward(tr, dLdy, out.grad, inv_n);
  }
  return out;
}

LossGrad sft_l2_anchor_loss(const VelocityField& policy, const VelocityField& reference,
                            std::span<const FlowSample> batch, double anchor_coeff,
                            const SpatialWeight* weight) {
  require_policy(policy, "sft_l2_anchor_loss");
  require_nonempty(batch, "sft_l2_anchor_loss");

  LossGrad out;
  out.grad.assign(static_cast<std::size_t>(policy.num_trainable()), 0.0);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const FlowSample& s = batch[i];
    const Vec* w = weight_vec(weight, s.v.size());
    const auto tr = policy.forward_trace(s.zt, s.t, s.c);
    const Vec ry = reference.forward(s.zt, s.t, s.c);
    double e = 0.0;
    Vec dLdy(tr.output.size());
    for (std::size_t j = 0; j < tr.output.size(); ++j) {
      const double wj = (w != nullptr) ? (*w)[j] : 1.0;
      const double r = tr.output[j] - s.v[j];
      const double a = tr.output[j] - ry[j];
      e += wj * r * r + anchor_coeff * a * a;
      dLdy[j] = 2.0 * wj * r + anchor_coeff * 2.0 * a;
    }
    if (!std::isfinite(e)) throw_nonfinite("sft_l2_anchor_loss", i);
    out.value += e * inv_n;
    policy.backward(tr, dLdy, out.grad, inv_n);
  }
  return out;
}

LossGrad kto_loss(const VelocityField& policy, const VelocityField& reference,
                  std::span<const FlowSample> good_batch, std::span<const FlowSample> bad_batch,
                  std::span<const FlowSample> ref_batch, const ObjectiveConfig& config) {
  require_policy(policy, "kto_loss");
  require_nonempty(good_batch, "kto_loss(good)");
  require_nonempty(bad_batch, "kto_loss(bad)");
  require_nonempty(ref_batch, "kto_loss(ref)");
  if (!(config.beta > 0.0)) throw std::invalid_argument("kto_loss: beta must be > 0");

  // Reference point: batch-mean integrand over the held batch, clipped at 0.
  // Constant w.r.t. the parameters (no gradient flows through it).
  double z_ref = 0.0;
  for (const FlowSample& s : ref_batch) z_ref += delta_integrand(policy, reference, s, nullptr);
  z_ref = std::max(0.0, z_ref / static_cast<double>(ref_batch.size()));

  LossGrad out;
  out.grad.assign(static_cast<std::size_t>(policy.num_trainable()), 0.0);
  const double wg = config.kto_good_weight;
  const double wb = config.kto_bad_weight;
  const double norm =
      wg * static_cast<double>(good_batch.size()) + wb * static_cast<double>(bad_batch.size());

  for (std::size_t i = 0; i < good_batch.size(); ++i) {
    const FlowSample& s = good_batch[i];
    const GapEval g = eval_gap(policy, reference, s, nullptr);
    const double d = time_weight(s.t) * (g.err_ref - g.err_policy);
    const double x = config.beta * (d - z_ref);
    const double li = neg_log_sigmoid(x);
    if (!std::isfinite(li)) throw_nonfinite("kto_loss(good)", i);
    out.value += wg * li / norm;
    const double coeff = (wg / norm) * sigmoid(-x) * config.beta * time_weight(s.t);
    backprop_err_policy(policy, g, s, nullptr, coeff, out.grad);
  }
  for (std::size_t i = 0; i < bad_batch.size(); ++i) {
    const FlowSample& s = bad_batch[i];
    const GapEval g = eval_gap(policy, reference, s, nullptr);
    const double d = time_weight(s.t) * (g.err_ref - g.err_policy);
    const double x = config.beta * (z_ref - d);
    const double li = neg_log_sigmoid(x);
    if (!std::isfinite(li)) throw_nonfinite("kto_loss(bad)", i);
    out.value += wb * li / norm;
    const double coeff = -(wb / norm) * sigmoid(-x) * config.beta * time_weight(s.t);
    backprop_err_policy(policy, g, s, nullptr, coeff, out.grad);
  }
  return out;
}

}  // namespace flowalign
