#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "flowalign/flowcore.hpp"
#include "flowalign/objectives.hpp"

namespace flowalign {

// Diagonal Gaussian.
struct GaussianSpec {
  Vec mean;
  Vec var;

  int dim() const { return static_cast<int>(mean.size()); }
  void validate() const;
};

// Straight-path flow between independent Gaussian endpoints. The marginal at
// time t is Gaussian with mean t*mu1 + (1-t)*mu0 and variance
// t^2*var1 + (1-t)^2*var0.
struct AnalyticFlow {
  GaussianSpec source;
  GaussianSpec target;

  void validate() const;
};

double gaussian_kl(const GaussianSpec& p, const GaussianSpec& q);

GaussianSpec marginal_at(const AnalyticFlow& flow, double t);

// Conditional-expectation velocity E[Z1 - Z0 | Z_t = z] for the independent
// Gaussian coupling; linear in z.
Vec analytic_velocity(const AnalyticFlow& flow, const Vec& z, double t);

// Closed-form E over flow_q's coupling of ||v - v_field*(Z_t)||^2 where
// v = Z1 - Z0 and v_field* is the marginal velocity of flow_field.
double expected_sq_residual(const AnalyticFlow& flow_q, const AnalyticFlow& flow_field,
                            double t);

// Windowed trajectory-KL functional vs the reference field,
//   K(t) = Integral_t^1 1/2 (1-s)^2 E_q ||v - v_ref*(Z_s)||^2 ds,
// and its gap form with the E_q ||v - v_q*(Z_s)||^2 term subtracted.
// Both are evaluated from the closed-form integrand by Gauss-Legendre
// quadrature.
double window_traj_kl(const AnalyticFlow& flow_q, const AnalyticFlow& flow_ref, double t);
double window_traj_kl_gap(const AnalyticFlow& flow_q, const AnalyticFlow& flow_ref, double t);

enum class CheckStatus { pass, fail, inconclusive };
std::string status_name(CheckStatus s);

struct RateCheckRow {
  double t = 0.0;
  double lhs = 0.0;      // central finite difference of the closed-form window KL
  double rhs = 0.0;      // Monte Carlo 1/2 (1-t)^2 E||v - v_ref*||^2
  double rel_err = 0.0;
  double mc_se = 0.0;
  double lhs_gap = 0.0;  // same with the self term subtracted
  double rhs_gap = 0.0;
  double gap_err = 0.0;
  double gap_mc_se = 0.0;
  CheckStatus status = CheckStatus::fail;
};

struct RateReport {
  std::vector<RateCheckRow> rows;
  double tolerance = 0.02;

  bool all_pass() const;
  std::string to_text(const std::string& name) const;
  std::string to_csv(const std::string& name) const;
};

// Two-route check of the time-resolved KL rate: finite difference in t of the
// closed-form windowed trajectory KL against the raw Monte Carlo estimator
// over flow_q's coupling, at every grid point. The gap channel must vanish
// when flow_q == flow_ref.
RateReport verify_kl_rate_identity(const AnalyticFlow& flow_ref, const AnalyticFlow& flow_q,
                                   std::span<const double> t_grid, long n_mc,
                                   std::uint64_t seed, double tolerance = 0.02);

struct DeltaEstimate {
  double mean = 0.0;
  double se = 0.0;
  long n = 0;
};

// Draws (z1, c); estimate_delta adds t ~ U(0,1) and z0 ~ N(0, I).
using PreferenceSampler = std::function<void(util::Rng& rng, Vec& z1, Vec& c)>;

DeltaEstimate estimate_delta(const VelocityField& policy, const VelocityField& reference,
                             const PreferenceSampler& sampler, long n_samples,
                             std::uint64_t seed);

// Objective evaluator for gradient verification: full loss and gradient at a
// parameter vector.
using ObjectiveEvaluator = std::function<LossGrad(const Vec& params)>;

struct GradCheckRow {
  int coord = 0;
  double analytic = 0.0;
  double fd = 0.0;
  double err = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckRow> rows;
  double max_err = 0.0;
  double mean_err = 0.0;
  int worst_coord = -1;

  bool pass(double tol) const { return max_err <= tol; }
  std::string to_text(const std::string& name, double tol) const;
};

// Central finite differences on n_coords randomly chosen coordinates.
// Per-coordinate error is |a - fd| / max(|a|, |fd|, scale_floor); the floor
// keeps the ratio meaningful where the true derivative is below the
// eps*|L|/h noise of the difference quotient.
GradCheckReport grad_check(const ObjectiveEvaluator& evaluator, const Vec& params,
                           double perturbation, int n_coords, std::uint64_t seed,
                           double scale_floor = 1e-4);

}  // namespace flowalign
