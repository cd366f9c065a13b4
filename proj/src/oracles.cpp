#include "flowalign/oracles.hpp"

#include <algorithm>
#include <array>
#include <numeric>
#include <sstream>

namespace flowalign {

namespace {

// 48-point Gauss-Legendre nodes/weights on [-1,1], generated by Newton
// iteration on the Legendre polynomial at first use.
struct GaussLegendre {
  std::array<double, 48> node{};
  std::array<double, 48> weight{};

  GaussLegendre() {
    const int n = 48;
    for (int i = 0; i < n; ++i) {
      double x = std::cos(M_PI * (i + 0.75) / (n + 0.5));
      for (int it = 0; it < 100; ++it) {
        double p0 = 1.0, p1 = x;
        for (int k = 2; k <= n; ++k) {
          const double p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
          p0 = p1;
          p1 = p2;
        }
        const double dp = n * (x * p1 - p0) / (x * x - 1.0);
        const double dx = p1 / dp;
        x -= dx;
        if (std::abs(dx) < 1e-15) break;
      }
      double p0 = 1.0, p1 = x;
      for (int k = 2; k <= n; ++k) {
        const double p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
      }
      const double dp = n * (x * p1 - p0) / (x * x - 1.0);
      node[static_cast<std::size_t>(i)] = x;
      weight[static_cast<std::size_t>(i)] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
  }
};

const GaussLegendre& gl48() {
  static const GaussLegendre g;
  return g;
}

double integrate(const std::function<double(double)>& f, double a, double b) {
  const auto& g = gl48();
  const double mid = 0.5 * (a + b);
  const double half = 0.5 * (b - a);
  double acc = 0.0;
  for (std::size_t i = 0; i < g.node.size(); ++i)
    acc += g.weight[i] * f(mid + half * g.node[i]);
  return acc * half;
}

// Per-dimension moments of a flow at time s.
struct FlowMoments {
  double m_v, var_v;    // velocity Z1 - Z0
  double m_t, var_t;    // state Z_s
  double cov_vt;
};

FlowMoments moments(const AnalyticFlow& f, std::size_t d, double s) {
  FlowMoments m;
  const double mu0 = f.source.mean[d], v0 = f.source.var[d];
  const double mu1 = f.target.mean[d], v1 = f.target.var[d];
  m.m_v = mu1 - mu0;
  m.var_v = v0 + v1;
  m.m_t = s * mu1 + (1.0 - s) * mu0;
  m.var_t = s * s * v1 + (1.0 - s) * (1.0 - s) * v0;
  m.cov_vt = s * v1 - (1.0 - s) * v0;
  return m;
}

void check_same_dim(const AnalyticFlow& a, const AnalyticFlow& b) {
  if (a.source.dim() != b.source.dim())
    throw std::invalid_argument("analytic flows: dimension mismatch");
}

}  // namespace

void GaussianSpec::validate() const {
  if (mean.size() != var.size())
    throw std::invalid_argument("GaussianSpec: mean/var dimension mismatch");
  if (mean.empty()) throw std::invalid_argument("GaussianSpec: empty");
  for (double v : var)
    if (!(v > 0.0)) throw std::invalid_argument("GaussianSpec: variances must be positive");
}

void AnalyticFlow::validate() const {
  source.validate();
  target.validate();
  if (source.dim() != target.dim())
    throw std::invalid_argument("AnalyticFlow: source/target dimension mismatch");
}

double gaussian_kl(const GaussianSpec& p, const GaussianSpec& q) {
  p.validate();
  q.validate();
  if (p.dim() != q.dim()) throw std::invalid_argument("gaussian_kl: dimension mismatch");
  double acc = 0.0;
  for (std::size_t d = 0; d < p.mean.size(); ++d) {
    const double dm = p.mean[d] - q.mean[d];
    acc += 0.5 * (std::log(q.var[d] / p.var[d]) + (p.var[d] + dm * dm) / q.var[d] - 1.0);
  }
  return acc;
}

GaussianSpec marginal_at(const AnalyticFlow& flow, double t) {
  flow.validate();
  GaussianSpec g;
  g.mean.resize(flow.source.mean.size());
  g.var.resize(flow.source.mean.size());
  for (std::size_t d = 0; d < g.mean.size(); ++d) {
    const auto m = moments(flow, d, t);
    g.mean[d] = m.m_t;
    g.var[d] = m.var_t;
  }
  return g;
}

Vec analytic_velocity(const AnalyticFlow& flow, const Vec& z, double t) {
  flow.validate();
  if (static_cast<int>(z.size()) != flow.source.dim())
    throw std::invalid_argument("analytic_velocity: dimension mismatch");
  if (!(t >= 0.0 && t < 1.0))
    throw std::invalid_argument("analytic_velocity: t must lie in [0,1)");
  Vec v(z.size());
  for (std::size_t d = 0; d < z.size(); ++d) {
    const auto m = moments(flow, d, t);
    v[d] = m.m_v + (m.cov_vt / m.var_t) * (z[d] - m.m_t);
  }
  return v;
}

double expected_sq_residual(const AnalyticFlow& flow_q, const AnalyticFlow& flow_field,
                            double t) {
  check_same_dim(flow_q, flow_field);
  double acc = 0.0;
  for (std::size_t d = 0; d < flow_q.source.mean.size(); ++d) {
    const auto q = moments(flow_q, d, t);
    const auto r = moments(flow_field, d, t);
    const double a = r.cov_vt / r.var_t;
    const double mean = q.m_v - r.m_v - a * (q.m_t - r.m_t);
    const double var = q.var_v - 2.0 * a * q.cov_vt + a * a * q.var_t;
    acc += var + mean * mean;
  }
  return acc;
}

double window_traj_kl(const AnalyticFlow& flow_q, const AnalyticFlow& flow_ref, double t) {
  return integrate(
      [&](double s) {
        return 0.5 * (1.0 - s) * (1.0 - s) * expected_sq_residual(flow_q, flow_ref, s);
      },
      t, 1.0);
}

double window_traj_kl_gap(const AnalyticFlow& flow_q, const AnalyticFlow& flow_ref, double t) {
  return integrate(
      [&](double s) {
        return 0.5 * (1.0 - s) * (1.0 - s) *
               (expected_sq_residual(flow_q, flow_ref, s) -
                expected_sq_residual(flow_q, flow_q, s));
      },
      t, 1.0);
}

std::string status_name(CheckStatus s) {
  switch (s) {
    case CheckStatus::pass: return "pass";
    case CheckStatus::fail: return "fail";
    case CheckStatus::inconclusive: return "inconclusive";
  }
  return "?";
}

bool RateReport::all_pass() const {
  return std::all_of(rows.begin(), rows.end(),
                     [](const RateCheckRow& r) { return r.status == CheckStatus::pass; });
}

std::string RateReport::to_text(const std::string& name) const {
  std::ostringstream os;
  for (const auto& r : rows) {
    os << name << " t=" << util::fmt_fixed(r.t, 3) << " lhs=" << util::fmt_sci(r.lhs)
       << " rhs=" << util::fmt_sci(r.rhs) << " rel_err=" << util::fmt_sci(r.rel_err)
       << " mc_se=" << util::fmt_sci(r.mc_se) << " gap_err=" << util::fmt_sci(r.gap_err)
       << " status=" << status_name(r.status) << "\n";
  }
  return os.str();
}

std::string RateReport::to_csv(const std::string& name) const {
  std::ostringstream os;
  os << "identity,t,lhs,rhs,rel_err,status\n";
  for (const auto& r : rows)
    os << name << "," << util::fmt_sci(r.t) << "," << util::fmt_sci(r.lhs) << ","
       << util::fmt_sci(r.rhs) << "," << util::fmt_sci(r.rel_err) << "," << status_name(r.status)
       << "\n";
  return os.str();
}

RateReport verify_kl_rate_identity(const AnalyticFlow& flow_ref, const AnalyticFlow& flow_q,
                                   std::span<const double> t_grid, long n_mc,
                                   std::uint64_t seed, double tolerance) {
  flow_ref.validate();
  flow_q.validate();
  check_same_dim(flow_q, flow_ref);
  if (n_mc < 100000) throw std::invalid_argument("verify_kl_rate_identity: n_mc must be >= 1e5");
  for (double t : t_grid)
    if (!(t > 0.0 && t < 1.0))
      throw std::invalid_argument("verify_kl_rate_identity: grid must lie strictly inside (0,1)");

  RateReport report;
  report.tolerance = tolerance;
  const std::size_t dim = flow_q.source.mean.size();
  util::Rng rng(seed);

  for (double t : t_grid) {
    RateCheckRow row;
    row.t = t;

    const double h = std::min(1e-3, 0.5 * std::min(t, 1.0 - t));
    row.lhs = (window_traj_kl(flow_q, flow_ref, t - h) - window_traj_kl(flow_q, flow_ref, t + h)) /
              (2.0 * h);
    row.lhs_gap = (window_traj_kl_gap(flow_q, flow_ref, t - h) -
                   window_traj_kl_gap(flow_q, flow_ref, t + h)) /
                  (2.0 * h);

    // Monte Carlo over the raw coupling of flow_q; the gap channel is
    // estimated pairwise on the same draws.
    double sum = 0.0, sum_sq = 0.0, gsum = 0.0, gsum_sq = 0.0;
    const double tw = 0.5 * (1.0 - t) * (1.0 - t);
    Vec z0(dim), z1(dim), zt(dim);
    for (long i = 0; i < n_mc; ++i) {
      for (std::size_t d = 0; d < dim; ++d) {
        z0[d] = flow_q.source.mean[d] + std::sqrt(flow_q.source.var[d]) * rng.normal();
        z1[d] = flow_q.target.mean[d] + std::sqrt(flow_q.target.var[d]) * rng.normal();
        zt[d] = t * z1[d] + (1.0 - t) * z0[d];
      }
      const Vec vref = analytic_velocity(flow_ref, zt, t);
      const Vec vq = analytic_velocity(flow_q, zt, t);
      double sq_ref = 0.0, sq_q = 0.0;
      for (std::size_t d = 0; d < dim; ++d) {
        const double v = z1[d] - z0[d];
        const double rr = v - vref[d];
        const double rq = v - vq[d];
        sq_ref += rr * rr;
        sq_q += rq * rq;
      }
      const double x = tw * sq_ref;
      const double g = tw * (sq_ref - sq_q);
      sum += x;
      sum_sq += x * x;
      gsum += g;
      gsum_sq += g * g;
    }
    const double n = static_cast<double>(n_mc);
    row.rhs = sum / n;
    row.mc_se = std::sqrt(std::max(0.0, (sum_sq / n - row.rhs * row.rhs) / (n - 1.0)));
    row.rhs_gap = gsum / n;
    row.gap_mc_se = std::sqrt(std::max(0.0, (gsum_sq / n - row.rhs_gap * row.rhs_gap) / (n - 1.0)));

    const double scale = std::max(std::abs(row.lhs), std::abs(row.rhs));
    row.rel_err = (scale > 1e-12) ? std::abs(row.lhs - row.rhs) / scale : 0.0;
    const double gscale = std::max(std::abs(row.lhs_gap), std::abs(row.rhs_gap));
    // Absolute comparison when the gap itself is at the noise floor
    // (flow_q == flow_ref makes both sides zero up to MC noise).
    row.gap_err = (gscale > std::max(1e-9, 3.0 * row.gap_mc_se))
                      ? std::abs(row.lhs_gap - row.rhs_gap) / gscale
                      : 0.0;

    const bool certifiable = 3.0 * row.mc_se <= tolerance * std::max(std::abs(row.rhs), 1e-12);
    if (!certifiable)
      row.status = CheckStatus::inconclusive;
    else if (row.rel_err <= tolerance && row.gap_err <= tolerance)
      row.status = CheckStatus::pass;
    else
      row.status = CheckStatus::fail;
    report.rows.push_back(row);
  }
  return report;
}

DeltaEstimate estimate_delta(const VelocityField& policy, const VelocityField& reference,
                             const PreferenceSampler& sampler, long n_samples,
                             std::uint64_t seed) {
  if (n_samples < 1) throw std::invalid_argument("estimate_delta: n_samples must be >= 1");
  util::Rng rng(seed);
  const int dim = policy.shape().state_dim;

  double mean = 0.0, m2 = 0.0;
  Vec z1, c;
  for (long i = 0; i < n_samples; ++i) {
    sampler(rng, z1, c);
    const double t = rng.uniform();
    Vec z0 = rng.normal_vec(dim);
    FlowSample s = make_flow_sample(std::move(z0), z1, t, c, {});
    const double d = delta_integrand(policy, reference, s, nullptr);
    const double delta = d - mean;
    mean += delta / static_cast<double>(i + 1);
    m2 += delta * (d - mean);
  }
  DeltaEstimate est;
  est.mean = mean;
  est.n = n_samples;
  est.se = (n_samples > 1)
               ? std::sqrt(m2 / (static_cast<double>(n_samples) - 1.0) /
                           static_cast<double>(n_samples))
               : 0.0;
  return est;
}

std::string GradCheckReport::to_text(const std::string& name, double tol) const {
  std::ostringstream os;
  os << name << " max_rel_err=" << util::fmt_sci(max_err)
     << " mean_rel_err=" << util::fmt_sci(mean_err) << " coords=" << rows.size()
     << " worst_coord=" << worst_coord << " status=" << (pass(tol) ? "pass" : "fail") << "\n";
  return os.str();
}

GradCheckReport grad_check(const ObjectiveEvaluator& evaluator, const Vec& params,
                           double perturbation, int n_coords, std::uint64_t seed,
                           double scale_floor) {
  if (!(perturbation > 0.0))
    throw std::invalid_argument("grad_check: perturbation must be > 0");
  if (n_coords < 1) throw std::invalid_argument("grad_check: n_coords must be >= 1");

  const LossGrad at = evaluator(params);
  if (at.grad.size() != params.size())
    throw std::invalid_argument("grad_check: evaluator gradient size mismatch");

  // Sample distinct coordinates; take all of them when the vector is small.
  std::vector<int> coords(params.size());
  std::iota(coords.begin(), coords.end(), 0);
  util::Rng rng(seed);
  for (std::size_t i = coords.size(); i > 1; --i)
    std::swap(coords[i - 1], coords[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(i)))]);
  if (static_cast<std::size_t>(n_coords) < coords.size())
    coords.resize(static_cast<std::size_t>(n_coords));

  GradCheckReport report;
  Vec theta = params;
  double err_sum = 0.0;
  for (int ci : coords) {
    const std::size_t i = static_cast<std::size_t>(ci);
    const double orig = theta[i];
    theta[i] = orig + perturbation;
    const double fp = evaluator(theta).value;
    theta[i] = orig - perturbation;
    const double fm = evaluator(theta).value;
    theta[i] = orig;

    GradCheckRow row;
    row.coord = ci;
    row.analytic = at.grad[i];
    row.fd = (fp - fm) / (2.0 * perturbation);
    const double scale = std::max({std::abs(row.analytic), std::abs(row.fd), scale_floor});
    row.err = std::abs(row.analytic - row.fd) / scale;
    err_sum += row.err;
    if (row.err > report.max_err) {
      report.max_err = row.err;
      report.worst_coord = ci;
    }
    report.rows.push_back(row);
  }
  report.mean_err = err_sum / static_cast<double>(report.rows.size());
  return report;
}

}  // namespace flowalign
