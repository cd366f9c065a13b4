#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "flowalign/objectives.hpp"
#include "flowalign/oracles.hpp"

using namespace flowalign;

namespace {

ModelShape tiny_shape() {
  ModelShape s;
  s.state_dim = 3;
  s.cond_dim = 2;
  s.hidden_width = 8;
  s.hidden_layers = 2;
  s.time_features = 4;
  return s;
}

}  // namespace

TEST_CASE("gaussian_kl closed forms") {
  const GaussianSpec std1{{0.0}, {1.0}};
  CHECK(gaussian_kl(std1, std1) == 0.0);
  CHECK(gaussian_kl(GaussianSpec{{1.0}, {1.0}}, std1) == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(gaussian_kl(GaussianSpec{{0.0}, {4.0}}, std1) ==
        doctest::Approx(0.5 * (4.0 - 1.0 - std::log(4.0))).epsilon(1e-14));
}

TEST_CASE("gaussian_kl is nonnegative and zero exactly on equal specs") {
  util::Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + rng.uniform_int(4);
    GaussianSpec p, q;
    for (int i = 0; i < n; ++i) {
      p.mean.push_back(rng.normal());
      p.var.push_back(rng.uniform(0.1, 4.0));
      q.mean.push_back(rng.normal());
      q.var.push_back(rng.uniform(0.1, 4.0));
    }
    CHECK(gaussian_kl(p, q) >= 0.0);
    CHECK(gaussian_kl(p, p) == 0.0);
  }
}

TEST_CASE("gaussian_kl validation") {
  CHECK_THROWS_AS(gaussian_kl(GaussianSpec{{0.0}, {1.0}}, GaussianSpec{{0.0, 0.0}, {1.0, 1.0}}),
                  std::invalid_argument);
  CHECK_THROWS_AS(gaussian_kl(GaussianSpec{{0.0}, {0.0}}, GaussianSpec{{0.0}, {1.0}}),
                  std::invalid_argument);
  CHECK_THROWS_AS(gaussian_kl(GaussianSpec{{0.0}, {-1.0}}, GaussianSpec{{0.0}, {1.0}}),
                  std::invalid_argument);
}

TEST_CASE("analytic_velocity agrees with binned Monte Carlo conditional means") {
  const AnalyticFlow flow{{{0.0}, {1.0}}, {{0.8}, {1.7}}};
  util::Rng rng(17);
  for (double t : {0.1, 0.5, 0.9}) {
    const GaussianSpec marg = marginal_at(flow, t);
    const double z_star = marg.mean[0] + 0.5 * std::sqrt(marg.var[0]);
    const double h = 0.05 * std::sqrt(marg.var[0]);
    double sum = 0.0, sum_sq = 0.0;
    long n_sel = 0;
    for (long i = 0; i < 1500000; ++i) {
      const double z0 = std::sqrt(flow.source.var[0]) * rng.normal() + flow.source.mean[0];
      const double z1 = std::sqrt(flow.target.var[0]) * rng.normal() + flow.target.mean[0];
      const double zt = t * z1 + (1.0 - t) * z0;
      if (std::abs(zt - z_star) < h) {
        const double v = z1 - z0;
        sum += v;
        sum_sq += v * v;
        ++n_sel;
      }
    }
    REQUIRE(n_sel > 1000);
    const double mc_mean = sum / static_cast<double>(n_sel);
    const double sd = std::sqrt(std::max(0.0, sum_sq / n_sel - mc_mean * mc_mean));
    const double se = sd / std::sqrt(static_cast<double>(n_sel));
    const double analytic = analytic_velocity(flow, {z_star}, t)[0];
    INFO("t=" << t << " analytic=" << analytic << " mc=" << mc_mean << " se=" << se);
    CHECK(std::abs(analytic - mc_mean) <= 3.0 * se + 1e-3);
  }
}

TEST_CASE("analytic_velocity point-mass limit is the straight line") {
  const AnalyticFlow flow{{{0.0}, {1e-6}}, {{1.0}, {1e-6}}};
  for (double t : {0.0, 0.3, 0.7, 0.95}) {
    // on-path state: z = t (the deterministic interpolant between 0 and 1)
    const double v = analytic_velocity(flow, {t}, t)[0];
    CHECK(v == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("analytic_velocity swap symmetry") {
  const AnalyticFlow flow{{{-0.2}, {0.8}}, {{1.1}, {1.6}}};
  const AnalyticFlow swapped{flow.target, flow.source};
  util::Rng rng(23);
  for (int trial = 0; trial < 100; ++trial) {
    const double t = rng.uniform(0.05, 0.95);
    const double z = rng.normal() * 1.5;
    const double a = analytic_velocity(flow, {z}, t)[0];
    const double b = analytic_velocity(swapped, {z}, 1.0 - t)[0];
    CHECK(a == doctest::Approx(-b).epsilon(1e-12));
  }
}

TEST_CASE("analytic_velocity domain errors") {
  const AnalyticFlow flow{{{0.0}, {1.0}}, {{0.0}, {1.0}}};
  CHECK_THROWS_AS(analytic_velocity(flow, {0.0}, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(analytic_velocity(flow, {0.0, 0.0}, 0.5), std::invalid_argument);
}

TEST_CASE("KL rate identity: equal flows give zero gap within MC noise") {
  const AnalyticFlow flow{{{0.0}, {1.0}}, {{1.0}, {1.0}}};
  const std::vector<double> grid{0.2, 0.5, 0.8};
  const RateReport rep = verify_kl_rate_identity(flow, flow, grid, 100000, 5);
  for (const auto& row : rep.rows) {
    CHECK(std::abs(row.lhs_gap) <= 1e-9);
    CHECK(std::abs(row.rhs_gap) <= 3.0 * row.gap_mc_se + 1e-12);
    CHECK(row.status == CheckStatus::pass);
  }
}

TEST_CASE("KL rate identity: shared source, shifted target, 2% agreement") {
  const AnalyticFlow ref{{{0.0}, {1.0}}, {{0.0}, {1.0}}};
  const AnalyticFlow q{{{0.0}, {1.0}}, {{1.0}, {1.0}}};
  const std::vector<double> grid{0.2, 0.5, 0.8};
  const RateReport rep = verify_kl_rate_identity(ref, q, grid, 400000, 6);
  CHECK(rep.all_pass());
  for (const auto& row : rep.rows) {
    CHECK(row.rel_err <= 0.02);
    CHECK(row.gap_err <= 0.02);
    CHECK(row.rhs > 0.0);
  }
  // report rendering carries one row per grid point
  CHECK(rep.to_csv("pair").find("pair,2.0") != std::string::npos);
}

TEST_CASE("KL rate identity: doubling n_mc shrinks the standard error by ~1/sqrt(2)") {
  const AnalyticFlow ref{{{0.0}, {1.0}}, {{0.0}, {1.0}}};
  const AnalyticFlow q{{{0.0}, {1.0}}, {{0.0}, {2.0}}};
  const std::vector<double> grid{0.5};
  const RateReport r1 = verify_kl_rate_identity(ref, q, grid, 200000, 7);
  const RateReport r2 = verify_kl_rate_identity(ref, q, grid, 400000, 7);
  const double ratio = r2.rows[0].mc_se / r1.rows[0].mc_se;
  CHECK(ratio > 0.6);
  CHECK(ratio < 0.82);
}

TEST_CASE("KL rate identity input validation") {
  const AnalyticFlow flow{{{0.0}, {1.0}}, {{0.0}, {1.0}}};
  const std::vector<double> bad_grid{0.0, 0.5};
  CHECK_THROWS_AS(verify_kl_rate_identity(flow, flow, bad_grid, 100000, 1),
                  std::invalid_argument);
  const std::vector<double> grid{0.5};
  CHECK_THROWS_AS(verify_kl_rate_identity(flow, flow, grid, 999, 1), std::invalid_argument);
}

TEST_CASE("estimate_delta") {
  util::Rng rng(31);
  VelocityField base(tiny_shape(), Role::policy, 77);
  const VelocityField reference = base.frozen_copy();
  const PreferenceSampler sampler = [](util::Rng& r, Vec& z1, Vec& c) {
    z1 = r.normal_vec(3);
    c = r.normal_vec(2);
  };

  SUBCASE("zero at policy == reference, deterministic across runs") {
    const VelocityField policy = reference.spawn_policy(2, 5);
    const DeltaEstimate a = estimate_delta(policy, reference, sampler, 500, 11);
    const DeltaEstimate b = estimate_delta(policy, reference, sampler, 500, 11);
    CHECK(a.mean == 0.0);
    CHECK(std::abs(a.mean) <= 3.0 * a.se + 1e-12);
    CHECK(a.mean == b.mean);
    CHECK(a.se == b.se);
  }

  SUBCASE("positive when the policy beats the reference at every t") {
    // Constant fields: targets are drawn near v = z1 - z0 with E[v] = mu1;
    // a policy predicting closer to the realized velocities than the
    // reference must have a positive gap.
    ModelShape s;
    s.state_dim = 1;
    s.cond_dim = 1;
    s.hidden_width = 4;
    s.hidden_layers = 1;
    s.time_features = 2;
    VelocityField pol(s, Role::policy, 0);
    VelocityField ref_model(s, Role::policy, 0);
    Vec theta(static_cast<std::size_t>(pol.num_trainable()), 0.0);
    theta[theta.size() - 1] = 2.0;  // policy predicts 2
    pol.set_trainable(theta);
    theta[theta.size() - 1] = -3.0;  // reference predicts -3
    ref_model.set_trainable(theta);
    const VelocityField frozen_ref = ref_model.frozen_copy();
    const PreferenceSampler shifted = [](util::Rng& r, Vec& z1, Vec& c) {
      z1 = {2.0 + 0.1 * r.normal()};
      c = {0.0};
    };
    const DeltaEstimate est = estimate_delta(pol, frozen_ref, shifted, 2000, 13);
    CHECK(est.mean > 0.0);
    CHECK(est.mean > 3.0 * est.se);
  }

  SUBCASE("n_samples must be positive") {
    const VelocityField policy = reference.spawn_policy(2, 5);
    CHECK_THROWS_AS(estimate_delta(policy, reference, sampler, 0, 1), std::invalid_argument);
  }
}

TEST_CASE("grad_check on a quadratic with known gradient") {
  util::Rng rng(41);
  const int n = 30;
  Vec a(static_cast<std::size_t>(n));
  Vec x0(static_cast<std::size_t>(n));
  for (auto& v : a) v = rng.uniform(0.5, 3.0);
  for (auto& v : x0) v = rng.normal();
  const ObjectiveEvaluator quad = [&a](const Vec& x) {
    LossGrad lg;
    lg.grad.resize(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      lg.value += 0.5 * a[i] * x[i] * x[i];
      lg.grad[i] = a[i] * x[i];
    }
    return lg;
  };
  // Central differences are exact for quadratics, so a large step avoids the
  // roundoff floor entirely.
  const GradCheckReport rep = grad_check(quad, x0, 1e-3, n, 3);
  CHECK(rep.max_err <= 1e-10);
  CHECK(rep.rows.size() == static_cast<std::size_t>(n));
}

TEST_CASE("grad_check flags a sign-flipped gradient") {
  const ObjectiveEvaluator broken = [](const Vec& x) {
    LossGrad lg;
    lg.grad.resize(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      lg.value += x[i] * x[i];
      lg.grad[i] = -2.0 * x[i];  // wrong sign
    }
    return lg;
  };
  const GradCheckReport rep = grad_check(broken, {1.0, -2.0}, 1e-6, 2, 3);
  CHECK_FALSE(rep.pass(1e-5));
}

TEST_CASE("grad_check absolute regime at a zero-gradient point") {
  // The L2 anchor term alone, evaluated at policy == reference: gradient is
  // identically zero, so the check operates in the absolute-error regime.
  VelocityField base(tiny_shape(), Role::policy, 90);
  const VelocityField reference = base.frozen_copy();
  VelocityField policy = reference.spawn_policy(2, 4);
  util::Rng rng(91);
  std::vector<FlowSample> batch;
  for (int i = 0; i < 4; ++i)
    batch.push_back(make_flow_sample(rng.normal_vec(3), rng.normal_vec(3), rng.uniform(),
                                     rng.normal_vec(2), {}));
  const ObjectiveEvaluator anchor_only = [&](const Vec& p) {
    policy.set_trainable(p);
    LossGrad lg;
    lg.grad.assign(p.size(), 0.0);
    const double inv_n = 1.0 / static_cast<double>(batch.size());
    for (const auto& s : batch) {
      const auto tr = policy.forward_trace(s.zt, s.t, s.c);
      const Vec ry = reference.forward(s.zt, s.t, s.c);
      Vec dLdy(tr.output.size());
      for (std::size_t j = 0; j < tr.output.size(); ++j) {
        const double d = tr.output[j] - ry[j];
        lg.value += d * d * inv_n;
        dLdy[j] = 2.0 * d;
      }
      policy.backward(tr, dLdy, lg.grad, inv_n);
    }
    return lg;
  };
  const Vec p0 = policy.get_trainable();
  const LossGrad at = anchor_only(p0);
  for (double g : at.grad) CHECK(g == 0.0);

  // Compare analytic and FD per coordinate in absolute terms.
  Vec theta = p0;
  util::Rng pick(17);
  for (int c = 0; c < 40; ++c) {
    const std::size_t i = static_cast<std::size_t>(pick.uniform_int(static_cast<int>(p0.size())));
    const double h = 1e-6;
    theta[i] = p0[i] + h;
    const double fp = anchor_only(theta).value;
    theta[i] = p0[i] - h;
    const double fm = anchor_only(theta).value;
    theta[i] = p0[i];
    const double fd = (fp - fm) / (2.0 * h);
    CHECK(std::abs(fd - 0.0) <= 1e-8);
  }
}

TEST_CASE("rank agreement: the delta estimate and the log-sigmoid loss order policies alike") {
  // Over random policy pairs, the policy with the larger mean integrand on a
  // fixed sample set must have the smaller ipa loss on that same set.
  util::Rng rng(55);
  VelocityField base(tiny_shape(), Role::policy, 1001);
  const VelocityField reference = base.frozen_copy();

  std::vector<FlowSample> samples;
  for (int i = 0; i < 64; ++i)
    samples.push_back(make_flow_sample(rng.normal_vec(3), rng.normal_vec(3), rng.uniform(),
                                       rng.normal_vec(2), {}));
  // Ranking agreement is the content of the implicit-reward chain in the
  // regime the loss actually operates in (away from saturation, policy pairs
  // of comparable spread); beta is kept moderate accordingly.
  const ObjectiveConfig cfg = [] {
    ObjectiveConfig c;
    c.beta = 0.3;
    return c;
  }();

  auto random_policy = [&](std::uint64_t seed, double scale) {
    VelocityField p = reference.spawn_policy(2, seed);
    Vec theta = p.get_trainable();
    util::Rng r(seed ^ 0xabcull);
    for (auto& x : theta) x += scale * r.normal();
    p.set_trainable(theta);
    return p;
  };

  int checked = 0;
  util::Rng scale_rng(505);
  for (int pair = 0; pair < 40; ++pair) {
    const double scale = scale_rng.uniform(0.02, 0.2);
    const VelocityField pa = random_policy(2000 + static_cast<std::uint64_t>(pair), scale);
    const VelocityField pb = random_policy(3000 + static_cast<std::uint64_t>(pair), scale);
    double da = 0.0, db = 0.0;
    for (const auto& s : samples) {
      da += delta_integrand(pa, reference, s, nullptr);
      db += delta_integrand(pb, reference, s, nullptr);
    }
    da /= static_cast<double>(samples.size());
    db /= static_cast<double>(samples.size());
    if (std::abs(da - db) < 3e-3) continue;  // skip numerical ties
    const double la = ipa_loss(pa, reference, samples, cfg, nullptr).value;
    const double lb = ipa_loss(pb, reference, samples, cfg, nullptr).value;
    CHECK(((da > db) == (la < lb)));
    // Exact layer of the same chain: the log-sigmoid applied to the
    // aggregate estimate is strictly order-reversing.
    CHECK(((da > db) ==
           (util::neg_log_sigmoid(cfg.beta * da) < util::neg_log_sigmoid(cfg.beta * db))));
    ++checked;
  }
  CHECK(checked >= 20);
}
