#include "flowalign/verify.hpp"

#include <sstream>

#include "flowalign/objectives.hpp"

namespace flowalign {

namespace {

constexpr double kLn2 = 0.6931471805599453;

// Tiny model whose output is a constant vector: all weights zero, output
// bias set. Useful for exact scalar anchors.
VelocityField constant_model(int state_dim, int cond_dim, const Vec& value, Role role) {
  ModelShape shape;
  shape.state_dim = state_dim;
  shape.cond_dim = cond_dim;
  shape.hidden_width = 4;
  shape.hidden_layers = 1;
  shape.time_features = 2;
  VelocityField m(shape, Role::policy, 0);
  Vec theta(static_cast<std::size_t>(m.num_trainable()), 0.0);
  // Trainable layout ends with the output layer block: rows*cols weights then
  // the output bias.
  for (int j = 0; j < state_dim; ++j)
    theta[theta.size() - static_cast<std::size_t>(state_dim - j)] = value[static_cast<std::size_t>(j)];
  m.set_trainable(theta);
  return role == Role::reference ? m.frozen_copy() : m;
}

struct Instance {
  VelocityField reference;
  VelocityField policy;
  std::vector<FlowSample> batch;
  std::vector<FlowSample> batch_b;    // losers / bad
  std::vector<FlowSample> batch_ref;  // kto reference point
  SpatialWeight weight;
};

Instance random_instance(std::uint64_t seed, bool full_params) {
  const int D = 6, Dc = 3;
  ModelShape shape;
  shape.state_dim = D;
  shape.cond_dim = Dc;
  shape.hidden_width = 16;
  shape.hidden_layers = 2;
  shape.time_features = 4;

  util::Rng rng(seed);
  VelocityField base(shape, Role::policy, rng.next_u64());

  Instance inst{base.frozen_copy(), base.spawn_policy(full_params ? 0 : 3, rng.next_u64()),
                {}, {}, {}, SpatialWeight{}};

  // Nudge the policy off the reference so gradients are generic.
  Vec theta = inst.policy.get_trainable();
  for (auto& x : theta) x += 0.05 * rng.normal();
  inst.policy.set_trainable(theta);

  Mask mask(static_cast<std::size_t>(D), 0);
  mask[static_cast<std::size_t>(D - 1)] = 1;
  mask[static_cast<std::size_t>(D - 2)] = 1;
  inst.weight = make_spatial_weight(mask, 10.0);

  auto draw = [&](double t_override) {
    Vec z0 = rng.normal_vec(D);
    Vec z1 = rng.normal_vec(D);
    Vec c(static_cast<std::size_t>(Dc));
    for (auto& x : c) x = rng.uniform(-1.0, 1.0);
    const double t = (t_override >= 0.0) ? t_override : rng.uniform();
    return make_flow_sample(std::move(z0), std::move(z1), t, std::move(c), mask);
  };
  for (int i = 0; i < 8; ++i) inst.batch.push_back(draw(-1.0));
  for (int i = 0; i < 8; ++i) inst.batch_b.push_back(draw(inst.batch[static_cast<std::size_t>(i)].t));
  for (int i = 0; i < 4; ++i) inst.batch_ref.push_back(draw(-1.0));
  return inst;
}

using Evaluator = std::function<LossGrad(const Vec&)>;

Evaluator make_evaluator(ObjectiveKind kind, Instance& inst, const ObjectiveConfig& cfg) {
  return [kind, &inst, cfg](const Vec& params) {
    inst.policy.set_trainable(params);
    switch (kind) {
      case ObjectiveKind::ipa:
        return ipa_loss(inst.policy, inst.reference, inst.batch, cfg, nullptr);
      case ObjectiveKind::ipa_halo:
        return ipa_loss(inst.policy, inst.reference, inst.batch, cfg, &inst.weight);
      case ObjectiveKind::pos_dpo:
        return pos_dpo_loss(inst.policy, inst.reference, inst.batch, cfg);
      case ObjectiveKind::paired_dpo:
        return paired_dpo_loss(inst.policy, inst.reference, inst.batch, inst.batch_b, cfg);
      case ObjectiveKind::sft:
        return sft_loss(inst.policy, inst.batch, &inst.weight);
      case ObjectiveKind::sft_l2:
        return sft_l2_anchor_loss(inst.policy, inst.reference, inst.batch, cfg.sft_anchor,
                                  &inst.weight);
      case ObjectiveKind::kto:
        return kto_loss(inst.policy, inst.reference, inst.batch, inst.batch_b, inst.batch_ref,
                        cfg);
    }
    throw std::logic_error("make_evaluator: unknown kind");
  };
}

}  // namespace

bool VerifyReport::all_pass() const {
  for (const auto& c : checks)
    if (!c.pass) return false;
  return true;
}

const CheckResult* VerifyReport::first_failure() const {
  for (const auto& c : checks)
    if (!c.pass) return &c;
  return nullptr;
}

std::string VerifyReport::to_text() const {
  std::ostringstream os;
  for (const auto& c : checks) {
    os << (c.pass ? "[PASS] " : "[FAIL] ") << c.name
       << "  measured=" << util::fmt_sci(c.measured) << "  tol=" << util::fmt_sci(c.tolerance);
    if (!c.detail.empty()) os << "  (" << c.detail << ")";
    os << "\n";
  }
  os << (all_pass() ? "verification: all checks passed" : "verification: FAILURES present")
     << "\n";
  return os.str();
}

std::string VerifyReport::to_json() const {
  std::ostringstream os;
  os << "{\n  \"checks\": [\n";
  for (std::size_t i = 0; i < checks.size(); ++i) {
    const auto& c = checks[i];
    os << "    {\"name\": \"" << c.name << "\", \"pass\": " << (c.pass ? "true" : "false")
       << ", \"measured\": " << util::fmt_sci(c.measured)
       << ", \"tolerance\": " << util::fmt_sci(c.tolerance) << "}";
    os << (i + 1 < checks.size() ? ",\n" : "\n");
  }
  os << "  ],\n  \"all_pass\": " << (all_pass() ? "true" : "false") << "\n}\n";
  return os.str();
}

VerifyReport run_verification(const VerifyOptions& options) {
  VerifyReport report;
  auto add = [&report](const std::string& name, double measured, double tol,
                       std::string detail = "") {
    report.checks.push_back({name, measured <= tol, measured, tol, std::move(detail)});
  };

  // --- anchors: every preference objective is exactly ln 2 per sample at
  // policy == reference.
  {
    Instance inst = random_instance(options.seed ^ 0xa11c40ull, false);
    inst.policy = inst.reference.spawn_policy(3, 12345);  // fresh adapter, down factor zero
    ObjectiveConfig cfg;
    cfg.beta = 250.0;

    add("anchor.ln2.ipa",
        std::abs(ipa_loss(inst.policy, inst.reference, inst.batch, cfg, nullptr).value - kLn2),
        1e-9);
    add("anchor.ln2.ipa_halo",
        std::abs(ipa_loss(inst.policy, inst.reference, inst.batch, cfg, &inst.weight).value -
                 kLn2),
        1e-9);
    add("anchor.ln2.pos_dpo",
        std::abs(pos_dpo_loss(inst.policy, inst.reference, inst.batch, cfg).value - kLn2),
        1e-9);
    add("anchor.ln2.paired_dpo",
        std::abs(
            paired_dpo_loss(inst.policy, inst.reference, inst.batch, inst.batch_b, cfg).value -
            kLn2),
        1e-9);
    add("anchor.ln2.kto",
        std::abs(kto_loss(inst.policy, inst.reference, inst.batch, inst.batch_b, inst.batch_ref,
                          cfg)
                     .value -
                 kLn2),
        1e-9);
  }

  // --- saturation: beta * integrand = +20 drives the loss to ~2e-9.
  {
    VelocityField policy = constant_model(1, 1, {1.0}, Role::policy);
    VelocityField reference = constant_model(1, 1, {0.0}, Role::reference);
    // t = 0, v = 1: integrand = 1/2((v-0)^2 - (v-1)^2) = 0.5; beta 40 -> x = 20.
    FlowSample s = make_flow_sample({0.0}, {1.0}, 0.0, {0.0}, {});
    s.v = {1.0};
    s.z1 = {1.0};
    ObjectiveConfig cfg;
    cfg.beta = 40.0;
    std::vector<FlowSample> batch{s};
    add("anchor.saturation", ipa_loss(policy, reference, batch, cfg, nullptr).value, 1e-8,
        "-log sigmoid(+20)");
  }

  // --- gradient self-test on a quadratic with known gradient.
  {
    const int n = 20;
    util::Rng rng(options.seed ^ 0x9u);
    Vec a(static_cast<std::size_t>(n));
    Vec x0(static_cast<std::size_t>(n));
    for (auto& v : a) v = rng.uniform(0.5, 2.0);
    for (auto& v : x0) v = rng.normal();
    const Evaluator quad = [&a](const Vec& x) {
      LossGrad lg;
      lg.grad.resize(x.size());
      for (std::size_t i = 0; i < x.size(); ++i) {
        lg.value += 0.5 * a[i] * x[i] * x[i];
        lg.grad[i] = a[i] * x[i];
      }
      return lg;
    };
    const auto rep = grad_check(quad, x0, 1e-3, n, options.seed);
    add("grad.quadratic_selftest", rep.max_err, 1e-10);
  }

  // --- finite-difference gradient verification for every objective.
  {
    const std::vector<std::pair<ObjectiveKind, bool>> kinds = {
        {ObjectiveKind::ipa, false},      {ObjectiveKind::ipa_halo, false},
        {ObjectiveKind::pos_dpo, false},  {ObjectiveKind::paired_dpo, false},
        {ObjectiveKind::sft, false},      {ObjectiveKind::sft_l2, false},
        {ObjectiveKind::kto, false}};

    // fm with full parameters (the pretraining path).
    {
      Instance inst = random_instance(options.seed ^ 0xf3ull, true);
      Evaluator ev = [&inst](const Vec& params) {
        inst.policy.set_trainable(params);
        return fm_loss(inst.policy, inst.batch);
      };
      const Vec p0 = inst.policy.get_trainable();
      const auto rep = grad_check(ev, p0, 1e-6, options.grad_coords, options.seed ^ 0xf3ull);
      add("grad.fm", rep.max_err, 1e-5, "full-parameter policy");
    }

    int ki = 0;
    for (const auto& [kind, unused] : kinds) {
      (void)unused;
      Instance inst = random_instance(options.seed ^ (0x100ull + static_cast<std::uint64_t>(ki)),
                                      false);
      ObjectiveConfig cfg;
      cfg.kind = kind;
      cfg.beta = 4.0;  // keep the sigmoid away from saturation so FD is informative
      cfg.lambda = 10.0;
      cfg.sft_anchor = 0.7;
      Evaluator ev = make_evaluator(kind, inst, cfg);
      if (options.fault_flip_ipa_grad && kind == ObjectiveKind::ipa) {
        Evaluator base = ev;
        ev = [base](const Vec& p) {
          LossGrad lg = base(p);
          for (auto& g : lg.grad) g = -g;
          return lg;
        };
      }
      const Vec p0 = inst.policy.get_trainable();
      const auto rep =
          grad_check(ev, p0, 1e-6, options.grad_coords,
                     options.seed ^ (0x200ull + static_cast<std::uint64_t>(ki)));
      add("grad." + objective_name(kind), rep.max_err, 1e-5);
      ++ki;
    }
  }

  // --- Gaussian KL closed-form anchors.
  {
    const GaussianSpec std1{{0.0}, {1.0}};
    add("gaussian_kl.zero", gaussian_kl(std1, std1), 0.0, "identical specs");
    add("gaussian_kl.mean_shift",
        std::abs(gaussian_kl(GaussianSpec{{1.0}, {1.0}}, std1) - 0.5), 1e-12);
    add("gaussian_kl.variance",
        std::abs(gaussian_kl(GaussianSpec{{0.0}, {4.0}}, std1) -
                 0.5 * (4.0 - 1.0 - std::log(4.0))),
        1e-12);
  }

  // --- KL rate identity on three distinct Gaussian flow pairs.
  {
    const std::vector<double> grid{0.2, 0.5, 0.8};
    const AnalyticFlow ref1{{{0.0}, {1.0}}, {{0.0}, {1.0}}};
    const AnalyticFlow q1{{{0.0}, {1.0}}, {{1.0}, {1.0}}};
    const AnalyticFlow ref2{{{0.0}, {1.0}}, {{0.5}, {0.7}}};
    const AnalyticFlow q2{{{0.0}, {1.0}}, {{0.0}, {2.0}}};
    const AnalyticFlow ref3{{{0.0, 0.0}, {1.0, 1.0}}, {{0.0, 0.2}, {1.1, 0.9}}};
    const AnalyticFlow q3{{{0.0, 0.0}, {1.0, 1.0}}, {{1.0, -0.5}, {0.6, 1.4}}};

    const std::vector<std::pair<AnalyticFlow, AnalyticFlow>> pairs{
        {ref1, q1}, {ref2, q2}, {ref3, q3}};
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      const auto rep = verify_kl_rate_identity(pairs[i].first, pairs[i].second, grid,
                                               options.kl_mc,
                                               options.seed ^ (0x300ull + i), 0.02);
      double worst = 0.0;
      bool conclusive = true;
      for (const auto& row : rep.rows) {
        worst = std::max(worst, std::max(row.rel_err, row.gap_err));
        if (row.status == CheckStatus::inconclusive) conclusive = false;
      }
      std::ostringstream name;
      name << "kl_rate.pair" << (i + 1);
      add(name.str(), worst, 0.02, conclusive ? "t in {0.2,0.5,0.8}" : "inconclusive MC");
    }

    // Equal flows: the gap channel must vanish within MC noise.
    const auto triv =
        verify_kl_rate_identity(q1, q1, grid, options.kl_mc, options.seed ^ 0x333ull, 0.02);
    double worst_gap = 0.0;
    for (const auto& row : triv.rows)
      worst_gap = std::max(worst_gap,
                           std::abs(row.rhs_gap) / std::max(3.0 * row.gap_mc_se, 1e-12));
    add("kl_rate.trivial_gap", worst_gap, 1.0, "|gap| vs 3 standard errors, equal flows");
  }

  // --- delta estimator is centered at zero for policy == reference.
  {
    Instance inst = random_instance(options.seed ^ 0xdeba5eull, false);
    inst.policy = inst.reference.spawn_policy(3, 999);
    util::Rng data_rng(options.seed ^ 0xdull);
    const int D = inst.policy.shape().state_dim;
    const int Dc = inst.policy.shape().cond_dim;
    const PreferenceSampler sampler = [D, Dc](util::Rng& r, Vec& z1, Vec& c) {
      z1 = r.normal_vec(D);
      c.resize(static_cast<std::size_t>(Dc));
      for (auto& x : c) x = r.uniform(-1.0, 1.0);
    };
    (void)data_rng;
    const auto est =
        estimate_delta(inst.policy, inst.reference, sampler, 2000, options.seed ^ 0xeull);
    add("delta.null", std::abs(est.mean), std::max(3.0 * est.se, 1e-12),
        "policy == reference");
  }

  return report;
}

}  // namespace flowalign
