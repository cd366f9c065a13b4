#include "flowalign/trainlab.hpp"

#include <algorithm>
#include <atomic>
#include <limits>
#include <sstream>
#include <thread>

namespace flowalign {

std::string optimizer_name(OptimizerKind k) {
  return k == OptimizerKind::sgd ? "sgd" : "adam";
}

OptimizerKind optimizer_from_name(const std::string& name) {
  if (name == "sgd") return OptimizerKind::sgd;
  if (name == "adam") return OptimizerKind::adam;
  throw std::invalid_argument("unknown optimizer '" + name + "'");
}

void TrainConfig::validate() const {
  objective.validate();
  if (steps < 1) throw std::invalid_argument("train config: steps must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
  if (learning_rate < 0.0)
    throw std::invalid_argument("train config: learning_rate must be >= 0");
  if (adapter_rank < 0) throw std::invalid_argument("train config: adapter_rank must be >= 0");
  if (eval_every < 1) throw std::invalid_argument("train config: eval_every must be >= 1");
  if (delta_probe_entries < 1 || delta_probe_tgrid < 1)
    throw std::invalid_argument("train config: delta probe sizes must be >= 1");
}

namespace {

// SGD with norm clipping and a linear warmdown over the second half of the
// run (the default: raw gradient scale preserves the channels that the
// constraint coefficient and the spatial weighting act through, and the
// decay phase consolidates into the saturated regime), plus Adam with fixed
// hyperparameters as the adaptive alternative.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double lr, std::size_t n, long total_steps)
      : kind_(kind), lr_(lr), total_(total_steps), m_(n, 0.0), v_(n, 0.0) {}

  static constexpr double kClipNorm = 1.0;
  static constexpr double kFinalLrFraction = 0.02;

  void step(Vec& theta, const Vec& grad) {
    ++t_;
    if (kind_ == OptimizerKind::sgd) {
      const double g2 = util::dot(grad, grad);
      const double clip = (g2 > kClipNorm * kClipNorm) ? kClipNorm / std::sqrt(g2) : 1.0;
      const double lr = lr_ * warmdown();
      for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= lr * clip * grad[i];
      return;
    }
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m_[i] = b1 * m_[i] + (1.0 - b1) * grad[i];
      v_[i] = b2 * v_[i] + (1.0 - b2) * grad[i] * grad[i];
      theta[i] -= lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps);
    }
  }

 private:
  double warmdown() const {
    if (total_ < 2) return 1.0;
    const double progress = static_cast<double>(t_ - 1) / static_cast<double>(total_ - 1);
    if (progress <= 0.5) return 1.0;
    const double f = (progress - 0.5) / 0.5;
    return 1.0 - (1.0 - kFinalLrFraction) * f;
  }

  OptimizerKind kind_;
  double lr_;
  long total_;
  long t_ = 0;
  Vec m_, v_;
};

FlowSample draw_sample(const PrefEntry& e, double t, util::Rng& rng, int state_dim) {
  Vec z0 = rng.normal_vec(state_dim);
  return make_flow_sample(std::move(z0), e.z1, t, e.c, e.mask);
}

const std::vector<PrefEntry>& need(const std::vector<PrefEntry>* set, const char* what) {
  if (set == nullptr || set->empty())
    throw std::invalid_argument(std::string("train: objective requires nonempty ") + what);
  return *set;
}

bool kind_uses_weight(ObjectiveKind k) {
  return k == ObjectiveKind::ipa_halo || k == ObjectiveKind::sft || k == ObjectiveKind::sft_l2;
}

}  // namespace

RunRecord train(VelocityField& policy, const VelocityField& reference, const TrainData& data,
                const TrainConfig& config, const EvalSets* evals,
                const EvalConfig* eval_config) {
  config.validate();
  if (reference.role() != Role::reference)
    throw std::invalid_argument("train: reference must be reference-role");
  if (policy.role() != Role::policy)
    throw std::invalid_argument("train: policy must be policy-role");

  const ObjectiveKind kind = config.objective.kind;
  const std::vector<PrefEntry>& good = need(data.good, "good set");
  const int state_dim = policy.shape().state_dim;

  std::optional<SpatialWeight> weight;
  if (kind_uses_weight(kind))
    weight = make_spatial_weight(good.front().mask, config.objective.lambda);
  const SpatialWeight* wptr = weight ? &*weight : nullptr;

  // Fixed delta probe: deterministic entries, z0 draws and t-grid so the
  // trace is smooth and comparable across steps.
  util::Rng probe_rng(config.seed ^ 0x90be5eedull);
  std::vector<FlowSample> probe;
  {
    const int n_entries = std::min<int>(config.delta_probe_entries,
                                        static_cast<int>(good.size()));
    for (int i = 0; i < n_entries; ++i) {
      const PrefEntry& e = good[static_cast<std::size_t>(i) * good.size() / static_cast<std::size_t>(n_entries)];
      for (int j = 0; j < config.delta_probe_tgrid; ++j) {
        const double t = (static_cast<double>(j) + 0.5) / config.delta_probe_tgrid;
        probe.push_back(draw_sample(e, t, probe_rng, state_dim));
      }
    }
  }
  auto probe_delta = [&]() {
    double acc = 0.0;
    for (const FlowSample& s : probe) acc += delta_integrand(policy, reference, s, wptr);
    return acc / static_cast<double>(probe.size());
  };

  util::Rng rng(config.seed);
  Optimizer opt(config.optimizer, config.learning_rate,
                static_cast<std::size_t>(policy.num_trainable()), config.steps);
  RunRecord record;
  Vec last_good = policy.get_trainable();

  auto append_eval = [&](int step) {
    if (evals == nullptr) return;
    const EvalConfig ec = (eval_config != nullptr) ? *eval_config : EvalConfig{};
    const MetricReport m = evaluate(policy, reference, *evals, evals->spec, ec);
    EvalRow row;
    row.step = step;
    row.alignment = m.alignment;
    row.retention = m.retention;
    row.hand_err = m.hand_err;
    row.body_err = m.body_err;
    row.delta = m.delta_final.mean;
    row.delta_se = m.delta_final.se;
    record.evals.push_back(row);
  };

  for (int step = 0; step < config.steps; ++step) {
    // Assemble the step batch. The draw order is fixed per objective so runs
    // are reproducible bit for bit.
    std::vector<FlowSample> batch, batch_b, batch_ref;
    if (kind == ObjectiveKind::paired_dpo) {
      const auto& winners = need(data.winners, "paired winner set");
      const auto& losers = need(data.losers, "paired loser set");
      if (winners.size() != losers.size())
        throw std::invalid_argument("train: winner/loser sets must be aligned");
      for (int i = 0; i < config.batch_size; ++i) {
        const int ix = rng.uniform_int(static_cast<int>(winners.size()));
        const double t = rng.uniform();
        batch.push_back(draw_sample(winners[static_cast<std::size_t>(ix)], t, rng, state_dim));
        batch_b.push_back(draw_sample(losers[static_cast<std::size_t>(ix)], t, rng, state_dim));
      }
    } else if (kind == ObjectiveKind::kto) {
      const auto& bad = need(data.bad, "bad set");
      for (int i = 0; i < config.batch_size; ++i) {
        const int ix = rng.uniform_int(static_cast<int>(good.size()));
        batch.push_back(draw_sample(good[static_cast<std::size_t>(ix)], rng.uniform(), rng, state_dim));
      }
      for (int i = 0; i < config.batch_size; ++i) {
        const int ix = rng.uniform_int(static_cast<int>(bad.size()));
        batch_b.push_back(draw_sample(bad[static_cast<std::size_t>(ix)], rng.uniform(), rng, state_dim));
      }
      for (int i = 0; i < config.objective.kto_ref_batch; ++i) {
        const int ix = rng.uniform_int(static_cast<int>(good.size()));
        batch_ref.push_back(draw_sample(good[static_cast<std::size_t>(ix)], rng.uniform(), rng, state_dim));
      }
    } else {
      for (int i = 0; i < config.batch_size; ++i) {
        const int ix = rng.uniform_int(static_cast<int>(good.size()));
        batch.push_back(draw_sample(good[static_cast<std::size_t>(ix)], rng.uniform(), rng, state_dim));
      }
    }

    LossGrad lg;
    try {
      switch (kind) {
        case ObjectiveKind::ipa:
          lg = ipa_loss(policy, reference, batch, config.objective, nullptr);
          break;
        case ObjectiveKind::ipa_halo:
          lg = ipa_loss(policy, reference, batch, config.objective, wptr);
          break;
        case ObjectiveKind::pos_dpo:
          lg = pos_dpo_loss(policy, reference, batch, config.objective);
          break;
        case ObjectiveKind::paired_dpo:
          lg = paired_dpo_loss(policy, reference, batch, batch_b, config.objective);
          break;
        case ObjectiveKind::sft:
          lg = sft_loss(policy, batch, wptr);
          break;
        case ObjectiveKind::sft_l2:
          lg = sft_l2_anchor_loss(policy, reference, batch, config.objective.sft_anchor, wptr);
          break;
        case ObjectiveKind::kto:
          lg = kto_loss(policy, reference, batch, batch_b, batch_ref, config.objective);
          break;
      }
    } catch (const std::runtime_error&) {
      // Divergence: restore the last finite parameters and stop.
      policy.set_trainable(last_good);
      record.diverged = true;
      record.divergence_step = step;
      break;
    }
    last_good = policy.get_trainable();

    StepRow row;
    row.step = step;
    row.loss = lg.value;
    row.delta = probe_delta();
    row.grad_norm = util::norm2(lg.grad);
    row.param_dev = policy.deviation_from(reference);
    record.steps.push_back(row);

    if (evals != nullptr && step % config.eval_every == 0) append_eval(step);

    Vec theta = policy.get_trainable();
    opt.step(theta, lg.grad);
    policy.set_trainable(theta);
  }

  record.final_param_dev = policy.deviation_from(reference);
  if (evals != nullptr && !record.diverged) append_eval(config.steps);

  // Final unweighted delta estimate over the good set (random t and z0).
  {
    const PreferenceSampler sampler = [&good](util::Rng& r, Vec& z1, Vec& c) {
      const auto& e = good[static_cast<std::size_t>(r.uniform_int(static_cast<int>(good.size())))];
      z1 = e.z1;
      c = e.c;
    };
    record.delta_final =
        estimate_delta(policy, reference, sampler, 2048, config.seed ^ 0xde17afefull);
  }
  return record;
}

double field_flow_error(const VelocityFn2& field, std::span<const PrefEntry> entries,
                        const Mask* restrict_to, int t_grid, int z0_draws, std::uint64_t seed) {
  if (entries.empty()) throw std::invalid_argument("field_flow_error: empty eval set");
  util::Rng root(seed);
  double acc = 0.0;
  long count = 0;
  for (std::size_t ei = 0; ei < entries.size(); ++ei) {
    const PrefEntry& e = entries[ei];
    util::Rng rng = root.fork(ei);
    for (int ti = 0; ti < t_grid; ++ti) {
      const double t = (static_cast<double>(ti) + 0.5) / t_grid;
      for (int d = 0; d < z0_draws; ++d) {
        Vec z0 = rng.normal_vec(static_cast<int>(e.z1.size()));
        const FlowSample s = make_flow_sample(std::move(z0), e.z1, t, e.c, {});
        const Vec y = field(s.zt, s.t, s.c);
        double err = 0.0;
        for (std::size_t j = 0; j < y.size(); ++j) {
          if (restrict_to != nullptr && (*restrict_to)[j] == 0) continue;
          const double r = y[j] - s.v[j];
          err += r * r;
        }
        acc += err;
        ++count;
      }
    }
  }
  return acc / static_cast<double>(count);
}

MetricReport evaluate(const VelocityField& policy, const VelocityField& reference,
                      const EvalSets& sets, const SceneSpec& spec, const EvalConfig& config) {
  if (sets.alignment_set.empty() || sets.retention_set.empty())
    throw std::invalid_argument("evaluate: empty eval set");

  const VelocityFn2 field = [&policy](const Vec& z, double t, const Vec& c) {
    return policy.forward(z, t, c);
  };
  const Mask hmask = hand_mask(spec);
  Mask bmask(hmask.size());
  for (std::size_t i = 0; i < hmask.size(); ++i) bmask[i] = hmask[i] ? 0 : 1;

  MetricReport m;
  m.alignment = field_flow_error(field, sets.alignment_set, nullptr, config.t_grid,
                                 config.z0_draws, config.seed);
  m.retention = field_flow_error(field, sets.retention_set, nullptr, config.t_grid,
                                 config.z0_draws, config.seed + 1);
  m.hand_err = field_flow_error(field, sets.retention_set, &hmask, config.t_grid,
                                config.z0_draws, config.seed + 1);
  m.body_err = field_flow_error(field, sets.retention_set, &bmask, config.t_grid,
                                config.z0_draws, config.seed + 1);

  const auto& align = sets.alignment_set;
  const PreferenceSampler sampler = [&align](util::Rng& r, Vec& z1, Vec& c) {
    const auto& e = align[static_cast<std::size_t>(r.uniform_int(static_cast<int>(align.size())))];
    z1 = e.z1;
    c = e.c;
  };
  m.delta_final = estimate_delta(policy, reference, sampler, config.delta_samples,
                                 config.seed + 2);
  m.param_dev = (policy.role() == Role::policy) ? policy.deviation_from(reference) : 0.0;
  return m;
}

PretrainResult pretrain_base(const SceneSpec& spec, const PretrainConfig& config) {
  spec.validate();
  if (config.steps < 1) throw std::invalid_argument("pretrain: steps must be >= 1");
  ModelShape shape = config.shape;
  shape.state_dim = spec.state_dim();
  shape.cond_dim = spec.cond_dim;

  const SceneModel scene(spec);
  util::Rng rng(config.seed);
  PretrainResult result{VelocityField(shape, Role::policy, config.seed ^ 0xba5e11ull), {}};
  VelocityField& model = result.model;
  Optimizer opt(OptimizerKind::adam, config.learning_rate,
                static_cast<std::size_t>(model.num_trainable()), config.steps);

  for (int step = 0; step < config.steps; ++step) {
    std::vector<FlowSample> batch;
    batch.reserve(static_cast<std::size_t>(config.batch_size));
    for (int i = 0; i < config.batch_size; ++i) {
      const Vec c = scene.sample_condition(rng);
      Vec z1 = scene.clean_sample(c, rng);
      const double corrupt_draw = rng.uniform();
      const double severity = rng.uniform();
      const std::uint64_t sub_seed = rng.next_u64();
      if (corrupt_draw < config.corrupt_prob)
        z1 = corrupt_hands(z1, spec, severity, sub_seed);
      Vec z0 = rng.normal_vec(spec.state_dim());
      batch.push_back(make_flow_sample(std::move(z0), std::move(z1), rng.uniform(), c, {}));
    }
    const LossGrad lg = fm_loss(model, batch);
    StepRow row;
    row.step = step;
    row.loss = lg.value;
    row.grad_norm = util::norm2(lg.grad);
    result.log.push_back(row);

    Vec theta = model.get_trainable();
    opt.step(theta, lg.grad);
    model.set_trainable(theta);
  }
  return result;
}

void parallel_for(int n, int jobs, const std::function<void(int)>& fn) {
  if (n <= 0) return;
  jobs = std::max(1, std::min(jobs, n));
  if (jobs == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(jobs));
  for (int w = 0; w < jobs; ++w) {
    pool.emplace_back([&, w]() {
      try {
        while (true) {
          const int i = next.fetch_add(1);
          if (i >= n) break;
          fn(i);
        }
      } catch (...) {
        errors[static_cast<std::size_t>(w)] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

namespace {

SweepRow run_one(const VelocityField& reference, const TrainData& data, const EvalSets& evals,
                 const SceneSpec& spec, const TrainConfig& cfg, double swept_value) {
  VelocityField policy = reference.spawn_policy(cfg.adapter_rank, cfg.seed ^ 0xada9cedull);
  SweepRow row;
  row.value = swept_value;
  row.record = train(policy, reference, data, cfg);
  row.final_loss = row.record.steps.empty() ? std::numeric_limits<double>::quiet_NaN()
                                            : row.record.steps.back().loss;
  row.metrics = evaluate(policy, reference, evals, spec);
  row.metrics.param_dev = policy.deviation_from(reference);
  return row;
}

}  // namespace

std::vector<SweepRow> sweep_beta(const VelocityField& reference, const TrainData& data,
                                 const EvalSets& evals, const SceneSpec& spec,
                                 const TrainConfig& base, std::span<const double> beta_grid,
                                 int jobs) {
  if (beta_grid.empty()) throw std::invalid_argument("sweep_beta: empty grid");
  std::vector<SweepRow> rows(beta_grid.size());
  parallel_for(static_cast<int>(beta_grid.size()), jobs, [&](int i) {
    TrainConfig cfg = base;
    cfg.objective.beta = beta_grid[static_cast<std::size_t>(i)];
    rows[static_cast<std::size_t>(i)] =
        run_one(reference, data, evals, spec, cfg, beta_grid[static_cast<std::size_t>(i)]);
  });
  return rows;
}

std::vector<SweepRow> sweep_lambda(const VelocityField& reference, const TrainData& data,
                                   const EvalSets& evals, const SceneSpec& spec,
                                   const TrainConfig& base, std::span<const double> lambda_grid,
                                   int jobs) {
  if (lambda_grid.empty()) throw std::invalid_argument("sweep_lambda: empty grid");
  std::vector<SweepRow> rows(lambda_grid.size());
  parallel_for(static_cast<int>(lambda_grid.size()), jobs, [&](int i) {
    TrainConfig cfg = base;
    cfg.objective.kind = ObjectiveKind::ipa_halo;
    cfg.objective.lambda = lambda_grid[static_cast<std::size_t>(i)];
    rows[static_cast<std::size_t>(i)] =
        run_one(reference, data, evals, spec, cfg, lambda_grid[static_cast<std::size_t>(i)]);
  });
  return rows;
}

ObjectiveComparison compare_objectives(const VelocityField& reference,
                                       const CurationResult& data, const EvalSets& evals,
                                       const SceneSpec& spec, const TrainConfig& base,
                                       std::span<const ObjectiveKind> kinds, int jobs) {
  ObjectiveComparison cmp;
  cmp.pair_yield = static_cast<int>(data.winners.entries.size());
  cmp.bad_yield = static_cast<int>(data.unpaired_bad.entries.size());
  cmp.rows.resize(kinds.size());

  parallel_for(static_cast<int>(kinds.size()), jobs, [&](int i) {
    const ObjectiveKind kind = kinds[static_cast<std::size_t>(i)];
    ObjectiveRow& row = cmp.rows[static_cast<std::size_t>(i)];
    row.kind = kind;
    if (kind == ObjectiveKind::paired_dpo && data.winners.entries.empty()) {
      row.status = "skipped: zero strict-pair yield";
      return;
    }
    if (kind == ObjectiveKind::kto && data.unpaired_bad.entries.empty()) {
      row.status = "skipped: no unpaired bad samples";
      return;
    }
    TrainConfig cfg = base;
    cfg.objective.kind = kind;
    // Unweighted ipa baseline; the hand-weighted kinds share base lambda.
    if (kind == ObjectiveKind::ipa) cfg.objective.lambda = 0.0;

    TrainData td;
    td.good = &data.curated.entries;
    td.winners = &data.winners.entries;
    td.losers = &data.losers.entries;
    td.bad = &data.unpaired_bad.entries;

    VelocityField policy = reference.spawn_policy(cfg.adapter_rank, cfg.seed ^ 0xada9cedull);
    row.record = train(policy, reference, td, cfg);
    row.final_loss = row.record.steps.empty() ? std::numeric_limits<double>::quiet_NaN()
                                              : row.record.steps.back().loss;
    row.metrics = evaluate(policy, reference, evals, spec);
    row.metrics.param_dev = policy.deviation_from(reference);
    row.status = row.record.diverged ? "diverged" : "ok";
  });
  return cmp;
}

// --- telemetry rendering -------------------------------------------------

CsvTable train_log_csv(const RunRecord& record,
                       const std::vector<std::string>& header_comments) {
  CsvTable t;
  t.comments = header_comments;
  if (record.diverged) {
    std::ostringstream os;
    os << "diverged_at_step " << record.divergence_step
       << " (parameters restored to last finite step)";
    t.comments.push_back(os.str());
  }
  t.header = {"step", "loss", "delta", "grad_norm", "param_dev"};
  for (const auto& r : record.steps)
    t.rows.push_back({std::to_string(r.step), util::fmt_sci(r.loss), util::fmt_sci(r.delta),
                      util::fmt_sci(r.grad_norm), util::fmt_sci(r.param_dev)});
  return t;
}

CsvTable eval_log_csv(const RunRecord& record) {
  CsvTable t;
  t.header = {"step", "alignment", "retention", "hand_err", "body_err", "delta", "delta_se"};
  for (const auto& r : record.evals)
    t.rows.push_back({std::to_string(r.step), util::fmt_sci(r.alignment),
                      util::fmt_sci(r.retention), util::fmt_sci(r.hand_err),
                      util::fmt_sci(r.body_err), util::fmt_sci(r.delta),
                      util::fmt_sci(r.delta_se)});
  return t;
}

CsvTable pretrain_log_csv(const std::vector<StepRow>& log) {
  CsvTable t;
  t.header = {"step", "loss", "grad_norm"};
  for (const auto& r : log)
    t.rows.push_back({std::to_string(r.step), util::fmt_sci(r.loss),
                      util::fmt_sci(r.grad_norm)});
  return t;
}

namespace {
std::vector<std::string> metric_cells(const MetricReport& m) {
  return {util::fmt_sci(m.alignment),        util::fmt_sci(m.retention),
          util::fmt_sci(m.hand_err),         util::fmt_sci(m.body_err),
          util::fmt_sci(m.delta_final.mean), util::fmt_sci(m.delta_final.se),
          util::fmt_sci(m.param_dev)};
}
}  // namespace

CsvTable metrics_csv(const MetricReport& reference_metrics, const MetricReport& policy_metrics) {
  CsvTable t;
  t.header = {"model",    "alignment", "retention", "hand_err",
              "body_err", "delta",     "delta_se",  "param_dev"};
  auto row = [&](const char* name, const MetricReport& m) {
    std::vector<std::string> cells{name};
    for (auto& c : metric_cells(m)) cells.push_back(c);
    t.rows.push_back(std::move(cells));
  };
  row("reference", reference_metrics);
  row("policy", policy_metrics);
  return t;
}

CsvTable sweep_csv(const std::string& param_name, const std::vector<SweepRow>& rows) {
  CsvTable t;
  t.header = {param_name,  "final_loss", "alignment", "retention", "hand_err",
              "body_err",  "delta",      "delta_se",  "param_dev"};
  for (const auto& r : rows) {
    std::vector<std::string> cells{util::fmt_sci(r.value), util::fmt_sci(r.final_loss)};
    for (auto& c : metric_cells(r.metrics)) cells.push_back(c);
    t.rows.push_back(std::move(cells));
  }
  return t;
}

CsvTable comparison_csv(const ObjectiveComparison& cmp) {
  CsvTable t;
  {
    std::ostringstream os;
    os << "pair_yield " << cmp.pair_yield << " unpaired_bad_yield " << cmp.bad_yield;
    t.comments.push_back(os.str());
  }
  t.header = {"objective", "status",   "final_loss", "alignment", "retention",
              "hand_err",  "body_err", "delta",      "delta_se",  "param_dev",
              "pair_yield"};
  for (const auto& r : cmp.rows) {
    std::vector<std::string> cells{objective_name(r.kind), r.status,
                                   util::fmt_sci(r.final_loss)};
    for (auto& c : metric_cells(r.metrics)) cells.push_back(c);
    cells.push_back(r.kind == ObjectiveKind::paired_dpo ? std::to_string(cmp.pair_yield) : "");
    t.rows.push_back(std::move(cells));
  }
  return t;
}

}  // namespace flowalign
