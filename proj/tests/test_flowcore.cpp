#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include "flowalign/flowcore.hpp"
#include "flowalign/oracles.hpp"

using namespace flowalign;

namespace {

VelocityField small_policy(std::uint64_t seed, int rank = 0) {
  ModelShape shape;
  shape.state_dim = 3;
  shape.cond_dim = 2;
  shape.hidden_width = 8;
  shape.hidden_layers = 2;
  shape.time_features = 4;
  VelocityField base(shape, Role::policy, seed);
  if (rank > 0) return base.spawn_policy(rank, seed ^ 0xffull);
  return base;
}

Vec random_vec(util::Rng& rng, int n) { return rng.normal_vec(n); }

}  // namespace

TEST_CASE("interpolate endpoint identities hold for random vectors") {
  util::Rng rng(42);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + rng.uniform_int(8);
    const Vec z0 = random_vec(rng, n);
    const Vec z1 = random_vec(rng, n);
    CHECK(interpolate(z0, z1, 0.0) == z0);
    CHECK(interpolate(z0, z1, 1.0) == z1);
  }
}

TEST_CASE("interpolate linear arithmetic and errors") {
  CHECK(interpolate({0.0, 0.0}, {2.0, 4.0}, 0.25) == Vec{0.5, 1.0});
  CHECK_THROWS_AS(interpolate({0.0}, {1.0, 2.0}, 0.5), std::invalid_argument);
  CHECK_THROWS_AS(interpolate({0.0}, {1.0}, -0.1), std::invalid_argument);
  CHECK_THROWS_AS(interpolate({0.0}, {1.0}, 1.1), std::invalid_argument);
}

TEST_CASE("target_velocity matches elementwise subtraction") {
  CHECK(target_velocity({1.0, 1.0}, {1.0, 1.0}) == Vec{0.0, 0.0});
  CHECK(target_velocity({1.0, 1.0}, {3.0, 0.0}) == Vec{2.0, -1.0});
  util::Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 1 + rng.uniform_int(6);
    const Vec z0 = random_vec(rng, n);
    const Vec z1 = random_vec(rng, n);
    const Vec v = target_velocity(z0, z1);
    for (int i = 0; i < n; ++i)
      CHECK(v[static_cast<std::size_t>(i)] ==
            z1[static_cast<std::size_t>(i)] - z0[static_cast<std::size_t>(i)]);
  }
  CHECK_THROWS_AS(target_velocity({0.0}, {1.0, 2.0}), std::invalid_argument);
}

TEST_CASE("fm_loss values and finite-difference gradient") {
  util::Rng rng(9);
  VelocityField policy = small_policy(1);

  SUBCASE("zero loss when the model output equals the target") {
    // Constant-output model: zero everything, then the bias of the output
    // layer becomes the prediction.
    Vec theta(static_cast<std::size_t>(policy.num_trainable()), 0.0);
    theta[theta.size() - 3] = 0.5;
    theta[theta.size() - 2] = -1.0;
    theta[theta.size() - 1] = 2.0;
    policy.set_trainable(theta);
    std::vector<FlowSample> batch;
    for (int i = 0; i < 4; ++i) {
      Vec z0 = random_vec(rng, 3);
      Vec z1{z0[0] + 0.5, z0[1] - 1.0, z0[2] + 2.0};  // v = (0.5, -1, 2)
      batch.push_back(make_flow_sample(std::move(z0), std::move(z1), rng.uniform(),
                                       {0.1, 0.2}, {}));
    }
    const LossGrad lg = fm_loss(policy, batch);
    CHECK(lg.value == doctest::Approx(0.0).epsilon(1e-14));
    for (double g : lg.grad) CHECK(g == doctest::Approx(0.0).epsilon(1e-12));
  }

  SUBCASE("scalar example") {
    VelocityField scalar = [] {
      ModelShape s;
      s.state_dim = 1;
      s.cond_dim = 1;
      s.hidden_width = 4;
      s.hidden_layers = 1;
      s.time_features = 2;
      return VelocityField(s, Role::policy, 0);
    }();
    Vec theta(static_cast<std::size_t>(scalar.num_trainable()), 0.0);
    theta[theta.size() - 1] = 0.5;  // output == 0.5 everywhere
    scalar.set_trainable(theta);
    FlowSample s = make_flow_sample({0.0}, {1.5}, 0.0, {0.0}, {});
    std::vector<FlowSample> batch{s};
    CHECK(fm_loss(scalar, batch).value == doctest::Approx(1.0).epsilon(1e-15));
  }

  SUBCASE("gradient matches central finite differences") {
    std::vector<FlowSample> batch;
    for (int i = 0; i < 6; ++i)
      batch.push_back(make_flow_sample(random_vec(rng, 3), random_vec(rng, 3), rng.uniform(),
                                       random_vec(rng, 2), {}));
    VelocityField probe = small_policy(3);
    const ObjectiveEvaluator ev = [&probe, &batch](const Vec& p) {
      probe.set_trainable(p);
      return fm_loss(probe, batch);
    };
    const auto report = grad_check(ev, probe.get_trainable(), 1e-6, 120, 77);
    CHECK(report.max_err <= 1e-5);
  }

  SUBCASE("errors") {
    std::vector<FlowSample> empty;
    CHECK_THROWS_AS(fm_loss(policy, empty), std::invalid_argument);
    std::vector<FlowSample> bad{make_flow_sample({0.0, 0.0, 0.0}, {1.0, 1.0, 1.0}, 0.5,
                                                 {0.0, 0.0}, {})};
    bad[0].zt[1] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_WITH_AS(fm_loss(small_policy(5), bad),
                         doctest::Contains("sample 0"), std::runtime_error);
  }
}

TEST_CASE("sample_ode is exact for fields constant in z and t") {
  util::Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 1 + rng.uniform_int(4);
    const Vec u = random_vec(rng, n);
    const Vec z0 = random_vec(rng, n);
    for (int steps : {1, 3, 17, 128}) {
      const Vec z1 = integrate_ode([&u](const Vec&, double) { return u; }, z0, steps);
      for (int i = 0; i < n; ++i)
        CHECK(z1[static_cast<std::size_t>(i)] ==
              doctest::Approx(z0[static_cast<std::size_t>(i)] + u[static_cast<std::size_t>(i)])
                  .epsilon(1e-13));
    }
  }
}

TEST_CASE("sample_ode with the zero field returns z0 and reports bad states") {
  const Vec z0{1.0, -2.0};
  const Vec out = integrate_ode([](const Vec& z, double) { return Vec(z.size(), 0.0); }, z0, 10);
  CHECK(out == z0);
  CHECK_THROWS_AS(integrate_ode([](const Vec& z, double) { return Vec(z.size(), 0.0); }, z0, 0),
                  std::invalid_argument);
  CHECK_THROWS_WITH_AS(
      integrate_ode(
          [](const Vec& z, double) {
            return Vec(z.size(), std::numeric_limits<double>::infinity());
          },
          z0, 10),
      doctest::Contains("step 0"), std::runtime_error);
}

TEST_CASE("ODE transport of the analytic Gaussian field hits the target moments") {
  // Integrating the marginal velocity of a Gaussian flow transports source
  // draws to the target distribution; 512 Euler steps keep the bias well
  // under the 2% check.
  const AnalyticFlow flow{{{0.0}, {1.0}}, {{1.5}, {0.49}}};
  util::Rng rng(123);
  const int n = 40000;
  double sum = 0.0, sum_sq = 0.0;
  for (int i = 0; i < n; ++i) {
    Vec z0{rng.normal()};
    const Vec z1 = integrate_ode(
        [&flow](const Vec& z, double t) { return analytic_velocity(flow, z, t); }, z0, 512);
    sum += z1[0];
    sum_sq += z1[0] * z1[0];
  }
  const double mean = sum / n;
  const double var = sum_sq / n - mean * mean;
  CHECK(std::abs(mean - 1.5) <= 0.02 * 1.5);
  CHECK(std::abs(var - 0.49) <= 0.02 * 0.49);
}

TEST_CASE("adapter merge preserves behavior") {
  util::Rng rng(5);
  VelocityField policy = small_policy(21, 2);

  SUBCASE("zero adapter: outputs equal the base bitwise") {
    VelocityField merged = adapter_merge(policy);
    for (int i = 0; i < 20; ++i) {
      const Vec z = random_vec(rng, 3);
      const Vec c = random_vec(rng, 2);
      const double t = rng.uniform();
      CHECK(policy.forward(z, t, c) == merged.forward(z, t, c));
    }
  }

  SUBCASE("random adapter: merged forward agrees within 1e-12 relative") {
    Vec theta = policy.get_trainable();
    for (auto& x : theta) x = 0.3 * rng.normal();
    policy.set_trainable(theta);
    VelocityField merged = adapter_merge(policy);
    CHECK_FALSE(merged.has_adapter());
    for (int i = 0; i < 50; ++i) {
      const Vec z = random_vec(rng, 3);
      const Vec c = random_vec(rng, 2);
      const double t = rng.uniform();
      const Vec a = policy.forward(z, t, c);
      const Vec b = merged.forward(z, t, c);
      for (std::size_t j = 0; j < a.size(); ++j) {
        const double scale = std::max({std::abs(a[j]), std::abs(b[j]), 1e-6});
        CHECK(std::abs(a[j] - b[j]) / scale <= 1e-12);
      }
    }
  }

  SUBCASE("full-rank adapter keeps the same bound") {
    VelocityField full = small_policy(22, 8);  // rank = hidden width
    Vec theta = full.get_trainable();
    for (auto& x : theta) x = 0.2 * rng.normal();
    full.set_trainable(theta);
    VelocityField merged = adapter_merge(full);
    for (int i = 0; i < 20; ++i) {
      const Vec z = random_vec(rng, 3);
      const Vec c = random_vec(rng, 2);
      const double t = rng.uniform();
      const Vec a = full.forward(z, t, c);
      const Vec b = merged.forward(z, t, c);
      for (std::size_t j = 0; j < a.size(); ++j) {
        const double scale = std::max({std::abs(a[j]), std::abs(b[j]), 1e-6});
        CHECK(std::abs(a[j] - b[j]) / scale <= 1e-12);
      }
    }
  }

  SUBCASE("merge without adapter is an error") {
    CHECK_THROWS_AS(adapter_merge(small_policy(23, 0)), std::invalid_argument);
  }
}

TEST_CASE("fresh policy equals its reference bitwise (zero-initialized down factor)") {
  VelocityField base = small_policy(31);
  const VelocityField reference = base.frozen_copy();
  const VelocityField policy = reference.spawn_policy(4, 999);
  util::Rng rng(8);
  for (int i = 0; i < 30; ++i) {
    const Vec z = random_vec(rng, 3);
    const Vec c = random_vec(rng, 2);
    const double t = rng.uniform();
    CHECK(policy.forward(z, t, c) == reference.forward(z, t, c));
  }
  CHECK(policy.deviation_from(reference) == 0.0);
}

TEST_CASE("reference-role models are frozen") {
  const VelocityField reference = small_policy(41).frozen_copy();
  CHECK(reference.num_trainable() == 0);
  CHECK_THROWS_AS(reference.get_trainable(), std::logic_error);
  VelocityField ref2 = reference;
  CHECK_THROWS_AS(ref2.set_trainable({}), std::logic_error);
}

TEST_CASE("checkpoint round-trip preserves parameters and behavior") {
  util::Rng rng(50);
  VelocityField policy = small_policy(51, 3);
  Vec theta = policy.get_trainable();
  for (auto& x : theta) x = rng.normal();
  policy.set_trainable(theta);

  const std::string path =
      (std::filesystem::temp_directory_path() / "flowalign_ckpt_test.ckpt").string();
  policy.save(path);
  const VelocityField loaded = VelocityField::load(path);
  CHECK(loaded.role() == Role::policy);
  CHECK(loaded.adapter_rank() == 3);
  CHECK(loaded.param_hash() == policy.param_hash());
  for (int i = 0; i < 10; ++i) {
    const Vec z = random_vec(rng, 3);
    const Vec c = random_vec(rng, 2);
    const double t = rng.uniform();
    CHECK(loaded.forward(z, t, c) == policy.forward(z, t, c));
  }
  std::filesystem::remove(path);
}

TEST_CASE("flow sample construction enforces invariants") {
  util::Rng rng(60);
  const Vec z0 = random_vec(rng, 4);
  const Vec z1 = random_vec(rng, 4);
  const FlowSample s = make_flow_sample(z0, z1, 0.3, {0.0}, {0, 0, 1, 1});
  CHECK(s.zt == interpolate(z0, z1, 0.3));
  CHECK(s.v == target_velocity(z0, z1));
  CHECK_THROWS_AS(make_flow_sample(z0, z1, 0.3, {}, {0, 2, 0, 0}), std::invalid_argument);
  CHECK_THROWS_AS(make_flow_sample(z0, z1, 0.3, {}, {1, 0}), std::invalid_argument);
}
