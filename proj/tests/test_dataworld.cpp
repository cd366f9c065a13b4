#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <set>

#include "flowalign/dataworld.hpp"
#include "statutil.hpp"

using namespace flowalign;

namespace {

SceneSpec small_spec() {
  SceneSpec s;
  s.n_body = 6;
  s.n_hand = 2;
  s.cond_dim = 4;
  s.n_modes = 4;
  return s;
}

VelocityField toy_model(const SceneSpec& spec, std::uint64_t seed) {
  ModelShape shape;
  shape.state_dim = spec.state_dim();
  shape.cond_dim = spec.cond_dim;
  shape.hidden_width = 12;
  shape.hidden_layers = 2;
  shape.time_features = 4;
  return VelocityField(shape, Role::policy, seed);
}

}  // namespace

TEST_CASE("dip statistic exact anchors") {
  // Evenly spaced points: minimal possible dip 1/(2n).
  std::vector<double> grid(10);
  for (int i = 0; i < 10; ++i) grid[static_cast<std::size_t>(i)] = (i + 0.5) / 10.0;
  CHECK(teststat::dip_statistic(grid) == doctest::Approx(0.05).epsilon(1e-12));

  // Two equal atoms: the maximal dip 1/4.
  std::vector<double> two(100, 0.0);
  for (int i = 50; i < 100; ++i) two[static_cast<std::size_t>(i)] = 1.0;
  CHECK(teststat::dip_statistic(two) == doctest::Approx(0.25).epsilon(1e-12));

  // Three equal atoms: 1/6.
  std::vector<double> three;
  for (int k = 0; k < 3; ++k)
    for (int i = 0; i < 100; ++i) three.push_back(static_cast<double>(k));
  CHECK(teststat::dip_statistic(three) == doctest::Approx(1.0 / 6.0).epsilon(1e-12));
}

TEST_CASE("dip statistic separates unimodal from bimodal and is affine invariant") {
  util::Rng rng(1);
  std::vector<double> normal(2000), bimodal(2000);
  for (auto& v : normal) v = rng.normal();
  for (std::size_t i = 0; i < bimodal.size(); ++i)
    bimodal[i] = (i % 2 == 0 ? -2.0 : 2.0) + 0.5 * rng.normal();
  const double d_uni = teststat::dip_statistic(normal);
  const double d_bi = teststat::dip_statistic(bimodal);
  CHECK(d_bi > 5.0 * d_uni);

  std::vector<double> scaled = bimodal;
  for (auto& v : scaled) v = 3.5 * v - 11.0;
  CHECK(teststat::dip_statistic(scaled) == doctest::Approx(d_bi).epsilon(1e-9));
}

TEST_CASE("hand_mask") {
  SceneSpec spec = small_spec();
  const Mask m = hand_mask(spec);
  CHECK(m == Mask{0, 0, 0, 0, 0, 0, 1, 1});
  int popcount = 0;
  for (auto b : m) popcount += b;
  CHECK(popcount == spec.n_hand);
  for (auto b : m) CHECK(b * b == b);  // idempotent under elementwise product
}

TEST_CASE("generate_dataset determinism and shape") {
  const SceneSpec spec = small_spec();
  const auto a = generate_dataset(spec, 50, 7);
  const auto b = generate_dataset(spec, 50, 7);
  REQUIRE(a.size() == 50);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].first == b[i].first);
    CHECK(a[i].second == b[i].second);
    CHECK(a[i].first.size() == static_cast<std::size_t>(spec.state_dim()));
    CHECK(a[i].second.size() == static_cast<std::size_t>(spec.cond_dim));
  }
  const auto c = generate_dataset(spec, 50, 8);
  CHECK(a[0].first != c[0].first);
  CHECK_THROWS_AS(generate_dataset(spec, 0, 7), std::invalid_argument);
}

TEST_CASE("clean samples sit exactly on a mode and score 1") {
  const SceneSpec spec = small_spec();
  const auto data = generate_dataset(spec, 200, 3);
  for (const auto& [z, c] : data) {
    const QualityScore q = quality_score(z, c, spec);
    CHECK(q.value == 1.0);
    for (double e : q.hand_err) CHECK(e == 0.0);
  }
}

TEST_CASE("hand-dimension marginal is multimodal (dip test)") {
  const SceneSpec spec = small_spec();
  const auto data = generate_dataset(spec, 10000, 12);
  std::vector<double> hand0;
  hand0.reserve(data.size());
  for (const auto& [z, c] : data) hand0.push_back(z[static_cast<std::size_t>(spec.n_body)]);
  const double d = teststat::dip_statistic(hand0);
  // Unimodal threshold calibrated on the least-favorable unimodal null at
  // the same sample size.
  const double null_max = teststat::uniform_null_dip_max(10000, 30, 99);
  INFO("dip=" << d << " null_max=" << null_max);
  CHECK(d > 2.0 * null_max);
}

TEST_CASE("corrupt_hands") {
  const SceneSpec spec = small_spec();
  const auto data = generate_dataset(spec, 1, 21);
  const Vec z = data[0].first;
  const Vec c = data[0].second;

  SUBCASE("severity zero is the identity") {
    CHECK(corrupt_hands(z, spec, 0.0, 5) == z);
  }

  SUBCASE("body coordinates are bitwise unchanged for any severity") {
    util::Rng rng(31);
    for (int trial = 0; trial < 100; ++trial) {
      const double sev = rng.uniform();
      const Vec out = corrupt_hands(z, spec, sev, rng.next_u64());
      for (int j = 0; j < spec.n_body; ++j)
        CHECK(out[static_cast<std::size_t>(j)] == z[static_cast<std::size_t>(j)]);
    }
  }

  SUBCASE("severity out of range rejected") {
    CHECK_THROWS_AS(corrupt_hands(z, spec, -0.1, 1), std::invalid_argument);
    CHECK_THROWS_AS(corrupt_hands(z, spec, 1.1, 1), std::invalid_argument);
  }

  SUBCASE("mean quality decreases monotonically in severity") {
    const auto pool = generate_dataset(spec, 1000, 41);
    double prev_mean = 2.0;
    util::Rng seeds(5);
    for (double sev : {0.0, 0.25, 0.5, 0.75, 1.0}) {
      double mean = 0.0;
      for (std::size_t i = 0; i < pool.size(); ++i) {
        const Vec corrupted = corrupt_hands(pool[i].first, spec, sev, 1000 + i);
        mean += quality_score(corrupted, pool[i].second, spec).value;
      }
      mean /= static_cast<double>(pool.size());
      CHECK(mean < prev_mean + 1e-12);
      prev_mean = mean;
    }
  }
}

TEST_CASE("quality_score") {
  const SceneSpec spec = small_spec();
  const auto data = generate_dataset(spec, 400, 55);

  SUBCASE("fully corrupted samples score below 0.5 on average") {
    double mean = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const Vec corrupted = corrupt_hands(data[i].first, spec, 1.0, 7000 + i);
      mean += quality_score(corrupted, data[i].second, spec).value;
    }
    mean /= static_cast<double>(data.size());
    INFO("mean severity-1 score = " << mean);
    CHECK(mean < 0.5);
  }

  SUBCASE("score depends only on hand dimensions") {
    util::Rng rng(66);
    for (int trial = 0; trial < 50; ++trial) {
      Vec z = data[static_cast<std::size_t>(trial)].first;
      const Vec c = data[static_cast<std::size_t>(trial)].second;
      const double before = quality_score(z, c, spec).value;
      for (int j = 0; j < spec.n_body; ++j) z[static_cast<std::size_t>(j)] += rng.normal();
      CHECK(quality_score(z, c, spec).value == before);
    }
  }

  SUBCASE("score is clipped to [0,1]") {
    Vec z = data[0].first;
    z[static_cast<std::size_t>(spec.n_body)] += 100.0;
    const QualityScore q = quality_score(z, data[0].second, spec);
    CHECK(q.value == 0.0);
  }
}

TEST_CASE("curate") {
  const SceneSpec spec = small_spec();
  const VelocityField model = toy_model(spec, 5);

  SUBCASE("threshold zero keeps every candidate") {
    const CurationResult r = curate(model, spec, 64, 4, 0.0, 9, 16, 0.0);
    CHECK(r.audit.n_good == 64);
    CHECK(r.curated.entries.size() + 0 == 64);
    CHECK(r.audit.status == "ok");
  }

  SUBCASE("threshold one with an untrained model yields an explicit empty status") {
    const CurationResult r = curate(model, spec, 64, 4, 1.0, 9, 16, 0.5);
    CHECK(r.curated.entries.empty());
    CHECK(r.audit.status == "empty_curated_set");
  }

  SUBCASE("reproducible from (model, spec, seed, threshold)") {
    const CurationResult a = curate(model, spec, 64, 4, 0.5, 13, 16, 0.25);
    const CurationResult b = curate(model, spec, 64, 4, 0.5, 13, 16, 0.25);
    REQUIRE(a.curated.entries.size() == b.curated.entries.size());
    for (std::size_t i = 0; i < a.curated.entries.size(); ++i) {
      CHECK(a.curated.entries[i].z1 == b.curated.entries[i].z1);
      CHECK(a.curated.entries[i].c == b.curated.entries[i].c);
    }
    CHECK(a.audit.n_pairs == b.audit.n_pairs);
  }

  SUBCASE("every curated entry re-scores at or above the threshold") {
    const CurationResult r = curate(model, spec, 128, 4, 0.4, 17, 16, 0.2);
    for (const auto& e : r.curated.entries) {
      CHECK(quality_score(e.z1, e.c, spec).value >= 0.4);
      CHECK(e.tag == Provenance::self_generated_curated);
      CHECK(e.mask == hand_mask(spec));
    }
    for (const auto& e : r.unpaired_bad.entries)
      CHECK(quality_score(e.z1, e.c, spec).value <= 0.2);
  }

  SUBCASE("pair-case classification is exhaustive and mutually exclusive") {
    const CurationResult r = curate(model, spec, 256, 4, 0.5, 23, 16, 0.25);
    const long pairs_per_condition = 4L * 3L / 2L;
    const long total_pairs = pairs_per_condition * (256 / 4);
    CHECK(r.audit.case1_pairs + r.audit.case2_pairs + r.audit.case3_pairs +
              r.audit.case4_pairs ==
          total_pairs);
    // winners/losers stay aligned and share conditions
    REQUIRE(r.winners.entries.size() == r.losers.entries.size());
    for (std::size_t i = 0; i < r.winners.entries.size(); ++i) {
      CHECK(r.winners.entries[i].c == r.losers.entries[i].c);
      CHECK(r.winners.entries[i].score >= 0.5);
      CHECK(r.losers.entries[i].score <= 0.25);
    }
  }

  SUBCASE("preconditions") {
    CHECK_THROWS_AS(curate(model, spec, 64, 1, 0.5, 1, 16, 0.25), std::invalid_argument);
    CHECK_THROWS_AS(curate(model, spec, 2, 4, 0.5, 1, 16, 0.25), std::invalid_argument);
    CHECK_THROWS_AS(curate(model, spec, 64, 4, 0.5, 1, 16, 0.9), std::invalid_argument);
  }
}

TEST_CASE("containers round-trip") {
  const SceneSpec spec = small_spec();
  const auto dir = std::filesystem::temp_directory_path();

  SUBCASE("dataset") {
    const auto data = generate_dataset(spec, 20, 3);
    const std::string path = (dir / "fa_test_dataset.txt").string();
    save_dataset(path, spec, data);
    SceneSpec loaded_spec;
    const auto loaded = load_dataset(path, &loaded_spec);
    CHECK(loaded_spec == spec);
    REQUIRE(loaded.size() == data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
      CHECK(loaded[i].first == data[i].first);
      CHECK(loaded[i].second == data[i].second);
    }
    std::filesystem::remove(path);
  }

  SUBCASE("preference set with audit") {
    const VelocityField model = toy_model(spec, 5);
    const CurationResult r = curate(model, spec, 64, 4, 0.3, 29, 16, 0.1);
    const std::string path = (dir / "fa_test_prefset.txt").string();
    save_preference_set(path, spec, r.curated, &r.audit);
    SceneSpec loaded_spec;
    const PreferenceSet loaded = load_preference_set(path, &loaded_spec);
    CHECK(loaded_spec == spec);
    CHECK(loaded.threshold == r.curated.threshold);
    REQUIRE(loaded.entries.size() == r.curated.entries.size());
    for (std::size_t i = 0; i < loaded.entries.size(); ++i) {
      CHECK(loaded.entries[i].z1 == r.curated.entries[i].z1);
      CHECK(loaded.entries[i].c == r.curated.entries[i].c);
      CHECK(loaded.entries[i].mask == r.curated.entries[i].mask);
      CHECK(loaded.entries[i].tag == r.curated.entries[i].tag);
    }
    std::filesystem::remove(path);
  }
}
