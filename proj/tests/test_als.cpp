#include <cmath>
#include <filesystem>
#include <set>

#include "doctest.h"
#include "ilm/als.hpp"
#include "ilm/error.hpp"
#include "oracles.hpp"

using namespace ilm;
using namespace ilm::testing;

namespace {

// Positive root of x(c x² + λ) = c x, i.e. the symmetric 1×1 fixed point.
double bisect_fixed_point(double c, double lambda) {
  auto f = [&](double x) { return c * x * x + lambda - c; };
  double lo = 0.0, hi = 1.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (f(mid) < 0 ? lo : hi) = mid;
  }
  const double x = 0.5 * (lo + hi);
  return x * x;
}

}  // namespace

TEST_CASE("duplicates are summed and indices checked") {
  InteractionMatrix x(2, 2, {{0, 1, 1.0}, {0, 1, 2.0}, {1, 0, 1.0}});
  CHECK(x.nnz() == 2);
  CHECK(x.user_row(0)[0].weight == 3.0);
  CHECK_THROWS_AS(InteractionMatrix(2, 2, {{2, 0, 1.0}}), DimensionError);
}

TEST_CASE("all-zero interactions drive factors to zero") {
  InteractionMatrix x(4, 5, {});
  AlsConfig config{3, 40.0, 0.1, 5};
  Rng rng(1);
  auto m = init_factors(4, 5, config, rng);
  m.users.setConstant(0.7);
  for (int s = 0; s < 5; ++s) ials_sweep(m, x);
  CHECK(m.users.norm() < 1e-12);
  CHECK(m.items.norm() < 1e-12);
  CHECK_THROWS_AS(train_mf(x, config, rng), UsageError);
}

TEST_CASE("1x1 single observation reaches the scalar fixed point") {
  for (double w : {1.0, 3.0}) {
    for (double lambda : {0.1, 2.0}) {
      AlsConfig config{1, 40.0, lambda, 200000, 0.0};
      InteractionMatrix x(1, 1, {{0, 0, w}});
      Rng rng(5);
      auto result = train_mf(x, config, rng);
      const double s = result.model.users(0, 0) * result.model.items(0, 0);
      CHECK(s == doctest::Approx(bisect_fixed_point(1.0 + 40.0 * w, lambda)).epsilon(1e-9));
    }
  }
}

TEST_CASE("planted rank-2 recovery") {
  Rng data_rng(11);
  const Planted p = planted_rank2(data_rng);
  REQUIRE(p.held_out.size() > 10);
  InteractionMatrix x(20, 30, p.train);
  AlsConfig config{2, 40.0, 0.1, 30, 0.0};
  Rng rng(12);
  const auto result = train_mf(x, config, rng);
  CHECK(result.objective_trace.size() == 31);
  CHECK(brute_auc(result.model, p) > 0.9);
}

TEST_CASE("objective is nonincreasing on random datasets") {
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    Rng rng(seed);
    const auto x = random_matrix(rng, 15 + seed, 12, 0.2);
    AlsConfig config{4, 40.0, 0.1, 30, 0.0};
    const auto result = train_mf(x, config, rng);
    for (std::size_t i = 1; i < result.objective_trace.size(); ++i) {
      CHECK(result.objective_trace[i] <= result.objective_trace[i - 1] + 1e-9);
    }
  }
}

TEST_CASE("determinism, ridge shrinkage and thread agreement") {
  Rng data(3);
  const auto x = random_matrix(data, 30, 25, 0.15);
  AlsConfig config{5, 40.0, 0.1, 20};
  Rng a(9), b(9);
  const auto ra = train_mf(x, config, a), rb = train_mf(x, config, b);
  CHECK(ra.model.users == rb.model.users);
  CHECK(ra.model.items == rb.model.items);

  for (double lambda : {0.025, 0.05, 0.1, 0.5, 1.0, 5.0, 10.0}) {
    AlsConfig lo = config, hi = config;
    lo.lambda = lambda;
    hi.lambda = 2 * lambda;
    Rng r1(4), r2(4);
    const auto m1 = train_mf(x, lo, r1).model, m2 = train_mf(x, hi, r2).model;
    // U·a, V/a give identical scores, so only the combined norm is identified.
    const double n1 = m1.users.squaredNorm() + m1.items.squaredNorm();
    const double n2 = m2.users.squaredNorm() + m2.items.squaredNorm();
    CHECK(n2 <= n1);
  }

  AlsConfig parallel = config;
  parallel.threads = 4;
  Rng p(9);
  const auto rp = train_mf(x, parallel, p);
  CHECK((rp.model.users - ra.model.users).cwiseAbs().maxCoeff() <= 1e-10);
  CHECK((rp.model.items - ra.model.items).cwiseAbs().maxCoeff() <= 1e-10);
}

TEST_CASE("export round trip") {
  Rng data(6);
  const auto x = random_matrix(data, 7, 9, 0.3);
  AlsConfig config{3, 40.0, 0.1, 5};
  Rng rng(1);
  const auto model = train_mf(x, config, rng).model;
  const auto path = std::filesystem::temp_directory_path() / "ilm_emb_test.ilmc";
  export_embeddings(model, path, {{"config_hash", "h"}});
  const auto ckpt = read_checkpoint(path);
  CHECK(ckpt.array("user_emb").shape == Shape{7, 3});
  CHECK(ckpt.array("item_emb").shape == Shape{9, 3});
  const auto expected = embeddings_checkpoint(model);
  CHECK(ckpt.array("item_emb").values == expected.array("item_emb").values);
  CHECK(ckpt.array("user_emb").values == expected.array("user_emb").values);
  std::filesystem::remove(path);
}
