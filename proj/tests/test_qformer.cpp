#include <chrono>
#include <cmath>
#include <numeric>
#include <set>

#include "doctest.h"
#include "gradcheck.hpp"
#include "ilm/data.hpp"
#include "ilm/error.hpp"
#include "ilm/qformer.hpp"
#include "oracles.hpp"
#include "qformer_fixtures.hpp"

using namespace ilm;
using ilm::testing::gradient_relative_error;
using ilm::testing::random_tensor;
using namespace ilm::testing::qformer_fixtures;

namespace {

Tensor orthogonal_rows(std::size_t b, std::size_t d) {
  std::vector<double> v(b * d, 0.0);
  for (std::size_t i = 0; i < b; ++i) v[i * d + i] = 1.0;
  return Tensor::from_data({b, d}, v);
}

}  // namespace

TEST_CASE("encode shape, determinism and minimal N") {
  Rng rng(1);
  auto config = micro_config();
  const auto q = QFormer::create(config, rng);
  const Tensor e = random_tensor(rng, {4}, false);
  const Tensor h = q.encode(e);
  CHECK(h.shape() == Shape{2, 8});
  const Tensor again = q.encode(e);
  CHECK(std::equal(h.data().begin(), h.data().end(), again.data().begin()));
  config.num_queries = 1;
  const auto single = QFormer::create(config, rng);
  CHECK(single.encode(e).shape() == Shape{1, 8});
  Tensor bad = Tensor::from_data({4}, {0.0, 0.5, 1.0, 2.0});
  bad.mutable_data()[1] = NAN;
  CHECK_THROWS_AS(q.encode(bad), DegenerateInputError);
  CHECK_THROWS_AS(q.encode(Tensor::zeros({5})), DimensionError);
}

TEST_CASE("select_item_rep examples and invariances") {
  Rng rng(2);
  const Tensor one = random_tensor(rng, {1, 5}, false);
  CHECK(select_item_rep(one, random_tensor(rng, {1, 5}, false)).index == 0);

  const Tensor h = Tensor::from_data({3, 3}, {0, 1, 0, 0, 0, 1, 1, 0, 0});
  const Tensor cls = Tensor::from_data({1, 3}, {1, 0, 0});
  CHECK(select_item_rep(h, cls).index == 2);

  for (int trial = 0; trial < 200; ++trial) {
    const Tensor reps = testing::random_reps_with_ties(rng, 1 + uniform_index(rng, 8), 6);
    const Tensor c = random_tensor(rng, {1, 6}, false);
    const auto base = select_item_rep(reps, c).index;
    const double s = std::exp(normal(rng, 0, 2));
    CHECK(select_item_rep(reps, scale(c, s)).index == base);
    CHECK(select_item_rep(scale(reps, s), c).index == base);
  }
  CHECK_THROWS_AS(select_item_rep(Tensor::zeros({2, 3}), cls), DegenerateInputError);
  CHECK_THROWS_AS(select_item_rep(h, Tensor::zeros({1, 3})), DegenerateInputError);
}

TEST_CASE("selections match brute force on 1000 instances with ties") {
  Rng rng(3);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t d = 2 + uniform_index(rng, 6);
    const Tensor a = testing::random_reps_with_ties(rng, 1 + uniform_index(rng, 8), d);
    Tensor c = random_tensor(rng, {1, d}, false);
    if (trial % 3 == 0) c = row(a, uniform_index(rng, a.rows())).detach();
    CHECK(select_item_rep(a, c).index == testing::brute_select_item(a, c));

    Tensor b = testing::random_reps_with_ties(rng, 1 + uniform_index(rng, 8), d);
    if (trial % 4 == 0) b = a;
    const auto sel = select_pair_rep(a, b);
    const auto oracle = testing::brute_select_pair(a, b);
    CHECK(sel.left == oracle.first);
    CHECK(sel.right == oracle.second);
  }
}

TEST_CASE("select_pair_rep examples") {
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor a = random_tensor(rng, {1 + uniform_index(rng, 8), 5}, false);
    const Tensor b = random_tensor(rng, {1 + uniform_index(rng, 8), 5}, false);
    const auto ab = select_pair_rep(a, b), ba = select_pair_rep(b, a);
    CHECK(ab.left == ba.right);
    CHECK(ab.right == ba.left);
    CHECK(ab.similarity == ba.similarity);
    const auto self = select_pair_rep(a, a);
    CHECK(self.left == self.right);
    CHECK(self.similarity == doctest::Approx(1.0).epsilon(1e-12));
  }
  const auto single = select_pair_rep(random_tensor(rng, {1, 3}, false), random_tensor(rng, {1, 3}, false));
  CHECK(single.left == 0);
  CHECK(single.right == 0);
}

TEST_CASE("contrastive loss closed forms and invariances") {
  const Tensor tau1 = Tensor::scalar(1.0);
  CHECK(symmetric_info_nce(orthogonal_rows(1, 3), orthogonal_rows(1, 3), tau1).item() == 0.0);
  const double oracle = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
  CHECK(oracle == doctest::Approx(0.3133).epsilon(1e-4));
  CHECK(symmetric_info_nce(orthogonal_rows(2, 4), orthogonal_rows(2, 4), tau1).item() ==
        doctest::Approx(oracle).epsilon(1e-12));

  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t b = 2 + uniform_index(rng, 6);
    const Tensor l = random_tensor(rng, {b, 5}, false), r = random_tensor(rng, {b, 5}, false);
    const Tensor tau = Tensor::scalar(0.07 + uniform01(rng));
    std::vector<int> perm(b);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    const double base = symmetric_info_nce(l, r, tau).item();
    CHECK(symmetric_info_nce(gather_rows(l, perm), gather_rows(r, perm), tau).item() ==
          doctest::Approx(base).epsilon(1e-12));
    CHECK(symmetric_info_nce(r, l, tau).item() == doctest::Approx(base).epsilon(1e-12));
  }
}

TEST_CASE("losses on a model: singleton batch, swap and permutation") {
  Rng rng(6);
  const auto q = QFormer::create(micro_config(), rng);
  perturb(q, 0.3, 60);
  const auto batch = micro_batch(rng, 4);
  ItemTextBatch one{{batch.embeddings[0]}, {batch.texts[0]}};
  CHECK(itc_loss(q, one).item() == 0.0);
  CHECK(iic_loss(q, PairBatch{{batch.embeddings[0]}, {batch.embeddings[1]}}).item() == 0.0);

  PairBatch pairs{{batch.embeddings[0], batch.embeddings[1], batch.embeddings[2]},
                  {batch.embeddings[3], batch.embeddings[0], batch.embeddings[1]}};
  const double base = iic_loss(q, pairs).item();
  CHECK(iic_loss(q, PairBatch{pairs.right, pairs.left}).item() == doctest::Approx(base).epsilon(1e-12));
  PairBatch rotated{{pairs.left[2], pairs.left[0], pairs.left[1]}, {pairs.right[2], pairs.right[0], pairs.right[1]}};
  CHECK(iic_loss(q, rotated).item() == doctest::Approx(base).epsilon(1e-12));

  const double itc = itc_loss(q, batch).item();
  ItemTextBatch reversed{{batch.embeddings.rbegin(), batch.embeddings.rend()}, {batch.texts.rbegin(), batch.texts.rend()}};
  CHECK(itc_loss(q, reversed).item() == doctest::Approx(itc).epsilon(1e-12));

  CHECK(itg_loss(q, batch).item() >= 0.0);
  CHECK_THROWS_AS(itm_loss(q, one, rng), UsageError);
  ItemTextBatch empty_text{{batch.embeddings[0]}, {{}}};
  CHECK_THROWS_AS(itg_loss(q, empty_text), DegenerateInputError);
}

TEST_CASE("uniform heads give ln V and ln 2") {
  Rng rng(7);
  const auto q = QFormer::create(micro_config(), rng);
  nn::NamedTensors named;
  q.collect(named);
  for (auto& [name, t] : named) {
    if (name.rfind("qformer.gen_head", 0) == 0 || name.rfind("qformer.itm_head", 0) == 0) {
      for (auto& x : t.mutable_data()) x = 0.0;
    }
  }
  const auto batch = micro_batch(rng, 3);
  CHECK(itg_loss(q, batch).item() == doctest::Approx(std::log(12.0)).epsilon(1e-12));
  CHECK(itm_loss(q, batch, rng).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  const std::vector<double> labels{1, 0, 1, 0};
  const Tensor perfect = Tensor::from_data({4, 1}, {60, -60, 60, -60});
  CHECK(bce_with_logits(perfect, labels).item() < 1e-20);
}

TEST_CASE("all four losses match finite differences") {
  const auto start = std::chrono::steady_clock::now();
  Rng rng(8);
  const auto q = QFormer::create(micro_config(), rng);
  perturb(q, 0.3, 80);
  const auto params = all_params(q);
  const auto batch = micro_batch(rng, 2);
  PairBatch pairs{{batch.embeddings[0], batch.embeddings[1]}, {batch.embeddings[1], random_tensor(rng, {1, 4}, false)}};
  CHECK(gradient_relative_error([&] { return itc_loss(q, batch); }, params) < 1e-3);
  CHECK(gradient_relative_error([&] { return iic_loss(q, pairs); }, params) < 1e-3);
  CHECK(gradient_relative_error([&] { return itg_loss(q, batch); }, params) < 1e-3);
  CHECK(gradient_relative_error(
            [&] {
              Rng fixed(99);
              return itm_loss(q, batch, fixed);
            },
            params) < 1e-3);
  MESSAGE("loss gradient checks took "
          << std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() << " s");
}

TEST_CASE("phase-1 alternation schedule and traces") {
  Rng rng(9);
  auto config = micro_config();
  Phase1Data data;
  data.item_embeddings = random_tensor(rng, {6, 4}, false);
  data.user_embeddings = random_tensor(rng, {3, 4}, false);
  for (std::uint32_t i = 0; i < 5; ++i) data.train_texts.push_back({i, {7, static_cast<int>(8 + i % 3)}});
  data.eval_texts.push_back({5, {7, 9}});
  data.item_item = {{false, 0, 1}, {false, 1, 2}, {false, 3, 4}};
  data.user_item = {{true, 0, 1}, {true, 1, 2}, {true, 2, 5}};

  auto run = [&](Phase1Mode mode) {
    Rng init(1), train(2);
    auto q = QFormer::create(config, init);
    return phase1_train(q, data, Phase1Config{mode, 8, 2, 1e-3, 1.0}, train);
  };
  const auto it = run(Phase1Mode::kIT);
  for (const auto& r : it.trace) CHECK(r.name.rfind("iic", 0) != 0);
  std::set<std::size_t> itc_steps;
  for (const auto& r : it.trace)
    if (r.name == "itc") itc_steps.insert(r.step);
  CHECK(itc_steps.size() == 8);

  const auto ii = run(Phase1Mode::kITII);
  for (const auto& r : ii.trace) {
    CHECK(std::isfinite(r.value));
    if (r.name == "itc" || r.name == "itg" || r.name == "itm") CHECK(r.step % 2 == 0);
    if (r.name.rfind("iic", 0) == 0) {
      CHECK(r.step % 2 == 1);
      CHECK(r.name == "iic_item_item");
    }
  }
  for (std::size_t s = 0; s < 8; s += 2) {
    for (const char* name : {"itc", "itg", "itm"}) {
      CHECK(std::count_if(ii.trace.begin(), ii.trace.end(),
                          [&](const LossRecord& r) { return r.step == s && r.name == name; }) == 1);
    }
  }
  const auto both = run(Phase1Mode::kITIIUI);
  std::vector<std::string> odd;
  for (const auto& r : both.trace)
    if (r.step % 2 == 1 && r.name.rfind("iic", 0) == 0) odd.push_back(r.name);
  CHECK(odd == std::vector<std::string>{"iic_item_item", "iic_user_item", "iic_item_item", "iic_user_item"});
  CHECK(std::count_if(ii.trace.begin(), ii.trace.end(), [](const LossRecord& r) { return r.name == "eval_itg"; }) >= 1);

  auto empty = data;
  empty.train_texts.clear();
  Rng r1(1), r2(2);
  auto q = QFormer::create(config, r1);
  CHECK_THROWS_AS(phase1_train(q, empty, Phase1Config{}, r2), UsageError);
}

TEST_CASE("itg depends on the item embedding after training") {
  Rng rng(10);
  auto config = micro_config();
  config.tau_init = 0.07;
  Phase1Data data;
  data.item_embeddings = random_tensor(rng, {4, 4}, false);
  data.user_embeddings = random_tensor(rng, {1, 4}, false);
  for (std::uint32_t i = 0; i < 4; ++i) data.train_texts.push_back({i, {static_cast<int>(7 + i), 11}});
  Rng init(3), train(4);
  auto q = QFormer::create(config, init);
  phase1_train(q, data, Phase1Config{Phase1Mode::kIT, 300, 4, 3e-3, 1.0}, train);
  const ItemTextBatch real{{row(data.item_embeddings, 0), row(data.item_embeddings, 1)}, {{7, 11}, {8, 11}}};
  const ItemTextBatch zeroed{{Tensor::zeros({1, 4}), Tensor::zeros({1, 4})}, {{7, 11}, {8, 11}}};
  NoGradGuard guard;
  const double with_item = itg_loss(q, real).item(), without = itg_loss(q, zeroed).item();
  MESSAGE("itg with item " << with_item << ", zeroed " << without);
  CHECK(without - with_item > 0.0);
}
