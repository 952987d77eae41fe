#include <cmath>
#include <map>

#include "doctest.h"
#include "ilm/error.hpp"
#include "ilm/eval.hpp"
#include "ilm/fusion.hpp"
#include "oracles.hpp"

using namespace ilm;
using namespace ilm::eval;
using ilm::testing::brute_parse;
using ilm::testing::brute_scores;
using ilm::testing::BruteScores;
using ilm::testing::random_output;

namespace {

data::Vocabulary small_vocab() {
  data::SynthConfig config;
  config.num_users = 20;
  config.num_items = 12;
  return data::build_vocabulary(data::synth_generate(config, 1).catalog);
}

data::SequenceExample example_for(const data::Vocabulary& vocab, std::uint32_t user, std::uint32_t target) {
  data::SequenceExample ex;
  ex.user = user;
  ex.prompt = {vocab.user_token(user)};
  ex.slot_kind = {data::EntityKind::kNone};
  ex.slot_id = {0};
  ex.target = {vocab.item_token(target), data::tok::kEos};
  return ex;
}

// Emits fixed token lists per user.
class ScriptedModel : public PromptModel {
 public:
  std::map<std::uint32_t, std::vector<std::vector<int>>> script;
  double nll = 0.0;

  std::vector<BeamHypothesis> generate(const data::SequenceExample& ex, std::size_t beam_size,
                                       std::size_t) const override {
    std::vector<BeamHypothesis> out;
    const auto& lists = script.at(ex.user);
    for (std::size_t i = 0; i < std::min(beam_size, lists.size()); ++i) {
      out.push_back({lists[i], -static_cast<double>(i), true});
    }
    return out;
  }
  double target_nll(const data::SequenceExample&) const override { return nll; }
};

}  // namespace

TEST_CASE("regex filtering examples") {
  CHECK(filter_valid({"item_42", "foo", "see item_7"}) == std::vector<std::uint64_t>{42, 7});
  CHECK(filter_valid({"item_"}).empty());
  CHECK(filter_valid({}).empty());
  CHECK(filter_valid({"item_3 foo", "xitem_5", "item_007", "item_1\n"}) == std::vector<std::uint64_t>{5, 7});
}

TEST_CASE("regex filtering matches the independent parser") {
  Rng rng(1);
  for (int trial = 0; trial < 2000; ++trial) {
    const auto s = random_output(rng);
    const auto ids = filter_valid({s});
    const auto oracle = brute_parse(s);
    CHECK(ids.size() == (oracle ? 1u : 0u));
    if (oracle && !ids.empty()) CHECK(ids[0] == *oracle);
  }
}

TEST_CASE("hit rate and NDCG closed forms") {
  const std::vector<std::uint64_t> ranked{9, 8, 7, 6, 5, 4, 3, 2, 1, 0};
  CHECK(hr_at_k(ranked, 9, 5) == 1.0);
  CHECK(hr_at_k(ranked, 77, 10) == 0.0);
  CHECK(hr_at_k(ranked, 4, 5) == 0.0);
  CHECK(hr_at_k(ranked, 4, 10) == 1.0);
  CHECK(ndcg_at_k(ranked, 9, 10) == 1.0);
  CHECK(ndcg_at_k(ranked, 7, 5) == 0.5);
  CHECK(ndcg_at_k(ranked, 77, 5) == 0.0);
  CHECK_THROWS_AS(hr_at_k(ranked, 1, 0), UsageError);
  CHECK(dedup_ids({3, 1, 3, 2, 1}) == std::vector<std::uint64_t>{3, 1, 2});
}

TEST_CASE("metric properties over random lists") {
  Rng rng(2);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<std::uint64_t> ranked;
    const auto n = uniform_index(rng, 12);
    for (std::size_t i = 0; i < n; ++i) ranked.push_back(uniform_index(rng, 15));
    ranked = dedup_ids(ranked);
    const auto target = uniform_index(rng, 15);
    double prev_hr = 0, prev_ndcg = 0;
    for (std::size_t k = 1; k <= 12; ++k) {
      const double hr = hr_at_k(ranked, target, k), nd = ndcg_at_k(ranked, target, k);
      CHECK(hr >= prev_hr);
      CHECK(nd >= prev_ndcg);
      CHECK(nd <= hr);
      CHECK(nd >= 0.0);
      CHECK(hr <= 1.0);
      prev_hr = hr;
      prev_ndcg = nd;
    }
  }
}

TEST_CASE("log perplexity against an independent accumulation") {
  Rng rng(3);
  const auto vocab = small_vocab();
  auto decoder = std::make_shared<const nn::Decoder>(nn::Decoder::create({vocab.size(), 16, 1, 2, 32}, rng));
  const FusedModel model(decoder, nullptr, {});
  std::vector<data::SequenceExample> examples;
  for (std::uint32_t u = 0; u < 10; ++u) {
    auto ex = example_for(vocab, u, static_cast<std::uint32_t>(uniform_index(rng, 12)));
    ex.prompt.push_back(vocab.item_token(static_cast<std::uint32_t>(uniform_index(rng, 12))));
    ex.slot_kind.push_back(data::EntityKind::kNone);
    ex.slot_id.push_back(0);
    examples.push_back(ex);
  }
  double brute = 0;
  for (const auto& ex : examples) brute += testing::brute_target_nll(*decoder, ex);
  CHECK(log_perplexity(model, examples) == doctest::Approx(brute / 10).epsilon(1e-12));

  nn::NamedTensors named;
  decoder->collect(named, "backbone");
  for (auto& [name, t] : named)
    if (name.rfind("backbone.head", 0) == 0)
      for (auto& x : t.mutable_data()) x = 0.0;
  CHECK(log_perplexity(model, examples) == doctest::Approx(std::log(static_cast<double>(vocab.size()))).epsilon(1e-12));

  ScriptedModel certain;
  CHECK(log_perplexity(certain, examples) == 0.0);
  CHECK_THROWS_AS(log_perplexity(certain, {}), UsageError);
}

TEST_CASE("evaluate_run: perfect, invalid and brute-force recomputation") {
  const auto vocab = small_vocab();
  Rng rng(4);
  EvalSet set{data::Task::kSequential, data::Regime::kSeen, {}};
  for (std::uint32_t u = 0; u < 50; ++u) set.examples.push_back(example_for(vocab, u % 20, u % 12));
  for (std::uint32_t u = 0; u < 50; ++u) set.examples[u].user = u;

  ScriptedModel perfect, invalid, noisy;
  for (const auto& ex : set.examples) {
    const int target = ex.target[0];
    perfect.script[ex.user] = {{target, data::tok::kEos}, {vocab.item_token(0), data::tok::kEos}};
    invalid.script[ex.user] = {{vocab.user_token(0), data::tok::kEos}, {data::tok::kEos}};
    std::vector<std::vector<int>> lists;
    for (int i = 0; i < 10; ++i) {
      std::vector<int> toks;
      const double u = uniform01(rng);
      if (u < 0.2) toks = {vocab.user_token(1)};
      else if (u < 0.3) toks = {vocab.item_token(static_cast<std::uint32_t>(uniform_index(rng, 12))), vocab.user_token(2)};
      else toks = {vocab.item_token(static_cast<std::uint32_t>(uniform_index(rng, 12)))};
      if (uniform01(rng) < 0.8) toks.push_back(data::tok::kEos);
      lists.push_back(toks);
    }
    noisy.script[ex.user] = lists;
  }
  const EvalOptions options;
  const auto p = evaluate_run(perfect, {set}, vocab, options);
  for (const auto& r : p.rows)
    if (r.metric == "hr" || r.metric == "ndcg" || r.metric == "valid_rate") CHECK(r.value == 1.0);

  const auto bad = evaluate_run(invalid, {set}, vocab, options);
  for (const auto& r : bad.rows)
    if (r.metric != "log_ppl") CHECK(r.value == 0.0);

  const auto report = evaluate_run(noisy, {set}, vocab, options);
  BruteScores total;
  std::size_t outputs = 0, valid = 0;
  for (const auto& ex : set.examples) {
    std::vector<std::string> decoded;
    for (const auto& toks : noisy.script[ex.user]) {
      std::string s;
      for (std::size_t i = 0; i < toks.size(); ++i) {
        if (toks[i] == data::tok::kEos && i + 1 == toks.size()) break;
        if (!s.empty()) s += ' ';
        s += vocab.token(toks[i]);
      }
      decoded.push_back(s);
      ++outputs;
      valid += brute_parse(s).has_value();
    }
    const auto b = brute_scores(decoded, *vocab.item_of(ex.target[0]));
    total.hr5 += b.hr5;
    total.hr10 += b.hr10;
    total.ndcg5 += b.ndcg5;
    total.ndcg10 += b.ndcg10;
  }
  CHECK(report.find("sequential", "seen", "hr", 5)->value == total.hr5 / 50);
  CHECK(report.find("sequential", "seen", "hr", 10)->value == total.hr10 / 50);
  CHECK(report.find("sequential", "seen", "ndcg", 5)->value == doctest::Approx(total.ndcg5 / 50).epsilon(1e-14));
  CHECK(report.find("sequential", "seen", "ndcg", 10)->value == doctest::Approx(total.ndcg10 / 50).epsilon(1e-14));
  CHECK(report.find("sequential", "seen", "valid_rate")->value == static_cast<double>(valid) / outputs);
  CHECK(report.find("sequential", "seen", "hr", 10)->count == 50);

  const auto back = report_from_jsonl(report_to_jsonl(report));
  REQUIRE(back.rows.size() == report.rows.size());
  for (std::size_t i = 0; i < back.rows.size(); ++i) {
    CHECK(back.rows[i].value == report.rows[i].value);
    CHECK(back.rows[i].k == report.rows[i].k);
  }
  CHECK_THROWS_AS(report_from_jsonl("{\"task\": 1}\n"), ParseError);
}

TEST_CASE("aggregation gives mean and standard error") {
  std::vector<EvalReport> runs(3);
  const double values[] = {1.0, 2.0, 3.0};
  for (int i = 0; i < 3; ++i) runs[i].rows.push_back({"sequential", "seen", "ndcg", 10, values[i], 7});
  const auto rows = aggregate("ilm", runs);
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].mean == 2.0);
  CHECK(rows[0].standard_error == doctest::Approx(1.0 / std::sqrt(3.0)).epsilon(1e-15));
  CHECK(rows[0].runs == 3);
  CHECK(aggregate_table(rows).find("ndcg@10") != std::string::npos);
}
