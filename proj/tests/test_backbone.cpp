#include <cmath>
#include <numeric>

#include "doctest.h"
#include "ilm/backbone.hpp"
#include "ilm/error.hpp"
#include "toy_lm.hpp"

using namespace ilm;
using data::EntityKind;

namespace {

nn::DecoderConfig tiny(std::size_t vocab) { return {vocab, 16, 2, 2, 64}; }

struct SynthSetup {
  data::Dataset dataset;
  data::Split split;
  data::Vocabulary vocab;
  std::vector<data::SequenceExample> train;
};

SynthSetup synth_setup(std::uint64_t seed) {
  SynthSetup s;
  data::SynthConfig config;
  config.num_users = 60;
  config.num_items = 20;
  s.dataset = data::synth_generate(config, seed);
  s.split = data::split_leave_last(s.dataset.sequences);
  s.vocab = data::build_vocabulary(s.dataset.catalog);
  Rng rng(seed);
  s.train = data::render_train_prompts(s.split.train, s.vocab, {}, rng);
  return s;
}

std::vector<double> last_row_logp(const nn::Decoder& d, std::span<const int> ids) {
  NoGradGuard guard;
  const Tensor logits = d.forward(ids);
  const Tensor lp = log_softmax(row(logits, logits.rows() - 1));
  return {lp.data().begin(), lp.data().end()};
}

}  // namespace

TEST_CASE("history truncation drops the oldest mentions first") {
  data::SequenceExample ex;
  // words: 10 11 | item 20 slot , item 21 slot , item 22 slot | 12
  const std::vector<int> prompt{10, 11, 20, 4, 9, 21, 4, 9, 22, 4, 12};
  ex.prompt = prompt;
  ex.slot_kind.assign(prompt.size(), EntityKind::kNone);
  ex.slot_id.assign(prompt.size(), 0);
  for (std::size_t p : {3u, 6u, 9u}) ex.slot_kind[p] = EntityKind::kItem;
  ex.slot_id[3] = 0;
  ex.slot_id[6] = 1;
  ex.slot_id[9] = 2;

  auto copy = ex;
  CHECK_FALSE(truncate_history(copy, 0, 8));
  CHECK(copy.prompt == prompt);

  copy = ex;
  CHECK(truncate_history(copy, 0, 7));
  CHECK(copy.prompt == std::vector<int>{10, 11, 21, 4, 9, 22, 4, 12});
  CHECK(data::strip_placeholders(copy) == std::vector<int>{10, 11, 21, 9, 22, 12});

  copy = ex;
  truncate_history(copy, 0, 4);
  CHECK(copy.prompt == std::vector<int>{10, 11, 22, 4, 12});

  copy = ex;
  truncate_history(copy, 0, 2);
  CHECK(data::strip_placeholders(copy) == std::vector<int>{11, 12});

  // Slots four wide: 8 tokens + 3·4 = 20.
  copy = ex;
  CHECK_FALSE(truncate_history(copy, 4, 20));
  CHECK(truncate_history(copy, 4, 19));
  CHECK(copy.slot_id[copy.prompt.size() - 2] == 2);
}

TEST_CASE("loss at initialization is close to ln V") {
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto s = synth_setup(seed);
    Rng rng(seed);
    const auto d = nn::Decoder::create(tiny(s.vocab.size()), rng);
    double total = 0;
    for (std::size_t k = 0; k < 20; ++k) {
      const auto prompt = data::strip_placeholders(s.train[k]);
      total += target_nll(d, embed_prompt(d, prompt), s.train[k].target).item();
    }
    const double ln_v = std::log(static_cast<double>(s.vocab.size()));
    CHECK(std::abs(total / 20 - ln_v) < 0.05 * ln_v);
  }
}

TEST_CASE("target loss ignores prompt positions") {
  Rng rng(4);
  const auto d = nn::Decoder::create(tiny(15), rng);
  const std::vector<int> prompt{7, 8, 9, 10};
  const std::vector<int> target{12, data::tok::kEos};
  const double nll = target_nll(d, embed_prompt(d, prompt), target).item();

  // Independent accumulation from the full-sequence logits.
  std::vector<int> ids{data::tok::kBos, 7, 8, 9, 10, 12};
  double brute = 0;
  for (std::size_t t = 0; t < target.size(); ++t) {
    const auto lp = last_row_logp(d, std::span<const int>(ids).first(5 + t));
    brute -= lp[static_cast<std::size_t>(target[t])];
  }
  CHECK(nll == doctest::Approx(brute / 2).epsilon(1e-12));
}

TEST_CASE("pretraining loss decreases over the first epoch") {
  double early = 0, late = 0;
  for (std::uint64_t seed : {11, 12}) {
    auto s = synth_setup(seed);
    Rng rng(seed);
    auto d = nn::Decoder::create(tiny(s.vocab.size()), rng);
    const std::size_t batch = 8;
    const std::size_t steps = s.train.size() / batch;
    const auto result = pretrain(d, s.train, PretrainConfig{steps, batch, 3e-3, 1.0}, rng);
    REQUIRE(result.losses.size() == steps);
    const std::size_t w = steps / 5;
    early += std::accumulate(result.losses.begin(), result.losses.begin() + w, 0.0) / w;
    late += std::accumulate(result.losses.end() - w, result.losses.end(), 0.0) / w;
  }
  MESSAGE("first-fifth loss " << early / 2 << ", last-fifth loss " << late / 2);
  CHECK(late < early);
}

TEST_CASE("beam size one equals greedy decoding") {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const auto lm = testing::random_bigram(rng, 4, 1.0 + trial * 0.05);
    const NextTokenFn next = [&](std::span<const int> g) { return lm.next(g); };
    const auto beam = beam_search(next, 1, 6, 0);
    REQUIRE(beam.size() == 1);
    CHECK(beam[0].tokens == greedy_decode(next, 6, 0));
  }
  const auto d = nn::Decoder::create(tiny(15), rng);
  const std::vector<int> prompt{7, 8, 9};
  const NextTokenFn model_next = [&](std::span<const int> g) {
    std::vector<int> ids{data::tok::kBos, 7, 8, 9};
    ids.insert(ids.end(), g.begin(), g.end());
    return last_row_logp(d, ids);
  };
  CHECK(generate_beam(d, embed_prompt(d, prompt), 1, 5)[0].tokens == greedy_decode(model_next, 5, data::tok::kEos));
}

TEST_CASE("beam output is sorted, sized and deterministic") {
  Rng rng(6);
  const auto d = nn::Decoder::create(tiny(15), rng);
  const std::vector<int> prompt{7, 8, 9};
  const Tensor prefix = embed_prompt(d, prompt);
  const auto a = generate_beam(d, prefix, 10, 3);
  const auto b = generate_beam(d, prefix, 10, 3);
  REQUIRE(a.size() == 10);
  for (std::size_t i = 1; i < a.size(); ++i) CHECK(a[i - 1].score >= a[i].score);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].tokens == b[i].tokens);
    CHECK(a[i].score == b[i].score);
    CHECK((a[i].finished ? a[i].tokens.back() == data::tok::kEos : a[i].tokens.size() == 3));
  }
  CHECK_THROWS_AS(generate_beam(d, std::span<const int>(), 10, 3), UsageError);
  CHECK_THROWS_AS(beam_search([](std::span<const int>) { return std::vector<double>{0.0}; }, 0, 1, 0), UsageError);
}

TEST_CASE("beam search matches enumeration on a hand-built three-token model") {
  // token 0 is EOS
  const auto lm = testing::bigram_from_probs({{0.1, 0.6, 0.3}, {0.5, 0.2, 0.3}, {0.3, 0.3, 0.4}, {0.2, 0.5, 0.3}});
  const NextTokenFn next = [&](std::span<const int> g) { return lm.next(g); };
  for (std::size_t k : {1u, 3u, 5u, 10u}) {
    const auto beam = beam_search(next, k, 3, 0);
    const auto all = testing::enumerate_sequences(next, 3, 3, 0);
    REQUIRE(beam.size() == std::min(k, all.size()));
    if (k == 1) continue;
    for (std::size_t i = 0; i < beam.size(); ++i) {
      CHECK(beam[i].tokens == all[i].tokens);
      CHECK(beam[i].score == all[i].score);
    }
  }
}

TEST_CASE("beam search recovers the top sequences whenever they stay inside the frontier") {
  Rng rng(7);
  std::size_t cases = 0, inside = 0, exact = 0;
  for (std::size_t vocab : {2u, 3u, 4u}) {
    for (std::size_t len = 1; len <= 4; ++len) {
      for (int trial = 0; trial < 50; ++trial) {
        const auto lm = testing::random_bigram(rng, vocab, 2.0);
        const NextTokenFn next = [&](std::span<const int> g) { return lm.next(g); };
        const auto beam = beam_search(next, 10, len, 0);
        auto all = testing::enumerate_sequences(next, vocab, len, 0);
        if (all.size() > 10) all.resize(10);
        bool same = beam.size() == all.size();
        for (std::size_t i = 0; same && i < all.size(); ++i) same = beam[i].tokens == all[i].tokens;
        const bool within = testing::top_k_within_frontier(next, vocab, len, 0, 10);
        ++cases;
        inside += within;
        exact += same;
        if (within) CHECK(same);
      }
    }
  }
  MESSAGE(exact << " of " << cases << " toy models match enumeration, " << inside << " inside the frontier");
  CHECK(inside > cases * 9 / 10);
}

TEST_CASE("backbone checkpoint round trip") {
  Rng rng(8);
  const auto d = nn::Decoder::create(tiny(15), rng);
  const auto ckpt = backbone_checkpoint(d);
  const auto loaded = load_backbone(decode_checkpoint(encode_checkpoint(ckpt)));
  CHECK(encode_checkpoint(backbone_checkpoint(loaded)) == encode_checkpoint(ckpt));
  const std::vector<int> ids{1, 7, 8};
  const Tensor a = d.forward(ids), b = loaded.forward(ids);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a.data()[i] == doctest::Approx(b.data()[i]).epsilon(1e-5));
  Checkpoint wrong = ckpt;
  wrong.set_meta("kind", "qformer");
  CHECK_THROWS_AS(load_backbone(wrong), StorageError);
}
