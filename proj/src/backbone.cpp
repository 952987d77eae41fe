#include "ilm/backbone.hpp"

#include <algorithm>
#include <cmath>

#include <spdlog/spdlog.h>

#include "ilm/error.hpp"
#include "ilm/optim.hpp"
#include "ilm/sampler.hpp"

namespace ilm {

using data::EntityKind;
using data::SequenceExample;

namespace {

std::size_t assembled_length(const SequenceExample& ex, std::size_t slot_width) {
  std::size_t n = 0;
  for (auto kind : ex.slot_kind) n += kind == EntityKind::kNone ? 1 : slot_width;
  return n;
}

void erase_positions(SequenceExample& ex, std::size_t first, std::size_t count) {
  const auto a = static_cast<std::ptrdiff_t>(first), b = static_cast<std::ptrdiff_t>(first + count);
  ex.prompt.erase(ex.prompt.begin() + a, ex.prompt.begin() + b);
  ex.slot_kind.erase(ex.slot_kind.begin() + a, ex.slot_kind.begin() + b);
  ex.slot_id.erase(ex.slot_id.begin() + a, ex.slot_id.begin() + b);
}

}  // namespace

bool truncate_history(SequenceExample& ex, std::size_t slot_width, std::size_t budget) {
  bool cut = false;
  while (assembled_length(ex, slot_width) > budget) {
    const auto it = std::find(ex.slot_kind.begin(), ex.slot_kind.end(), EntityKind::kItem);
    if (it == ex.slot_kind.end()) break;
    const auto p = static_cast<std::size_t>(it - ex.slot_kind.begin());
    // The id token precedes its slot; a separator follows when another mention does.
    const bool more = p + 3 < ex.slot_kind.size() && ex.slot_kind[p + 3] == EntityKind::kItem;
    const std::size_t first = p == 0 ? 0 : p - 1;
    erase_positions(ex, first, p - first + 1 + (more ? 1 : 0));
    cut = true;
  }
  while (!ex.prompt.empty() && assembled_length(ex, slot_width) > budget) {
    erase_positions(ex, 0, 1);
    cut = true;
  }
  return cut;
}

Tensor embed_prompt(const nn::Decoder& decoder, std::span<const int> tokens) {
  std::vector<int> ids{data::tok::kBos};
  ids.insert(ids.end(), tokens.begin(), tokens.end());
  return decoder.embed_tokens(ids);
}

Tensor target_nll(const nn::Decoder& decoder, const Tensor& prefix, std::span<const int> target) {
  if (target.empty()) throw UsageError("empty target");
  if (prefix.rows() == 0) throw UsageError("empty prompt");
  Tensor input = prefix;
  if (target.size() > 1) {
    const std::vector<Tensor> parts{prefix, decoder.embed_tokens(target.first(target.size() - 1))};
    input = concat_rows(parts);
  }
  const Tensor hidden = decoder.hidden_states(input);
  const Tensor logits = decoder.project(slice_rows(hidden, prefix.rows() - 1, target.size()));
  const std::vector<std::uint8_t> keep(target.size(), 0);
  return nn::cross_entropy_nll(logits, target, keep);
}

PretrainResult pretrain(nn::Decoder& decoder, std::vector<SequenceExample> examples, const PretrainConfig& config,
                        Rng& rng) {
  if (examples.empty()) throw UsageError("pretraining needs at least one example");
  if (config.batch_size == 0) throw UsageError("batch size must be positive");
  PretrainResult result;
  std::vector<std::vector<int>> prompts;
  for (auto& ex : examples) {
    if (ex.target.size() >= decoder.config().max_len) throw UsageError("target longer than the decoder context");
    if (truncate_history(ex, 0, decoder.config().max_len - ex.target.size())) ++result.truncated;
    prompts.push_back(data::strip_placeholders(ex));
  }
  if (result.truncated > 0) {
    spdlog::info("pretrain: {} of {} examples truncated from the left to fit {} positions", result.truncated,
                 examples.size(), decoder.config().max_len);
  }

  nn::NamedTensors named;
  decoder.collect(named, "backbone");
  std::vector<Tensor> params;
  for (const auto& [name, t] : named) params.push_back(t);
  Adam adam(params, AdamConfig{0.9, 0.999, 1e-8, config.clip_norm});
  EpochSampler sampler(examples.size(), rng);

  for (std::size_t step = 0; step < config.steps; ++step) {
    Tensor total;
    const auto batch = sampler.next(config.batch_size);
    for (auto k : batch) {
      const Tensor nll = target_nll(decoder, embed_prompt(decoder, prompts[k]), examples[k].target);
      total = total.defined() ? add(total, nll) : nll;
    }
    const Tensor loss = scale(total, 1.0 / static_cast<double>(batch.size()));
    result.losses.push_back(loss.item());
    adam.step(backward(loss), scheduled_lr(config.learning_rate, step, config.steps, LrSchedule::kCosine));
  }
  return result;
}

std::vector<BeamHypothesis> beam_search(const NextTokenFn& next, std::size_t beam_size, std::size_t max_new,
                                        int eos) {
  if (beam_size == 0) throw UsageError("beam size must be at least 1");
  auto better = [](const BeamHypothesis& a, const BeamHypothesis& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.tokens < b.tokens;
  };
  std::vector<BeamHypothesis> live{BeamHypothesis{}};
  std::vector<BeamHypothesis> finished;
  for (std::size_t t = 0; t < max_new && !live.empty(); ++t) {
    std::vector<BeamHypothesis> candidates;
    for (const auto& h : live) {
      const auto logp = next(h.tokens);
      for (std::size_t v = 0; v < logp.size(); ++v) {
        BeamHypothesis c{h.tokens, h.score + logp[v], static_cast<int>(v) == eos};
        c.tokens.push_back(static_cast<int>(v));
        candidates.push_back(std::move(c));
      }
    }
    const auto keep = std::min(beam_size, candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep), candidates.end(),
                      better);
    live.clear();
    for (std::size_t i = 0; i < keep; ++i) (candidates[i].finished ? finished : live).push_back(std::move(candidates[i]));
    std::sort(finished.begin(), finished.end(), better);
    if (finished.size() > beam_size) finished.resize(beam_size);
    // Scores only decrease, so live hypotheses below a full finished set are dead.
    if (finished.size() == beam_size) {
      std::erase_if(live, [&](const BeamHypothesis& h) { return !better(h, finished.back()); });
    }
  }
  finished.insert(finished.end(), live.begin(), live.end());
  std::sort(finished.begin(), finished.end(), better);
  if (finished.size() > beam_size) finished.resize(beam_size);
  return finished;
}

std::vector<int> greedy_decode(const NextTokenFn& next, std::size_t max_new, int eos) {
  std::vector<int> out;
  while (out.size() < max_new) {
    const auto logp = next(out);
    const auto best = static_cast<int>(std::max_element(logp.begin(), logp.end()) - logp.begin());
    out.push_back(best);
    if (best == eos) break;
  }
  return out;
}

std::vector<BeamHypothesis> generate_beam(const nn::Decoder& decoder, const Tensor& prefix, std::size_t beam_size,
                                          std::size_t max_new) {
  if (prefix.rows() == 0) throw UsageError("empty prompt");
  NoGradGuard guard;
  const NextTokenFn next = [&](std::span<const int> generated) {
    Tensor input = prefix;
    if (!generated.empty()) {
      const std::vector<Tensor> parts{prefix, decoder.embed_tokens(generated)};
      input = concat_rows(parts);
    }
    const Tensor hidden = decoder.hidden_states(input);
    const Tensor logp = log_softmax(decoder.project(row(hidden, hidden.rows() - 1)));
    return std::vector<double>(logp.data().begin(), logp.data().end());
  };
  return beam_search(next, beam_size, max_new, data::tok::kEos);
}

std::vector<BeamHypothesis> generate_beam(const nn::Decoder& decoder, std::span<const int> prompt,
                                          std::size_t beam_size, std::size_t max_new) {
  if (prompt.empty()) throw UsageError("empty prompt");
  NoGradGuard guard;
  return generate_beam(decoder, embed_prompt(decoder, prompt), beam_size, max_new);
}

Checkpoint backbone_checkpoint(const nn::Decoder& decoder) {
  Checkpoint ckpt;
  const auto& c = decoder.config();
  ckpt.set_meta("kind", "backbone");
  ckpt.set_meta("vocab_size", std::to_string(c.vocab_size));
  ckpt.set_meta("model_dim", std::to_string(c.model_dim));
  ckpt.set_meta("layers", std::to_string(c.layers));
  ckpt.set_meta("heads", std::to_string(c.heads));
  ckpt.set_meta("max_len", std::to_string(c.max_len));
  nn::NamedTensors named;
  decoder.collect(named, "backbone");
  add_arrays(ckpt, named);
  return ckpt;
}

nn::Decoder load_backbone(const Checkpoint& ckpt) {
  auto number = [&](const char* key) -> std::size_t {
    const auto v = ckpt.meta(key);
    if (!v) throw StorageError(std::string("backbone checkpoint lacks '") + key + "'");
    return std::stoul(*v);
  };
  if (ckpt.meta("kind") != "backbone") throw StorageError("not a backbone checkpoint");
  nn::DecoderConfig config{number("vocab_size"), number("model_dim"), number("layers"), number("heads"),
                           number("max_len")};
  Rng unused(0);
  auto decoder = nn::Decoder::create(config, unused);
  nn::NamedTensors named;
  decoder.collect(named, "backbone");
  load_arrays(ckpt, named);
  return decoder;
}

}  // namespace ilm
