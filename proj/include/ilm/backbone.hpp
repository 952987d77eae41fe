#pragma once

// Text-only decoder pretraining on id-token prompts and beam-search decoding.

#include <functional>
#include <vector>

#include "ilm/checkpoint.hpp"
#include "ilm/data.hpp"
#include "ilm/nn.hpp"

namespace ilm {

// Drops the oldest history mentions (id token, slot and separator) until
// the prompt fits `budget` positions, then drops leading prompt tokens.
// Each slot occupies `slot_width` positions. Returns true if anything was cut.
bool truncate_history(data::SequenceExample& example, std::size_t slot_width, std::size_t budget);

// Mean NLL of `target` given an embedded prefix; every prefix position is
// masked from the loss.
Tensor target_nll(const nn::Decoder& decoder, const Tensor& prefix, std::span<const int> target);

// [BOS] + tokens, embedded by the decoder.
Tensor embed_prompt(const nn::Decoder& decoder, std::span<const int> tokens);

struct PretrainConfig {
  std::size_t steps = 2000;
  std::size_t batch_size = 16;
  double learning_rate = 1e-3;
  double clip_norm = 1.0;
};

struct PretrainResult {
  std::vector<double> losses;  // one per step
  std::size_t truncated = 0;
};

// Placeholders are stripped from every example before training.
PretrainResult pretrain(nn::Decoder& decoder, std::vector<data::SequenceExample> examples,
                        const PretrainConfig& config, Rng& rng);

struct BeamHypothesis {
  std::vector<int> tokens;  // generated tokens, EOS included when finished
  double score = 0.0;       // cumulative log-probability
  bool finished = false;
};

// Log-probabilities of the next token after the generated prefix.
using NextTokenFn = std::function<std::vector<double>(std::span<const int> generated)>;

// At every step the top beam_size expansions of the live hypotheses are kept;
// those ending in EOS are set aside. Returns the best beam_size of the finished
// hypotheses and those still live at max_new, sorted by score, ties broken by
// the token sequence.
std::vector<BeamHypothesis> beam_search(const NextTokenFn& next, std::size_t beam_size, std::size_t max_new,
                                        int eos);

// Beam search continuing an embedded prefix.
std::vector<BeamHypothesis> generate_beam(const nn::Decoder& decoder, const Tensor& prefix, std::size_t beam_size,
                                          std::size_t max_new);

// Text-only prompt; [BOS] is prepended.
std::vector<BeamHypothesis> generate_beam(const nn::Decoder& decoder, std::span<const int> prompt,
                                          std::size_t beam_size, std::size_t max_new);

std::vector<int> greedy_decode(const NextTokenFn& next, std::size_t max_new, int eos);

Checkpoint backbone_checkpoint(const nn::Decoder& decoder);
nn::Decoder load_backbone(const Checkpoint& ckpt);

}  // namespace ilm
