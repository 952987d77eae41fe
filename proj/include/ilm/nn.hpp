#pragma once

// Transformer building blocks shared by the Q-Former towers and the backbone
// decoder. Blocks are pre-norm with GELU feed-forward of width 4d.

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ilm/rng.hpp"
#include "ilm/tensor.hpp"

namespace ilm::nn {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

constexpr double kInitStddev = 0.02;

Tensor init_normal(Shape shape, Rng& rng, double stddev = kInitStddev);

void set_trainable(const NamedTensors& params, bool trainable);

struct Linear {
  Tensor weight;  // in × out
  Tensor bias;    // out

  static Linear create(std::size_t in, std::size_t out, Rng& rng, double stddev = kInitStddev);
  Tensor operator()(const Tensor& x) const;
  void collect(NamedTensors& out, const std::string& prefix) const;
};

struct LayerNorm {
  Tensor gain;
  Tensor bias;

  static LayerNorm create(std::size_t dim);
  Tensor operator()(const Tensor& x) const;
  void collect(NamedTensors& out, const std::string& prefix) const;
};

class AttentionMask {
 public:
  AttentionMask(std::size_t rows, std::size_t cols, bool allowed);

  static AttentionMask causal(std::size_t length);

  void set(std::size_t row, std::size_t col, bool allowed) { allowed_[row * cols_ + col] = allowed; }
  bool allowed(std::size_t row, std::size_t col) const { return allowed_[row * cols_ + col] != 0; }
  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::span<const std::uint8_t> flags() const { return allowed_; }

 private:
  std::size_t rows_;
  std::size_t cols_;
  std::vector<std::uint8_t> allowed_;
};

struct MultiHeadAttention {
  Linear query;
  Linear key;
  Linear value;
  Linear output;
  std::size_t heads = 1;

  static MultiHeadAttention create(std::size_t dim, std::size_t heads, Rng& rng);
  // Scaled dot-product attention per head; masked positions get zero weight.
  Tensor operator()(const Tensor& queries, const Tensor& keys, const Tensor& values,
                    const AttentionMask* mask = nullptr) const;
  void collect(NamedTensors& out, const std::string& prefix) const;
};

struct FeedForward {
  Linear up;
  Linear down;

  static FeedForward create(std::size_t dim, Rng& rng);
  Tensor operator()(const Tensor& x) const;
  void collect(NamedTensors& out, const std::string& prefix) const;
};

struct TransformerBlock {
  LayerNorm self_norm;
  MultiHeadAttention self_attention;
  bool has_cross = false;
  LayerNorm cross_norm;
  MultiHeadAttention cross_attention;
  LayerNorm ffn_norm;
  FeedForward ffn;

  static TransformerBlock create(std::size_t dim, std::size_t heads, bool with_cross, Rng& rng);
  // `context` feeds the cross-attention sublayer; it is skipped when null.
  Tensor operator()(const Tensor& x, const AttentionMask* mask, const Tensor* context = nullptr) const;
  void collect(NamedTensors& out, const std::string& prefix) const;
};

// Token table plus learned absolute positions.
struct Embedding {
  Tensor tokens;     // vocab × d
  Tensor positions;  // max_len × d

  static Embedding create(std::size_t vocab, std::size_t max_len, std::size_t dim, Rng& rng);
  Tensor lookup(std::span<const int> ids) const;
  Tensor add_positions(const Tensor& x) const;
  void collect(NamedTensors& out, const std::string& prefix) const;
};

struct DecoderConfig {
  std::size_t vocab_size = 0;
  std::size_t model_dim = 128;
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t max_len = 64;
};

// Causal transformer decoder.
class Decoder {
 public:
  static Decoder create(const DecoderConfig& config, Rng& rng);

  const DecoderConfig& config() const { return config_; }

  // Token embeddings without positions.
  Tensor embed_tokens(std::span<const int> ids) const;
  // Final-norm hidden states for an assembled embedding sequence; positions are
  // added here, over the full assembled length.
  Tensor hidden_states(const Tensor& embeddings) const;
  Tensor project(const Tensor& hidden) const;
  Tensor logits(const Tensor& embeddings) const;
  // L×V logits for a token sequence.
  Tensor forward(std::span<const int> ids) const;

  void collect(NamedTensors& out, const std::string& prefix) const;

 private:
  DecoderConfig config_;
  Embedding embedding_;
  std::vector<TransformerBlock> blocks_;
  LayerNorm final_norm_;
  Linear head_;
};

// Mean NLL over positions whose ignore flag is 0.
Tensor cross_entropy_nll(const Tensor& logits, std::span<const int> targets,
                         std::span<const std::uint8_t> ignore);

}  // namespace ilm::nn
