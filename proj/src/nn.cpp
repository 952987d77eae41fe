#include "ilm/nn.hpp"

#include <cmath>

#include "ilm/error.hpp"

namespace ilm::nn {

Tensor init_normal(Shape shape, Rng& rng, double stddev) {
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = normal(rng, 0.0, stddev);
  return Tensor::from_data(std::move(shape), std::move(v), true);
}

void set_trainable(const NamedTensors& params, bool trainable) {
  for (auto [name, t] : params) t.set_requires_grad(trainable);
}

// ---- Linear / LayerNorm ----------------------------------------------------------

Linear Linear::create(std::size_t in, std::size_t out, Rng& rng, double stddev) {
  return Linear{init_normal({in, out}, rng, stddev), Tensor::zeros({out}, true)};
}

Tensor Linear::operator()(const Tensor& x) const { return add(matmul(x, weight), bias); }

void Linear::collect(NamedTensors& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".weight", weight);
  out.emplace_back(prefix + ".bias", bias);
}

LayerNorm LayerNorm::create(std::size_t dim) {
  return LayerNorm{Tensor::full({dim}, 1.0, true), Tensor::zeros({dim}, true)};
}

Tensor LayerNorm::operator()(const Tensor& x) const { return add(mul(layer_norm(x), gain), bias); }

void LayerNorm::collect(NamedTensors& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".gain", gain);
  out.emplace_back(prefix + ".bias", bias);
}

// ---- attention ---------------------------------------------------------------------

AttentionMask::AttentionMask(std::size_t rows, std::size_t cols, bool allowed)
    : rows_(rows), cols_(cols), allowed_(rows * cols, allowed ? 1 : 0) {}

AttentionMask AttentionMask::causal(std::size_t length) {
  AttentionMask mask(length, length, false);
  for (std::size_t i = 0; i < length; ++i)
    for (std::size_t j = 0; j <= i; ++j) mask.set(i, j, true);
  return mask;
}

MultiHeadAttention MultiHeadAttention::create(std::size_t dim, std::size_t heads, Rng& rng) {
  if (heads == 0 || dim % heads != 0) {
    throw DimensionError("model dimension " + std::to_string(dim) + " not divisible by " +
                         std::to_string(heads) + " heads");
  }
  MultiHeadAttention attn;
  attn.query = Linear::create(dim, dim, rng);
  attn.key = Linear::create(dim, dim, rng);
  attn.value = Linear::create(dim, dim, rng);
  attn.output = Linear::create(dim, dim, rng);
  attn.heads = heads;
  return attn;
}

Tensor MultiHeadAttention::operator()(const Tensor& queries, const Tensor& keys, const Tensor& values,
                                      const AttentionMask* mask) const {
  const std::size_t dim = queries.cols();
  if (dim % heads != 0) throw DimensionError("attention width not divisible by head count");
  if (keys.rows() != values.rows()) throw DimensionError("attention keys and values differ in length");
  if (mask && (mask->rows() != queries.rows() || mask->cols() != keys.rows())) {
    throw DimensionError("attention mask is " + std::to_string(mask->rows()) + "x" + std::to_string(mask->cols()) +
                         ", expected " + std::to_string(queries.rows()) + "x" + std::to_string(keys.rows()));
  }
  const std::size_t head_dim = dim / heads;
  const double scale_factor = 1.0 / std::sqrt(static_cast<double>(head_dim));
  const Tensor q = query(queries);
  const Tensor k = key(keys);
  const Tensor v = value(values);
  std::vector<Tensor> outputs;
  outputs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t start = h * head_dim;
    Tensor qh = heads == 1 ? q : slice_cols(q, start, head_dim);
    Tensor kh = heads == 1 ? k : slice_cols(k, start, head_dim);
    Tensor vh = heads == 1 ? v : slice_cols(v, start, head_dim);
    Tensor scores = scale(matmul_transposed(qh, kh), scale_factor);
    Tensor weights = mask ? masked_softmax(scores, mask->flags()) : softmax(scores);
    outputs.push_back(matmul(weights, vh));
  }
  return output(concat_cols(outputs));
}

void MultiHeadAttention::collect(NamedTensors& out, const std::string& prefix) const {
  query.collect(out, prefix + ".query");
  key.collect(out, prefix + ".key");
  value.collect(out, prefix + ".value");
  output.collect(out, prefix + ".output");
}

// ---- feed-forward / block --------------------------------------------------------------

FeedForward FeedForward::create(std::size_t dim, Rng& rng) {
  return FeedForward{Linear::create(dim, 4 * dim, rng), Linear::create(4 * dim, dim, rng)};
}

Tensor FeedForward::operator()(const Tensor& x) const { return down(gelu(up(x))); }

void FeedForward::collect(NamedTensors& out, const std::string& prefix) const {
  up.collect(out, prefix + ".up");
  down.collect(out, prefix + ".down");
}

TransformerBlock TransformerBlock::create(std::size_t dim, std::size_t heads, bool with_cross, Rng& rng) {
  TransformerBlock block;
  block.self_norm = LayerNorm::create(dim);
  block.self_attention = MultiHeadAttention::create(dim, heads, rng);
  block.has_cross = with_cross;
  if (with_cross) {
    block.cross_norm = LayerNorm::create(dim);
    block.cross_attention = MultiHeadAttention::create(dim, heads, rng);
  }
  block.ffn_norm = LayerNorm::create(dim);
  block.ffn = FeedForward::create(dim, rng);
  return block;
}

Tensor TransformerBlock::operator()(const Tensor& x, const AttentionMask* mask, const Tensor* context) const {
  const Tensor normed = self_norm(x);
  Tensor h = add(x, self_attention(normed, normed, normed, mask));
  if (context) {
    if (!has_cross) throw UsageError("block has no cross-attention sublayer");
    h = add(h, cross_attention(cross_norm(h), *context, *context));
  }
  return add(h, ffn(ffn_norm(h)));
}

void TransformerBlock::collect(NamedTensors& out, const std::string& prefix) const {
  self_norm.collect(out, prefix + ".self_norm");
  self_attention.collect(out, prefix + ".self_attn");
  if (has_cross) {
    cross_norm.collect(out, prefix + ".cross_norm");
    cross_attention.collect(out, prefix + ".cross_attn");
  }
  ffn_norm.collect(out, prefix + ".ffn_norm");
  ffn.collect(out, prefix + ".ffn");
}

// ---- embeddings / decoder ------------------------------------------------------------------

Embedding Embedding::create(std::size_t vocab, std::size_t max_len, std::size_t dim, Rng& rng) {
  return Embedding{init_normal({vocab, dim}, rng), init_normal({max_len, dim}, rng)};
}

Tensor Embedding::lookup(std::span<const int> ids) const {
  const auto vocab = tokens.shape()[0];
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(vocab));
    }
  }
  return gather_rows(tokens, ids);
}

Tensor Embedding::add_positions(const Tensor& x) const {
  const std::size_t length = x.rows();
  if (length > positions.shape()[0]) {
    throw DimensionError("sequence length " + std::to_string(length) + " exceeds maximum " +
                         std::to_string(positions.shape()[0]));
  }
  return add(x, slice_rows(positions, 0, length));
}

void Embedding::collect(NamedTensors& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".tokens", tokens);
  out.emplace_back(prefix + ".positions", positions);
}

Decoder Decoder::create(const DecoderConfig& config, Rng& rng) {
  if (config.vocab_size == 0 || config.model_dim == 0 || config.max_len == 0) {
    throw UsageError("decoder needs a nonempty vocabulary, width and length");
  }
  Decoder d;
  d.config_ = config;
  d.embedding_ = Embedding::create(config.vocab_size, config.max_len, config.model_dim, rng);
  for (std::size_t i = 0; i < config.layers; ++i) {
    d.blocks_.push_back(TransformerBlock::create(config.model_dim, config.heads, false, rng));
  }
  d.final_norm_ = LayerNorm::create(config.model_dim);
  d.head_ = Linear::create(config.model_dim, config.vocab_size, rng);
  return d;
}

Tensor Decoder::embed_tokens(std::span<const int> ids) const { return embedding_.lookup(ids); }

Tensor Decoder::hidden_states(const Tensor& embeddings) const {
  if (embeddings.cols() != config_.model_dim) {
    throw DimensionError("decoder input width " + std::to_string(embeddings.cols()) + " != " +
                         std::to_string(config_.model_dim));
  }
  Tensor x = embedding_.add_positions(embeddings);
  const AttentionMask mask = AttentionMask::causal(x.rows());
  for (const auto& block : blocks_) x = block(x, &mask);
  return final_norm_(x);
}

Tensor Decoder::project(const Tensor& hidden) const { return head_(hidden); }

Tensor Decoder::logits(const Tensor& embeddings) const { return project(hidden_states(embeddings)); }

Tensor Decoder::forward(std::span<const int> ids) const { return logits(embed_tokens(ids)); }

void Decoder::collect(NamedTensors& out, const std::string& prefix) const {
  embedding_.collect(out, prefix + ".embed");
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(out, prefix + ".block" + std::to_string(i));
  final_norm_.collect(out, prefix + ".final_norm");
  head_.collect(out, prefix + ".head");
}

Tensor cross_entropy_nll(const Tensor& logits, std::span<const int> targets,
                         std::span<const std::uint8_t> ignore) {
  if (ignore.size() != targets.size()) throw DimensionError("ignore mask length differs from targets");
  std::vector<double> weights(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) weights[i] = ignore[i] ? 0.0 : 1.0;
  return softmax_cross_entropy(logits, targets, weights);
}

}  // namespace ilm::nn
