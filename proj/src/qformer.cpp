#include "ilm/qformer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ilm/data.hpp"
#include "ilm/error.hpp"
#include "ilm/optim.hpp"
#include "ilm/sampler.hpp"

namespace ilm {

QFormer QFormer::create(const QFormerConfig& config, Rng& rng) {
  if (config.num_queries == 0) throw UsageError("query bank needs at least one query");
  if (config.vocab_size == 0) throw UsageError("text tower needs a vocabulary");
  if (!(config.tau_init >= kTauMin && config.tau_init <= kTauMax)) throw UsageError("tau init outside [1e-3, 10]");
  QFormer q;
  q.config_ = config;
  const auto d = config.model_dim;
  q.queries_ = nn::init_normal({config.num_queries, d}, rng);
  q.input_proj_ = nn::Linear::create(config.cf_dim, d, rng);
  for (std::size_t l = 0; l < config.layers; ++l) q.query_blocks_.push_back(nn::TransformerBlock::create(d, config.heads, true, rng));
  q.query_norm_ = nn::LayerNorm::create(d);
  q.text_embed_ = nn::Embedding::create(config.vocab_size, config.max_text_len + 2, d, rng);
  for (std::size_t l = 0; l < config.layers; ++l) q.text_blocks_.push_back(nn::TransformerBlock::create(d, config.heads, true, rng));
  q.text_norm_ = nn::LayerNorm::create(d);
  q.gen_head_ = nn::Linear::create(d, config.vocab_size, rng);
  q.itm_head_ = nn::Linear::create(d, 1, rng);
  q.tau_ = Tensor::scalar(config.tau_init, true);
  return q;
}

Tensor QFormer::encode(const Tensor& embedding) const {
  if (embedding.size() != config_.cf_dim) {
    throw DimensionError("CF embedding has " + std::to_string(embedding.size()) + " values, expected " +
                         std::to_string(config_.cf_dim));
  }
  for (double v : embedding.data())
    if (!std::isfinite(v)) throw DegenerateInputError("CF embedding contains NaN/Inf");
  const Tensor e = embedding.ndim() == 2 ? embedding : reshape(embedding, {1, config_.cf_dim});
  const Tensor context = input_proj_(e);
  Tensor x = queries_;
  for (const auto& block : query_blocks_) x = block(x, nullptr, &context);
  return query_norm_(x);
}

Tensor QFormer::text_tower(const Tensor& x, const nn::AttentionMask* mask, const Tensor* context) const {
  Tensor h = x;
  for (const auto& block : text_blocks_) h = block(h, mask, context);
  return text_norm_(h);
}

namespace {

std::vector<int> with_prefix(int first, std::span<const int> text) {
  std::vector<int> ids{first};
  ids.insert(ids.end(), text.begin(), text.end());
  return ids;
}

}  // namespace

Tensor QFormer::text_cls(std::span<const int> text) const {
  const auto ids = with_prefix(data::tok::kCls, text);
  const Tensor h = text_tower(text_embed_.add_positions(text_embed_.lookup(ids)), nullptr, nullptr);
  return row(h, 0);
}

Tensor QFormer::match_logit(const Tensor& query_outputs, std::span<const int> text) const {
  const auto ids = with_prefix(data::tok::kCls, text);
  const Tensor h = text_tower(text_embed_.add_positions(text_embed_.lookup(ids)), nullptr, &query_outputs);
  return itm_head_(row(h, 0));
}

Tensor QFormer::generation_logits(const Tensor& query_outputs, std::span<const int> text) const {
  if (text.empty()) throw DegenerateInputError("item-grounded generation needs nonempty text");
  const std::size_t n = query_outputs.rows(), len = text.size() + 1;
  const auto ids = with_prefix(data::tok::kBos, text);
  const Tensor tokens = text_embed_.add_positions(text_embed_.lookup(ids));
  const Tensor parts[2] = {query_outputs, tokens};
  const Tensor x = concat_rows(parts);
  nn::AttentionMask mask(n + len, n + len, false);
  for (std::size_t r = 0; r < n + len; ++r) {
    for (std::size_t c = 0; c < n; ++c) mask.set(r, c, true);
    if (r >= n)
      for (std::size_t c = n; c <= r; ++c) mask.set(r, c, true);
  }
  const Tensor h = text_tower(x, &mask, nullptr);
  return gen_head_(slice_rows(h, n, len));
}

Tensor QFormer::generation_nll(const Tensor& query_outputs, std::span<const int> text) const {
  std::vector<int> targets(text.begin(), text.end());
  targets.push_back(data::tok::kEos);
  const std::vector<std::uint8_t> ignore(targets.size(), 0);
  return nn::cross_entropy_nll(generation_logits(query_outputs, text), targets, ignore);
}

void QFormer::clamp_tau() {
  auto v = tau_.mutable_data();
  v[0] = std::clamp(v[0], kTauMin, kTauMax);
}

void QFormer::collect_query_path(nn::NamedTensors& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".queries", queries_);
  input_proj_.collect(out, prefix + ".input_proj");
  for (std::size_t l = 0; l < query_blocks_.size(); ++l) query_blocks_[l].collect(out, prefix + ".query" + std::to_string(l));
  query_norm_.collect(out, prefix + ".query_norm");
}

void QFormer::collect(nn::NamedTensors& out, const std::string& prefix) const {
  collect_query_path(out, prefix);
  text_embed_.collect(out, prefix + ".text_embed");
  for (std::size_t l = 0; l < text_blocks_.size(); ++l) text_blocks_[l].collect(out, prefix + ".text" + std::to_string(l));
  text_norm_.collect(out, prefix + ".text_norm");
  gen_head_.collect(out, prefix + ".gen_head");
  itm_head_.collect(out, prefix + ".itm_head");
  out.emplace_back(prefix + ".tau", tau_);
}

// ---- selection ----------------------------------------------------------------------

namespace {

double norm_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

std::vector<double> row_norms(const Tensor& m) {
  std::vector<double> out(m.rows());
  const auto d = m.cols();
  for (std::size_t r = 0; r < m.rows(); ++r) {
    out[r] = norm_of(m.data().subspan(r * d, d));
    if (out[r] <= 1e-12) throw DegenerateInputError("zero-norm representation row " + std::to_string(r));
  }
  return out;
}

// Cosines closer than this count as ties, so rows equal up to rounding keep the lowest index.
constexpr double kTieTolerance = 1e-12;

double cosine_value(std::span<const double> a, double na, std::span<const double> b, double nb) {
  double dot = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) dot += a[k] * b[k];
  return dot / (na * nb);
}

}  // namespace

Selection select_item_rep(const Tensor& reps, const Tensor& h_cls) {
  if (reps.size() == 0) throw DegenerateInputError("empty representation");
  const auto d = reps.cols();
  if (h_cls.size() != d) throw DimensionError("h_cls width differs from the representation width");
  const double nc = norm_of(h_cls.data());
  if (nc <= 1e-12) throw DegenerateInputError("zero-norm h_cls");
  const auto norms = row_norms(reps);
  std::size_t best = 0;
  double best_sim = -2.0;
  for (std::size_t r = 0; r < reps.rows(); ++r) {
    const double s = cosine_value(reps.data().subspan(r * d, d), norms[r], h_cls.data(), nc);
    if (s > best_sim + kTieTolerance) {
      best_sim = s;
      best = r;
    }
  }
  return {best, reps.rows() == 1 ? reps : row(reps, best)};
}

PairSelection select_pair_rep(const Tensor& reps1, const Tensor& reps2) {
  if (reps1.size() == 0 || reps2.size() == 0) throw DegenerateInputError("empty representation");
  const auto d = reps1.cols();
  if (reps2.cols() != d) throw DimensionError("pair representations differ in width");
  const auto n1 = row_norms(reps1), n2 = row_norms(reps2);
  PairSelection sel;
  sel.similarity = -2.0;
  for (std::size_t i = 0; i < reps1.rows(); ++i) {
    for (std::size_t j = 0; j < reps2.rows(); ++j) {
      const double s = cosine_value(reps1.data().subspan(i * d, d), n1[i], reps2.data().subspan(j * d, d), n2[j]);
      if (s > sel.similarity + kTieTolerance) {
        sel.similarity = s;
        sel.left = i;
        sel.right = j;
      }
    }
  }
  sel.left_rep = reps1.rows() == 1 ? reps1 : row(reps1, sel.left);
  sel.right_rep = reps2.rows() == 1 ? reps2 : row(reps2, sel.right);
  return sel;
}

// ---- losses -----------------------------------------------------------------------------

Tensor symmetric_info_nce(const Tensor& left, const Tensor& right, const Tensor& tau) {
  if (left.shape() != right.shape()) throw DimensionError("contrastive sides differ in shape");
  const std::size_t b = left.rows();
  const Tensor logits = mul(matmul_transposed(l2_normalize_rows(left), l2_normalize_rows(right)), reciprocal(tau));
  std::vector<int> diag(b);
  std::iota(diag.begin(), diag.end(), 0);
  const std::vector<double> ones(b, 1.0);
  const Tensor forward = softmax_cross_entropy(logits, diag, ones);
  const Tensor backward_dir = softmax_cross_entropy(transpose(logits), diag, ones);
  return scale(add(forward, backward_dir), 0.5);
}

namespace {

void check_batch(std::size_t reps, std::size_t texts) {
  if (reps == 0) throw UsageError("empty batch");
  if (reps != texts) throw DimensionError("batch has mismatched representation and text counts");
}

std::vector<Tensor> encode_all(const QFormer& model, const std::vector<Tensor>& embeddings) {
  std::vector<Tensor> out;
  out.reserve(embeddings.size());
  for (const auto& e : embeddings) out.push_back(model.encode(e));
  return out;
}

}  // namespace

Tensor itc_loss_from_reps(const QFormer& model, const std::vector<Tensor>& reps,
                          const std::vector<std::vector<int>>& texts) {
  check_batch(reps.size(), texts.size());
  std::vector<Tensor> items, clss;
  for (std::size_t b = 0; b < reps.size(); ++b) {
    Tensor cls = model.text_cls(texts[b]);
    items.push_back(select_item_rep(reps[b], cls).rep);
    clss.push_back(std::move(cls));
  }
  return symmetric_info_nce(concat_rows(items), concat_rows(clss), model.tau());
}

Tensor itg_loss_from_reps(const QFormer& model, const std::vector<Tensor>& reps,
                          const std::vector<std::vector<int>>& texts) {
  check_batch(reps.size(), texts.size());
  std::vector<Tensor> losses;
  for (std::size_t b = 0; b < reps.size(); ++b) losses.push_back(reshape(model.generation_nll(reps[b], texts[b]), {1, 1}));
  return mean(concat_cols(losses));
}

Tensor itm_loss_from_reps(const QFormer& model, const std::vector<Tensor>& reps,
                          const std::vector<std::vector<int>>& texts, Rng& rng) {
  check_batch(reps.size(), texts.size());
  const std::size_t b = reps.size();
  if (b < 2) throw UsageError("item-text matching needs a batch of at least 2 for in-batch negatives");
  std::vector<Tensor> logits;
  std::vector<double> labels;
  for (std::size_t i = 0; i < b; ++i) {
    logits.push_back(model.match_logit(reps[i], texts[i]));
    labels.push_back(1.0);
    std::size_t j = uniform_index(rng, b - 1);
    if (j >= i) ++j;
    logits.push_back(model.match_logit(reps[i], texts[j]));
    labels.push_back(0.0);
  }
  return bce_with_logits(concat_rows(logits), labels);
}

Tensor itc_loss(const QFormer& model, const ItemTextBatch& batch) {
  return itc_loss_from_reps(model, encode_all(model, batch.embeddings), batch.texts);
}

Tensor itg_loss(const QFormer& model, const ItemTextBatch& batch) {
  return itg_loss_from_reps(model, encode_all(model, batch.embeddings), batch.texts);
}

Tensor itm_loss(const QFormer& model, const ItemTextBatch& batch, Rng& rng) {
  return itm_loss_from_reps(model, encode_all(model, batch.embeddings), batch.texts, rng);
}

Tensor iic_loss(const QFormer& model, const PairBatch& batch) {
  if (batch.left.empty()) throw UsageError("empty batch");
  if (batch.left.size() != batch.right.size()) throw DimensionError("pair batch sides differ in size");
  std::vector<Tensor> lefts, rights;
  for (std::size_t b = 0; b < batch.left.size(); ++b) {
    auto sel = select_pair_rep(model.encode(batch.left[b]), model.encode(batch.right[b]));
    lefts.push_back(std::move(sel.left_rep));
    rights.push_back(std::move(sel.right_rep));
  }
  return symmetric_info_nce(concat_rows(lefts), concat_rows(rights), model.tau());
}

// ---- phase 1 ------------------------------------------------------------------------------

std::string_view phase1_mode_name(Phase1Mode mode) {
  switch (mode) {
    case Phase1Mode::kIT: return "IT";
    case Phase1Mode::kITII: return "IT-II";
    case Phase1Mode::kITUI: return "IT-UI";
    case Phase1Mode::kITIIUI: return "IT-II-UI";
  }
  return "?";
}

Phase1Mode parse_phase1_mode(std::string_view name) {
  for (auto m : {Phase1Mode::kIT, Phase1Mode::kITII, Phase1Mode::kITUI, Phase1Mode::kITIIUI})
    if (phase1_mode_name(m) == name) return m;
  throw UsageError("unknown phase-1 mode '" + std::string(name) + "'");
}

double mean_itg(const QFormer& model, const Tensor& item_embeddings, const std::vector<TextPair>& pairs) {
  if (pairs.empty()) return 0.0;
  NoGradGuard guard;
  double total = 0.0;
  for (const auto& p : pairs) {
    total += model.generation_nll(model.encode(row(item_embeddings, p.item)), p.tokens).item();
  }
  return total / static_cast<double>(pairs.size());
}


Phase1Result phase1_train(QFormer& model, const Phase1Data& data, const Phase1Config& config, Rng& rng) {
  if (data.train_texts.empty()) throw UsageError("phase 1 needs a nonempty item-text dataset");
  if (config.batch_size == 0) throw UsageError("batch size must be positive");
  std::vector<const std::vector<EntityPair>*> pair_sources;
  const bool want_ii = config.mode == Phase1Mode::kITII || config.mode == Phase1Mode::kITIIUI;
  const bool want_ui = config.mode == Phase1Mode::kITUI || config.mode == Phase1Mode::kITIIUI;
  if (want_ii && !data.item_item.empty()) pair_sources.push_back(&data.item_item);
  if (want_ui && !data.user_item.empty()) pair_sources.push_back(&data.user_item);

  nn::NamedTensors named;
  model.collect(named);
  std::vector<Tensor> params;
  for (const auto& [name, t] : named) params.push_back(t);
  Adam adam(params, AdamConfig{0.9, 0.999, 1e-8, config.clip_norm});

  EpochSampler text_sampler(data.train_texts.size(), rng);
  std::vector<EpochSampler> pair_samplers;
  for (const auto* src : pair_sources) pair_samplers.emplace_back(src->size(), rng);
  std::size_t pair_turn = 0;
  Phase1Result result;
  auto record = [&](std::size_t step, const std::string& name, double value) {
    if (!std::isfinite(value)) throw NumericalError("phase-1 loss '" + name + "' is not finite at step " + std::to_string(step));
    result.trace.push_back({step, name, value});
  };
  auto embedding_of = [&](bool user, std::uint32_t id) {
    return row(user ? data.user_embeddings : data.item_embeddings, id);
  };

  for (std::size_t step = 0; step < config.steps; ++step) {
    const double lr = scheduled_lr(config.learning_rate, step, config.steps, LrSchedule::kCosine);
    const bool pair_step = step % 2 == 1 && !pair_sources.empty();
    Tensor loss;
    bool epoch_end = false;
    if (pair_step) {
      const std::size_t src = pair_turn++ % pair_sources.size();
      bool wrapped = false;
      PairBatch batch;
      for (auto k : pair_samplers[src].next(config.batch_size, wrapped)) {
        const auto& p = (*pair_sources[src])[k];
        batch.left.push_back(embedding_of(p.left_is_user, p.left));
        batch.right.push_back(embedding_of(false, p.right));
      }
      loss = iic_loss(model, batch);
      record(step, pair_sources[src] == &data.item_item ? "iic_item_item" : "iic_user_item", loss.item());
    } else {
      std::vector<Tensor> reps;
      std::vector<std::vector<int>> texts;
      for (auto k : text_sampler.next(config.batch_size, epoch_end)) {
        const auto& p = data.train_texts[k];
        reps.push_back(model.encode(embedding_of(false, p.item)));
        texts.push_back(p.tokens);
      }
      const Tensor itc = itc_loss_from_reps(model, reps, texts);
      const Tensor itg = itg_loss_from_reps(model, reps, texts);
      const bool can_match = reps.size() >= 2;
      const Tensor itm = can_match ? itm_loss_from_reps(model, reps, texts, rng) : Tensor();
      loss = can_match ? add(add(itc, itg), itm) : add(itc, itg);
      record(step, "itc", itc.item());
      record(step, "itg", itg.item());
      if (can_match) record(step, "itm", itm.item());
    }
    adam.step(backward(loss), lr);
    model.clamp_tau();
    if (epoch_end) {
      record(step, "train_itg", mean_itg(model, data.item_embeddings, data.train_texts));
      if (!data.eval_texts.empty()) record(step, "eval_itg", mean_itg(model, data.item_embeddings, data.eval_texts));
    }
  }
  result.final_train_itg = mean_itg(model, data.item_embeddings, data.train_texts);
  if (!data.eval_texts.empty()) result.final_eval_itg = mean_itg(model, data.item_embeddings, data.eval_texts);
  return result;
}

}  // namespace ilm
