#pragma once

// Querying transformer over a single CF embedding, its text tower and the
// four alignment losses used in phase 1.

#include <string>
#include <vector>

#include "ilm/nn.hpp"
#include "ilm/rng.hpp"

namespace ilm {

struct QFormerConfig {
  std::size_t cf_dim = 32;
  std::size_t model_dim = 64;
  std::size_t num_queries = 8;
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t vocab_size = 0;
  std::size_t max_text_len = 48;
  double tau_init = 0.07;
};

constexpr double kTauMin = 1e-3;
constexpr double kTauMax = 10.0;

class QFormer {
 public:
  static QFormer create(const QFormerConfig& config, Rng& rng);

  const QFormerConfig& config() const { return config_; }

  // N×d_q query outputs for one CF embedding (shape {d_cf} or {1, d_cf}).
  Tensor encode(const Tensor& embedding) const;
  // h_cls: unimodal text tower over [CLS, text], bidirectional. 1×d_q.
  Tensor text_cls(std::span<const int> text) const;
  // Matching logit: text tower over [CLS, text] cross-attending to the query outputs.
  Tensor match_logit(const Tensor& query_outputs, std::span<const int> text) const;
  // Mean NLL of [text, EOS] with the query outputs as a prefix before [BOS, text].
  Tensor generation_nll(const Tensor& query_outputs, std::span<const int> text) const;
  // Per-position generation logits, (L+1)×V, for the same layout.
  Tensor generation_logits(const Tensor& query_outputs, std::span<const int> text) const;

  const Tensor& tau() const { return tau_; }
  void clamp_tau();

  void collect(nn::NamedTensors& out, const std::string& prefix = "qformer") const;
  // Parameters of the query path only (queries, input projection, query tower).
  void collect_query_path(nn::NamedTensors& out, const std::string& prefix = "qformer") const;

 private:
  Tensor text_tower(const Tensor& x, const nn::AttentionMask* mask, const Tensor* context) const;

  QFormerConfig config_;
  Tensor queries_;
  nn::Linear input_proj_;
  std::vector<nn::TransformerBlock> query_blocks_;
  nn::LayerNorm query_norm_;
  nn::Embedding text_embed_;
  std::vector<nn::TransformerBlock> text_blocks_;
  nn::LayerNorm text_norm_;
  nn::Linear gen_head_;
  nn::Linear itm_head_;
  Tensor tau_;
};

struct Selection {
  std::size_t index = 0;
  Tensor rep;  // 1×d row of H
};

struct PairSelection {
  std::size_t left = 0;
  std::size_t right = 0;
  double similarity = 0.0;
  Tensor left_rep;
  Tensor right_rep;
};

// argmax_j cos(h_j, h_cls), lowest index on ties.
Selection select_item_rep(const Tensor& reps, const Tensor& h_cls);
// argmax over (i,j) of cos(h1_i, h2_j), lexicographically smallest on ties.
PairSelection select_pair_rep(const Tensor& reps1, const Tensor& reps2);

// Symmetric InfoNCE between row-aligned B×d matrices with cosine logits / τ.
Tensor symmetric_info_nce(const Tensor& left, const Tensor& right, const Tensor& tau);

struct ItemTextBatch {
  std::vector<Tensor> embeddings;  // each {1, d_cf}
  std::vector<std::vector<int>> texts;
};

struct PairBatch {
  std::vector<Tensor> left;
  std::vector<Tensor> right;
};

Tensor itc_loss(const QFormer& model, const ItemTextBatch& batch);
Tensor iic_loss(const QFormer& model, const PairBatch& batch);
Tensor itg_loss(const QFormer& model, const ItemTextBatch& batch);
// One negative per positive, text drawn uniformly from the other batch members.
Tensor itm_loss(const QFormer& model, const ItemTextBatch& batch, Rng& rng);

// Same losses with query outputs already computed (shared across the three
// item-text objectives in one step).
Tensor itc_loss_from_reps(const QFormer& model, const std::vector<Tensor>& reps,
                          const std::vector<std::vector<int>>& texts);
Tensor itg_loss_from_reps(const QFormer& model, const std::vector<Tensor>& reps,
                          const std::vector<std::vector<int>>& texts);
Tensor itm_loss_from_reps(const QFormer& model, const std::vector<Tensor>& reps,
                          const std::vector<std::vector<int>>& texts, Rng& rng);

// ---- phase-1 training ---------------------------------------------------------------

// IT-II-UI alternates item-item and user-item batches on the odd steps.
enum class Phase1Mode { kIT, kITII, kITUI, kITIIUI };

std::string_view phase1_mode_name(Phase1Mode mode);
Phase1Mode parse_phase1_mode(std::string_view name);

struct Phase1Config {
  Phase1Mode mode = Phase1Mode::kITUI;
  std::size_t steps = 2000;
  std::size_t batch_size = 16;
  double learning_rate = 3e-4;
  double clip_norm = 1.0;
};

struct TextPair {
  std::uint32_t item = 0;
  std::vector<int> tokens;
};

struct EntityPair {
  bool left_is_user = false;
  std::uint32_t left = 0;
  std::uint32_t right = 0;  // always an item
};

struct Phase1Data {
  Tensor item_embeddings;  // items × d_cf
  Tensor user_embeddings;  // users × d_cf
  std::vector<TextPair> train_texts;
  std::vector<TextPair> eval_texts;
  std::vector<EntityPair> item_item;
  std::vector<EntityPair> user_item;
};

struct LossRecord {
  std::size_t step = 0;
  std::string name;
  double value = 0.0;
};

struct Phase1Result {
  std::vector<LossRecord> trace;
  double final_train_itg = 0.0;
  double final_eval_itg = 0.0;
};

// Mean over pairs of the per-pair generation NLL, no gradient.
double mean_itg(const QFormer& model, const Tensor& item_embeddings, const std::vector<TextPair>& pairs);

// Even steps draw an item-text batch (itc + itg + itm); odd steps draw a pair
// batch when the mode has pair data (item-item and user-item alternate when
// both are present). Train/eval itg are recorded at every epoch boundary of
// the item-text stream.
Phase1Result phase1_train(QFormer& model, const Phase1Data& data, const Phase1Config& config, Rng& rng);

}  // namespace ilm
