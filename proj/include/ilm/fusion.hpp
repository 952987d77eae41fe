#pragma once

// Phase-2 model: item adapters feeding a frozen decoder through placeholder
// slots, the adapter training loop and its checkpoints.

#include <functional>
#include <memory>
#include <string>

#include "ilm/backbone.hpp"
#include "ilm/checkpoint.hpp"
#include "ilm/eval.hpp"
#include "ilm/qformer.hpp"

namespace ilm {

// CF tables after a global rescale that makes the mean squared row norm 1
// (per table). Frozen inputs everywhere downstream.
struct CfTables {
  Tensor items;
  Tensor users;
};

Tensor standardize_table(const Tensor& table);
CfTables load_cf_tables(const Checkpoint& embeddings);

enum class AdapterKind { kQFormer, kMlp, kNone, kQFormerRand };

std::string_view adapter_name(AdapterKind kind);
AdapterKind parse_adapter(std::string_view name);

// Maps one CF embedding to rows() decoder-width embeddings.
class ItemAdapter {
 public:
  virtual ~ItemAdapter() = default;
  virtual Tensor embed(const Tensor& cf_embedding) const = 0;
  virtual std::size_t rows() const = 0;
  virtual void collect(nn::NamedTensors& out) const = 0;  // trainable parameters
};

class QFormerAdapter : public ItemAdapter {
 public:
  QFormerAdapter(QFormer qformer, std::size_t model_dim, Rng& rng);
  Tensor embed(const Tensor& cf_embedding) const override;
  std::size_t rows() const override { return qformer_.config().num_queries; }
  void collect(nn::NamedTensors& out) const override;

  const QFormer& qformer() const { return qformer_; }
  const nn::Linear& projector() const { return projector_; }

 private:
  QFormer qformer_;
  nn::Linear projector_;
};

// Two-layer MLP with hidden width 10·d_cf producing `rows` embeddings.
class MlpAdapter : public ItemAdapter {
 public:
  MlpAdapter(std::size_t cf_dim, std::size_t model_dim, std::size_t rows, Rng& rng);
  Tensor embed(const Tensor& cf_embedding) const override;
  std::size_t rows() const override { return rows_; }
  void collect(nn::NamedTensors& out) const override;

  std::size_t hidden_width() const { return hidden_.weight.shape()[1]; }

 private:
  nn::Linear hidden_;
  nn::Linear out_;
  std::size_t rows_;
  std::size_t model_dim_;
};

class FusedModel : public eval::PromptModel {
 public:
  // A null adapter drops placeholder slots and runs the decoder on text only.
  FusedModel(std::shared_ptr<const nn::Decoder> backbone, std::unique_ptr<ItemAdapter> adapter, CfTables tables);

  const nn::Decoder& backbone() const { return *backbone_; }
  const ItemAdapter* adapter() const { return adapter_.get(); }
  std::size_t slot_width() const { return adapter_ ? adapter_->rows() : 0; }

  // Left-truncates history so the assembled prompt plus target fits the context.
  // `reserve` positions are kept free for the target or generated tokens.
  data::SequenceExample fit(data::SequenceExample example, std::size_t reserve) const;
  // [BOS] + prompt with every slot replaced by the adapter rows of its entity.
  Tensor assemble(const data::SequenceExample& example) const;
  Tensor loss(const data::SequenceExample& example) const;
  // Logits of the decoder over a token-only prompt.
  Tensor forward_text_only(std::span<const int> tokens) const;

  std::vector<BeamHypothesis> generate(const data::SequenceExample& example, std::size_t beam_size,
                                       std::size_t max_new) const override;
  double target_nll(const data::SequenceExample& example) const override;

  std::vector<Tensor> trainable_parameters() const;

 private:
  Tensor entity_rows(data::EntityKind kind, std::uint32_t id) const;
  Tensor assemble_positions(std::span<const int> prompt, std::span<const data::EntityKind> kinds,
                            std::span<const std::uint32_t> ids, bool with_bos) const;

  std::shared_ptr<const nn::Decoder> backbone_;
  std::unique_ptr<ItemAdapter> adapter_;
  CfTables tables_;
};

struct AdapterConfig {
  AdapterKind kind = AdapterKind::kQFormer;
  std::size_t cf_dim = 32;
  std::size_t model_dim = 128;
  std::size_t rows = 8;  // MLP output count; the Q-Former uses its query count
};

// kQFormer wraps the phase-1 Q-Former and kQFormerRand a freshly initialized
// one; both need `qformer`. kNone yields no adapter.
std::unique_ptr<ItemAdapter> build_adapter(const AdapterConfig& config, const QFormer* qformer, Rng& rng);

struct Phase2Config {
  std::size_t steps = 1000;
  std::size_t batch_size = 16;
  double learning_rate = 1e-3;
  double clip_norm = 1.0;
  std::size_t eval_every = 0;  // 0: select only at the end
};

struct Phase2Result {
  std::vector<double> losses;
  std::vector<std::pair<std::size_t, double>> dev_scores;  // (step, dev NDCG@10)
  std::size_t best_step = 0;
  double best_dev = 0.0;
};

// Trains adapter parameters only. When `dev_score` is given, the trainable
// state with the best score (earliest on ties) is restored at the end.
Phase2Result phase2_train(FusedModel& model, const std::vector<data::SequenceExample>& train,
                          const Phase2Config& config, Rng& rng,
                          const std::function<double(const FusedModel&)>& dev_score = {});

// Adapter parameters plus the hash of the backbone checkpoint they bind to.
Checkpoint adapter_checkpoint(const FusedModel& model, const std::string& backbone_hash);
void load_adapter(const Checkpoint& ckpt, FusedModel& model, const std::string& backbone_hash);

}  // namespace ilm
