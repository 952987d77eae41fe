#include "ilm/fusion.hpp"

#include <cmath>
#include <limits>

#include <spdlog/spdlog.h>

#include "ilm/error.hpp"
#include "ilm/optim.hpp"
#include "ilm/sampler.hpp"

namespace ilm {

using data::EntityKind;
using data::SequenceExample;

Tensor standardize_table(const Tensor& table) {
  const auto values = table.data();
  double sq = 0.0;
  for (double x : values) sq += x * x;
  const double rms = std::sqrt(sq / static_cast<double>(table.rows()));
  std::vector<double> out(values.begin(), values.end());
  if (rms > 0.0)
    for (auto& x : out) x /= rms;
  return Tensor::from_data(table.shape(), std::move(out));
}

CfTables load_cf_tables(const Checkpoint& embeddings) {
  if (!embeddings.has_array("item_emb") || !embeddings.has_array("user_emb")) {
    throw StorageError("embedding checkpoint lacks item_emb/user_emb");
  }
  return {standardize_table(array_to_tensor(embeddings.array("item_emb"))),
          standardize_table(array_to_tensor(embeddings.array("user_emb")))};
}

std::string_view adapter_name(AdapterKind kind) {
  switch (kind) {
    case AdapterKind::kQFormer: return "qformer";
    case AdapterKind::kMlp: return "mlp";
    case AdapterKind::kNone: return "none";
    case AdapterKind::kQFormerRand: return "qformer-rand";
  }
  return "?";
}

AdapterKind parse_adapter(std::string_view name) {
  for (auto kind : {AdapterKind::kQFormer, AdapterKind::kMlp, AdapterKind::kNone, AdapterKind::kQFormerRand}) {
    if (adapter_name(kind) == name) return kind;
  }
  throw ConfigError("unknown adapter '" + std::string(name) + "' (expected qformer, mlp, none or qformer-rand)");
}

// ---- adapters ----------------------------------------------------------------------------

QFormerAdapter::QFormerAdapter(QFormer qformer, std::size_t model_dim, Rng& rng)
    : qformer_(std::move(qformer)), projector_(nn::Linear::create(qformer_.config().model_dim, model_dim, rng)) {}

Tensor QFormerAdapter::embed(const Tensor& cf_embedding) const { return projector_(qformer_.encode(cf_embedding)); }

void QFormerAdapter::collect(nn::NamedTensors& out) const {
  qformer_.collect_query_path(out, "adapter.qformer");
  projector_.collect(out, "adapter.projector");
}

MlpAdapter::MlpAdapter(std::size_t cf_dim, std::size_t model_dim, std::size_t rows, Rng& rng)
    : hidden_(nn::Linear::create(cf_dim, 10 * cf_dim, rng)),
      out_(nn::Linear::create(10 * cf_dim, rows * model_dim, rng)),
      rows_(rows),
      model_dim_(model_dim) {
  if (rows == 0) throw UsageError("MLP adapter needs at least one output embedding");
}

Tensor MlpAdapter::embed(const Tensor& cf_embedding) const {
  const Tensor x = cf_embedding.shape().size() == 1 ? reshape(cf_embedding, {1, cf_embedding.size()}) : cf_embedding;
  return reshape(out_(gelu(hidden_(x))), {rows_, model_dim_});
}

void MlpAdapter::collect(nn::NamedTensors& out) const {
  hidden_.collect(out, "adapter.mlp.hidden");
  out_.collect(out, "adapter.mlp.out");
}

std::unique_ptr<ItemAdapter> build_adapter(const AdapterConfig& config, const QFormer* qformer, Rng& rng) {
  switch (config.kind) {
    case AdapterKind::kNone: return nullptr;
    case AdapterKind::kMlp: return std::make_unique<MlpAdapter>(config.cf_dim, config.model_dim, config.rows, rng);
    case AdapterKind::kQFormer:
    case AdapterKind::kQFormerRand:
      if (qformer == nullptr) {
        throw DependencyError(config.kind == AdapterKind::kQFormer ? "adapter=qformer needs the phase1 checkpoint"
                                                                   : "adapter=qformer-rand needs an initialized Q-Former");
      }
      if (qformer->config().cf_dim != config.cf_dim) throw DimensionError("Q-Former input width differs from CF rank");
      return std::make_unique<QFormerAdapter>(*qformer, config.model_dim, rng);
  }
  return nullptr;
}

// ---- fused model ---------------------------------------------------------------------------

FusedModel::FusedModel(std::shared_ptr<const nn::Decoder> backbone, std::unique_ptr<ItemAdapter> adapter,
                       CfTables tables)
    : backbone_(std::move(backbone)), adapter_(std::move(adapter)), tables_(std::move(tables)) {
  nn::NamedTensors frozen;
  backbone_->collect(frozen, "backbone");
  nn::set_trainable(frozen, false);
  if (adapter_) {
    nn::NamedTensors trainable;
    adapter_->collect(trainable);
    nn::set_trainable(trainable, true);
  }
}

SequenceExample FusedModel::fit(SequenceExample example, std::size_t reserve) const {
  const auto max_len = backbone_->config().max_len;
  if (reserve + 1 >= max_len) throw UsageError("no room for a prompt within the decoder context");
  if (truncate_history(example, slot_width(), max_len - reserve)) {
    spdlog::debug("example for user {} left-truncated to fit {} positions", example.user, max_len);
  }
  return example;
}

Tensor FusedModel::entity_rows(EntityKind kind, std::uint32_t id) const {
  const Tensor& table = kind == EntityKind::kUser ? tables_.users : tables_.items;
  if (id >= table.rows()) {
    throw UsageError("placeholder refers to unknown " + std::string(kind == EntityKind::kUser ? "user " : "item ") +
                     std::to_string(id));
  }
  return adapter_->embed(row(table, id));
}

Tensor FusedModel::assemble_positions(std::span<const int> prompt, std::span<const EntityKind> kinds,
                                      std::span<const std::uint32_t> ids, bool with_bos) const {
  std::vector<Tensor> parts;
  std::vector<int> run;
  if (with_bos) run.push_back(data::tok::kBos);
  auto flush = [&] {
    if (!run.empty()) parts.push_back(backbone_->embed_tokens(run));
    run.clear();
  };
  for (std::size_t p = 0; p < prompt.size(); ++p) {
    if (kinds.empty() || kinds[p] == EntityKind::kNone) {
      run.push_back(prompt[p]);
    } else if (adapter_) {
      flush();
      parts.push_back(entity_rows(kinds[p], ids[p]));
    }
  }
  flush();
  if (parts.empty()) throw UsageError("empty prompt");
  return parts.size() == 1 ? parts.front() : concat_rows(parts);
}

Tensor FusedModel::assemble(const SequenceExample& example) const {
  return assemble_positions(example.prompt, example.slot_kind, example.slot_id, true);
}

Tensor FusedModel::loss(const SequenceExample& example) const {
  const auto fitted = fit(example, example.target.size());
  return ilm::target_nll(*backbone_, assemble(fitted), fitted.target);
}

Tensor FusedModel::forward_text_only(std::span<const int> tokens) const {
  return backbone_->logits(assemble_positions(tokens, {}, {}, false));
}

std::vector<BeamHypothesis> FusedModel::generate(const SequenceExample& example, std::size_t beam_size,
                                                 std::size_t max_new) const {
  NoGradGuard guard;
  const auto fitted = fit(example, std::max<std::size_t>(max_new, 1));
  return generate_beam(*backbone_, assemble(fitted), beam_size, max_new);
}

double FusedModel::target_nll(const SequenceExample& example) const {
  NoGradGuard guard;
  return loss(example).item();
}

std::vector<Tensor> FusedModel::trainable_parameters() const {
  std::vector<Tensor> out;
  if (!adapter_) return out;
  nn::NamedTensors named;
  adapter_->collect(named);
  for (const auto& [name, t] : named) out.push_back(t);
  return out;
}

// ---- phase 2 ---------------------------------------------------------------------------------

namespace {

std::vector<std::vector<double>> snapshot(const std::vector<Tensor>& params) {
  std::vector<std::vector<double>> out;
  for (const auto& p : params) out.emplace_back(p.data().begin(), p.data().end());
  return out;
}

void restore(const std::vector<Tensor>& params, const std::vector<std::vector<double>>& values) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i];
    auto dst = p.mutable_data();
    std::copy(values[i].begin(), values[i].end(), dst.begin());
  }
}

}  // namespace

Phase2Result phase2_train(FusedModel& model, const std::vector<SequenceExample>& train, const Phase2Config& config,
                          Rng& rng, const std::function<double(const FusedModel&)>& dev_score) {
  Phase2Result result;
  const auto params = model.trainable_parameters();
  if (params.empty()) {
    if (dev_score) result.best_dev = dev_score(model);
    result.dev_scores.emplace_back(0, result.best_dev);
    return result;
  }
  if (train.empty()) throw UsageError("phase 2 needs training examples");
  if (config.batch_size == 0) throw UsageError("batch size must be positive");

  Adam adam(params, AdamConfig{0.9, 0.999, 1e-8, config.clip_norm});
  EpochSampler sampler(train.size(), rng);
  double best = -std::numeric_limits<double>::infinity();
  std::vector<std::vector<double>> best_state;
  auto consider = [&](std::size_t step) {
    if (!dev_score) return;
    const double score = dev_score(model);
    result.dev_scores.emplace_back(step, score);
    if (score > best) {
      best = score;
      result.best_step = step;
      result.best_dev = score;
      best_state = snapshot(params);
    }
  };

  for (std::size_t step = 0; step < config.steps; ++step) {
    Tensor total;
    const auto batch = sampler.next(config.batch_size);
    for (auto k : batch) {
      const Tensor l = model.loss(train[k]);
      total = total.defined() ? add(total, l) : l;
    }
    const Tensor loss = scale(total, 1.0 / static_cast<double>(batch.size()));
    if (!std::isfinite(loss.item())) {
      throw NumericalError("phase-2 loss is not finite at step " + std::to_string(step) + " (batch of " +
                           std::to_string(batch.size()) + ")");
    }
    result.losses.push_back(loss.item());
    adam.step(backward(loss), scheduled_lr(config.learning_rate, step, config.steps, LrSchedule::kCosine));
    const bool last = step + 1 == config.steps;
    if (last || (config.eval_every > 0 && (step + 1) % config.eval_every == 0)) consider(step + 1);
  }
  if (config.steps == 0) consider(0);
  if (!best_state.empty()) restore(params, best_state);
  return result;
}

Checkpoint adapter_checkpoint(const FusedModel& model, const std::string& backbone_hash) {
  if (model.adapter() == nullptr) throw UsageError("model has no adapter to save");
  Checkpoint ckpt;
  ckpt.set_meta("kind", "adapter");
  ckpt.set_meta("rows", std::to_string(model.adapter()->rows()));
  ckpt.set_meta("backbone_sha256", backbone_hash);
  nn::NamedTensors named;
  model.adapter()->collect(named);
  add_arrays(ckpt, named);
  return ckpt;
}

void load_adapter(const Checkpoint& ckpt, FusedModel& model, const std::string& backbone_hash) {
  if (ckpt.meta("kind") != "adapter") throw StorageError("not an adapter checkpoint");
  const auto bound = ckpt.meta("backbone_sha256").value_or("");
  if (bound != backbone_hash) {
    throw StorageError("adapter checkpoint is bound to backbone " + bound + ", not " + backbone_hash);
  }
  if (model.adapter() == nullptr) throw UsageError("model has no adapter to load into");
  nn::NamedTensors named;
  model.adapter()->collect(named);
  load_arrays(ckpt, named);
}

}  // namespace ilm
