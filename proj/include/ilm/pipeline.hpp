#pragma once

// Stage drivers over an on-disk run directory:
//
//   <out>/seed_<k>/data      dataset, vocabulary, pairs, rendered prompts, stats
//                  mf        embeddings.ilmc
//                  backbone  backbone.ilmc
//                  phase1    qformer.ilmc, trace, itg summary
//                  phase2/<adapter>
//                  eval/<adapter>
//
// Every stage directory ends with manifest.json (stage, config hash, seed,
// output checksums), written last.

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "ilm/config.hpp"
#include "ilm/eval.hpp"
#include "ilm/fusion.hpp"

namespace ilm::pipeline {

struct Layout {
  std::filesystem::path root;  // shared data, mf and backbone stages
  std::filesystem::path run;   // phase1, phase2 and eval; ablations redirect this

  std::filesystem::path data() const { return root / "data"; }
  std::filesystem::path mf() const { return root / "mf"; }
  std::filesystem::path backbone() const { return root / "backbone"; }
  std::filesystem::path phase1() const { return run / "phase1"; }
  std::filesystem::path phase2(AdapterKind kind) const { return run / "phase2" / std::string(adapter_name(kind)); }
  std::filesystem::path eval(AdapterKind kind) const { return run / "eval" / std::string(adapter_name(kind)); }
};

struct Context {
  RunConfig config;
  std::uint64_t seed = 0;
  Layout layout;
  bool allow_mixed = false;  // accept upstream artifacts made under another config hash
};

Context make_context(const RunConfig& config, const std::filesystem::path& out, std::uint64_t seed);

// Exclusive lock file in a run directory, released on destruction.
class StageLock {
 public:
  explicit StageLock(const std::filesystem::path& dir);
  ~StageLock();
  StageLock(const StageLock&) = delete;
  StageLock& operator=(const StageLock&) = delete;

 private:
  std::filesystem::path path_;
};

struct Phase1Summary {
  std::string mode;
  double final_train_itg = 0.0;
  double final_eval_itg = 0.0;
};

struct Phase2Summary {
  std::size_t best_step = 0;
  double best_dev = 0.0;
  std::size_t steps = 0;
  std::string backbone_before;  // parameter checksums around training
  std::string backbone_after;
};

void run_data(const Context& ctx);
void run_mf(const Context& ctx);
void run_backbone(const Context& ctx);
Phase1Summary run_phase1(const Context& ctx);
Phase2Summary run_phase2(const Context& ctx, AdapterKind kind);
eval::EvalReport run_evaluate(const Context& ctx, AdapterKind kind);

// Backbone, CF tables and the phase-2 adapter of `kind` as stored on disk.
std::unique_ptr<FusedModel> load_trained_model(const Context& ctx, AdapterKind kind);

Phase1Summary read_phase1_summary(const Context& ctx);

struct QueryRow {
  std::string adapter;
  std::size_t queries = 0;
  std::string metric;
  std::optional<std::size_t> k;
  double value = 0.0;  // mean over the evaluated task/regime sets
};

struct ModeRow {
  std::string mode;
  double final_train_itg = 0.0;
  double final_eval_itg = 0.0;
};

// Both sweeps reuse the data, mf and backbone stages of ctx and write under
// <root>/ablate. Results also go to queries.jsonl and modes.jsonl there.
std::vector<QueryRow> ablate_queries(const Context& ctx);
std::vector<ModeRow> ablate_modes(const Context& ctx);

Context with_run_dir(Context ctx, const std::filesystem::path& run);

}  // namespace ilm::pipeline
