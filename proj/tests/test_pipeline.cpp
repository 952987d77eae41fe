#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "ilm/checkpoint.hpp"
#include "ilm/config.hpp"
#include "ilm/error.hpp"
#include "ilm/pipeline.hpp"

using namespace ilm;
namespace fs = std::filesystem;

namespace {

const char* kTiny = R"(
data:
  synth:
    users: 30
    items: 12
mf:
  rank: 4
  sweeps: 4
qformer:
  model_dim: 8
  queries: 2
  layers: 1
  heads: 2
  steps: 6
  batch_size: 4
backbone:
  model_dim: 8
  layers: 1
  heads: 2
  max_len: 96
  steps: 6
phase2:
  steps: 4
  batch_size: 4
  dev_examples: 4
eval:
  max_examples: 4
)";

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("ilm_pipeline_" + name);
  fs::remove_all(dir);
  return dir;
}

void upstream(const pipeline::Context& ctx) {
  pipeline::run_data(ctx);
  pipeline::run_mf(ctx);
  pipeline::run_backbone(ctx);
}

}  // namespace

TEST_CASE("config parsing, defaults and rejection") {
  const auto c = parse_config(kTiny);
  CHECK(c.data.synth.num_users == 30);
  CHECK(c.data.synth.text_sparsity == 0.5);
  CHECK(c.qformer.model.num_queries == 2);
  CHECK(c.qformer.train.mode == Phase1Mode::kITUI);
  CHECK(c.eval.ks == std::vector<std::size_t>{5, 10});

  CHECK_THROWS_AS(parse_config("mf:\n  rnak: 4\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("extra: 1\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("mf:\n  rank: many\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("qformer:\n  model_dim: 10\n  heads: 4\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("qformer:\n  mode: IT-XX\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("data:\n  source: movielens\n  ratings: /nonexistent\n"), ConfigError);
  CHECK_THROWS_AS(load_config("/nonexistent/run.yaml"), ConfigError);

  const auto schema = config_schema();
  for (const char* key : {"data.synth.text_sparsity", "qformer.mode", "phase2.adapter", "eval.seeds", "ablate.queries"})
    CHECK(schema.find(key) != std::string::npos);
}

TEST_CASE("config hashes cover only their sections") {
  const auto base = parse_config(kTiny);
  const std::vector<std::string> phase2{"data", "mf", "qformer", "backbone", "phase2"};
  auto other = base;
  other.eval.beam_size = 5;
  other.eval.seeds = {7};
  other.ablate.queries = {3};
  other.phase2.adapter = AdapterKind::kMlp;
  CHECK(config_hash(other, phase2) == config_hash(base, phase2));

  other = base;
  other.backbone.train.steps = 7;
  CHECK(config_hash(other, {"data", "mf"}) == config_hash(base, {"data", "mf"}));
  CHECK(config_hash(other, {"data", "backbone"}) != config_hash(base, {"data", "backbone"}));
  CHECK(config_hash(other, phase2) != config_hash(base, phase2));
  CHECK(config_hash(base, phase2).size() == 64);
}

TEST_CASE("stages record manifests and refuse missing or mismatched inputs") {
  const auto config = parse_config(kTiny);
  const auto ctx = pipeline::make_context(config, fresh_dir("deps"), 0);

  CHECK_THROWS_AS(pipeline::run_mf(ctx), DependencyError);
  pipeline::run_data(ctx);
  CHECK(fs::exists(ctx.layout.data() / "manifest.json"));
  const auto stats = read_file(ctx.layout.data() / "stats.jsonl");
  CHECK(stats.find(R"({"stat":"users","value":30})") != std::string::npos);
  CHECK(stats.find(R"({"stat":"items","value":12})") != std::string::npos);
  pipeline::run_mf(ctx);
  pipeline::run_backbone(ctx);

  try {
    pipeline::run_phase2(ctx, AdapterKind::kQFormer);
    FAIL("phase2 qformer ran without phase1");
  } catch (const DependencyError& e) {
    CHECK(std::string(e.what()).find("phase1") != std::string::npos);
  }
  const auto rand = pipeline::run_phase2(ctx, AdapterKind::kQFormerRand);
  CHECK(rand.backbone_before == rand.backbone_after);
  CHECK_THROWS_AS(pipeline::run_evaluate(ctx, AdapterKind::kMlp), DependencyError);
  const auto report = pipeline::run_evaluate(ctx, AdapterKind::kQFormerRand);
  CHECK(report.find("sequential", "seen", "ndcg", 10) != nullptr);

  auto changed = ctx;
  changed.config.mf.alpha = 10.0;
  CHECK_THROWS_AS(pipeline::run_phase2(changed, AdapterKind::kNone), DependencyError);
  changed.allow_mixed = true;
  CHECK_NOTHROW(pipeline::run_phase2(changed, AdapterKind::kNone));

  std::ofstream(ctx.layout.mf() / "embeddings.ilmc", std::ios::app) << "x";
  CHECK_THROWS_AS(pipeline::run_phase1(ctx), StorageError);
}

TEST_CASE("run lock is exclusive") {
  const auto dir = fresh_dir("lock");
  {
    pipeline::StageLock lock(dir);
    CHECK_THROWS_AS(pipeline::StageLock{dir}, StorageError);
  }
  CHECK_NOTHROW(pipeline::StageLock{dir});
  CHECK_FALSE(fs::exists(dir / ".lock"));
}

TEST_CASE("mode ablation writes one row per mode") {
  auto config = parse_config(kTiny);
  config.ablate.modes = {Phase1Mode::kIT, Phase1Mode::kITII};
  const auto ctx = pipeline::make_context(config, fresh_dir("ablate"), 1);
  upstream(ctx);
  const auto rows = pipeline::ablate_modes(ctx);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].mode == "IT");
  CHECK(rows[1].mode == "IT-II");
  CHECK(std::isfinite(rows[1].final_eval_itg));
  CHECK(fs::exists(ctx.layout.root / "ablate" / "modes.jsonl"));
  CHECK(fs::exists(ctx.layout.root / "ablate" / "mode_IT" / "phase1" / "manifest.json"));
}
