#include <iostream>
#include <map>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "ilm/checkpoint.hpp"
#include "ilm/config.hpp"
#include "ilm/error.hpp"
#include "ilm/pipeline.hpp"

namespace fs = std::filesystem;
using namespace ilm;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "runs";
  bool allow_mixed = false;
  std::string log_level = "info";
  std::vector<std::string> adapters;
  std::string sweep = "all";
};

std::string model_label(AdapterKind kind) {
  switch (kind) {
    case AdapterKind::kNone: return "openp5-r";
    case AdapterKind::kMlp: return "mlp";
    case AdapterKind::kQFormerRand: return "ilm-rand";
    case AdapterKind::kQFormer: return "ilm";
  }
  return "?";
}

class Runner {
 public:
  explicit Runner(const Options& options) : options_(options), config_(load_config(options.config)) {
    if (!options.adapters.empty()) {
      config_.eval.adapters.clear();
      for (const auto& a : options.adapters) config_.eval.adapters.push_back(parse_adapter(a));
    }
  }

  std::vector<std::uint64_t> seeds() const {
    return options_.seed ? std::vector<std::uint64_t>{*options_.seed} : config_.eval.seeds;
  }

  template <class F>
  void per_seed(F&& stage) const {
    for (auto seed : seeds()) {
      auto ctx = pipeline::make_context(config_, options_.out, seed);
      ctx.allow_mixed = options_.allow_mixed;
      pipeline::StageLock lock(ctx.layout.root);
      spdlog::info("seed {} -> {}", seed, ctx.layout.root.string());
      stage(ctx);
    }
  }

  void evaluate_all(bool train_first) const {
    std::map<AdapterKind, std::vector<eval::EvalReport>> reports;
    per_seed([&](const pipeline::Context& ctx) {
      for (auto kind : config_.eval.adapters) {
        if (train_first) pipeline::run_phase2(ctx, kind);
        auto report = pipeline::run_evaluate(ctx, kind);
        std::cout << fmt::format("\n[seed {}] {}\n", ctx.seed, model_label(kind)) << eval::report_table(report);
        reports[kind].push_back(std::move(report));
      }
    });
    std::vector<eval::AggregateRow> rows;
    for (auto kind : config_.eval.adapters) {
      const auto a = eval::aggregate(model_label(kind), reports[kind]);
      rows.insert(rows.end(), a.begin(), a.end());
    }
    if (!options_.seed) {
      write_file_atomic(fs::path(options_.out) / "aggregate.jsonl", eval::aggregate_to_jsonl(rows));
      std::cout << "\nmean ± standard error over " << seeds().size() << " seeds\n" << eval::aggregate_table(rows);
    }
  }

  const RunConfig& config() const { return config_; }

 private:
  Options options_;
  RunConfig config_;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Item-language model pipeline"};
  app.require_subcommand(1);
  Options options;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", options.config, "run configuration (YAML)")->required()->check(CLI::ExistingFile);
    cmd->add_option("--seed", options.seed, "run only this seed (default: every seed in eval.seeds)");
    cmd->add_option("--out", options.out, "output directory")->capture_default_str();
    cmd->add_flag("--allow-mixed", options.allow_mixed, "accept upstream artifacts made under another config hash");
    cmd->add_option("--log-level", options.log_level, "trace, debug, info, warn, error")->capture_default_str();
  };

  auto* gen = app.add_subcommand("gen-data", "generate or ingest the dataset and render prompts");
  gen->alias("ingest");
  auto* mf = app.add_subcommand("train-mf", "train iALS embeddings");
  auto* backbone = app.add_subcommand("pretrain-backbone", "pretrain the decoder on text-only prompts");
  auto* phase1 = app.add_subcommand("phase1", "train the Q-Former on item-language alignment");
  auto* phase2 = app.add_subcommand("phase2", "train an adapter against the frozen decoder");
  auto* evaluate = app.add_subcommand("evaluate", "score adapters on the test prompts and aggregate over seeds");
  auto* ablate = app.add_subcommand("ablate", "sweep query counts and phase-1 modes");
  auto* all = app.add_subcommand("pipeline", "run every stage, then evaluate");
  auto* schema = app.add_subcommand("schema", "print every config key with its type and default");
  for (auto* cmd : {gen, mf, backbone, phase1, phase2, evaluate, ablate, all}) add_common(cmd);
  for (auto* cmd : {phase2, evaluate, all}) {
    cmd->add_option("--adapter", options.adapters, "adapter kinds (default: phase2.adapter for phase2, eval.adapters otherwise)")
        ->check(CLI::IsMember({"none", "mlp", "qformer-rand", "qformer"}));
  }
  ablate->add_option("--sweep", options.sweep, "queries, modes or all")
      ->check(CLI::IsMember({"queries", "modes", "all"}))
      ->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (schema->parsed()) {
      std::cout << config_schema();
      return 0;
    }
    spdlog::set_level(spdlog::level::from_str(options.log_level));
    spdlog::set_pattern("%H:%M:%S %^%l%$ %v");
    const Runner runner(options);

    if (gen->parsed()) runner.per_seed(pipeline::run_data);
    if (mf->parsed()) runner.per_seed(pipeline::run_mf);
    if (backbone->parsed()) runner.per_seed(pipeline::run_backbone);
    if (phase1->parsed()) runner.per_seed([](const pipeline::Context& ctx) { pipeline::run_phase1(ctx); });
    if (phase2->parsed()) {
      std::vector<AdapterKind> kinds{runner.config().phase2.adapter};
      if (!options.adapters.empty()) kinds = runner.config().eval.adapters;
      runner.per_seed([&](const pipeline::Context& ctx) {
        for (auto kind : kinds) pipeline::run_phase2(ctx, kind);
      });
    }
    if (evaluate->parsed()) runner.evaluate_all(false);
    if (ablate->parsed()) {
      runner.per_seed([&](const pipeline::Context& ctx) {
        if (options.sweep != "modes") {
          for (const auto& r : pipeline::ablate_queries(ctx)) {
            std::cout << fmt::format("{:<8} N={:<3} {:<12} {:.4f}\n", r.adapter, r.queries,
                                     r.k ? fmt::format("{}@{}", r.metric, *r.k) : r.metric, r.value);
          }
        }
        if (options.sweep != "queries") {
          for (const auto& r : pipeline::ablate_modes(ctx)) {
            std::cout << fmt::format("{:<9} train itg {:.4f}  eval itg {:.4f}\n", r.mode, r.final_train_itg,
                                     r.final_eval_itg);
          }
        }
      });
    }
    if (all->parsed()) {
      runner.per_seed([](const pipeline::Context& ctx) {
        pipeline::run_data(ctx);
        pipeline::run_mf(ctx);
        pipeline::run_backbone(ctx);
        pipeline::run_phase1(ctx);
      });
      runner.evaluate_all(true);
    }
  } catch (const Error& e) {
    spdlog::error("{}", e.what());
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    spdlog::error("internal error: {}", e.what());
    return 1;
  }
  return 0;
}
