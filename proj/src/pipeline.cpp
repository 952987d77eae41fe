#include "ilm/pipeline.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstring>
#include <map>

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "ilm/checkpoint.hpp"
#include "ilm/error.hpp"

namespace ilm::pipeline {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using data::Regime;
using data::Task;

namespace {

const std::vector<std::string> kDataSections{"data"};
const std::vector<std::string> kMfSections{"data", "mf"};
const std::vector<std::string> kBackboneSections{"data", "backbone"};
const std::vector<std::string> kPhase1Sections{"data", "mf", "qformer"};
const std::vector<std::string> kPhase2Sections{"data", "mf", "qformer", "backbone", "phase2"};

constexpr Task kTasks[] = {Task::kSequential, Task::kStraightforward};
constexpr Regime kRegimes[] = {Regime::kSeen, Regime::kUnseen};

std::string hash_of(const Context& ctx, const std::vector<std::string>& sections) {
  return config_hash(ctx.config, sections);
}

std::string prompt_set_name(std::string_view split, Task task, Regime regime) {
  return fmt::format("{}_{}_{}", split, data::task_name(task), data::regime_name(regime));
}

void begin_stage(const fs::path& dir) {
  fs::create_directories(dir);
  fs::remove(dir / "manifest.json");
}

void write_manifest(const fs::path& dir, const std::string& stage, const std::string& hash, std::uint64_t seed,
                    const std::vector<std::string>& files) {
  json j;
  j["stage"] = stage;
  j["config_sha256"] = hash;
  j["seed"] = seed;
  json outputs = json::object();
  for (const auto& f : files) outputs[f] = sha256_file(dir / f);
  j["outputs"] = outputs;
  write_file_atomic(dir / "manifest.json", j.dump(2) + "\n");
}

void require_stage(const Context& ctx, const fs::path& dir, const std::string& stage, const std::string& command,
                   const std::string& expected) {
  const auto path = dir / "manifest.json";
  if (!fs::exists(path)) {
    throw DependencyError(
        fmt::format("stage '{}' has no output in {} (run `ilm {}` first)", stage, dir.string(), command));
  }
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw StorageError(fmt::format("unreadable manifest {}: {}", path.string(), e.what()));
  }
  const auto found = j.value("config_sha256", std::string());
  if (found != expected) {
    const auto message = fmt::format("stage '{}' in {} was produced under config hash {}, the current config hashes to {}",
                                     stage, dir.string(), found.substr(0, 12), expected.substr(0, 12));
    if (!ctx.allow_mixed) throw DependencyError(message + " (pass --allow-mixed to use it anyway)");
    spdlog::warn("{}; continuing because mixed hashes are allowed", message);
  }
  const auto outputs = j.value("outputs", json::object());
  for (const auto& [file, sum] : outputs.items()) {
    if (!fs::exists(dir / file) || sha256_file(dir / file) != sum.get<std::string>()) {
      throw StorageError(fmt::format("{} does not match the checksum in {}", (dir / file).string(), path.string()));
    }
  }
}

void stamp(Checkpoint& ckpt, const std::string& hash, std::uint64_t seed, std::size_t step, const std::string& parent) {
  ckpt.set_meta("config_sha256", hash);
  ckpt.set_meta("seed", std::to_string(seed));
  ckpt.set_meta("step", std::to_string(step));
  ckpt.set_meta("parent_sha256", parent);
}

struct DataBundle {
  data::Dataset dataset;
  data::Vocabulary vocab;
};

DataBundle load_data(const Context& ctx) {
  const auto dir = ctx.layout.data();
  require_stage(ctx, dir, "data", "gen-data", hash_of(ctx, kDataSections));
  auto ds = data::read_dataset(dir);
  auto vocab = data::Vocabulary::deserialize(read_file(dir / "vocab.txt"), ds.catalog.num_items(), ds.catalog.num_users);
  return {std::move(ds), std::move(vocab)};
}

std::vector<data::SequenceExample> load_prompts(const Context& ctx, const std::string& name, std::size_t limit = 0) {
  auto examples = data::examples_from_jsonl(read_file(ctx.layout.data() / (name + ".jsonl")));
  if (limit > 0 && examples.size() > limit) examples.resize(limit);
  return examples;
}

void require_mf(const Context& ctx) { require_stage(ctx, ctx.layout.mf(), "mf", "train-mf", hash_of(ctx, kMfSections)); }

void require_backbone(const Context& ctx) {
  require_stage(ctx, ctx.layout.backbone(), "backbone", "pretrain-backbone", hash_of(ctx, kBackboneSections));
}

QFormerConfig qformer_config(const Context& ctx, const data::Vocabulary& vocab) {
  QFormerConfig q = ctx.config.qformer.model;
  q.cf_dim = ctx.config.mf.rank;
  q.vocab_size = vocab.size();
  return q;
}

struct BuiltModel {
  std::unique_ptr<FusedModel> model;
  std::string backbone_hash;
};

BuiltModel build_model(const Context& ctx, const data::Vocabulary& vocab, AdapterKind kind, bool load_phase1,
                       Rng& rng) {
  const auto backbone_path = ctx.layout.backbone() / "backbone.ilmc";
  auto decoder = std::make_shared<const nn::Decoder>(load_backbone(read_checkpoint(backbone_path)));
  auto tables = load_cf_tables(read_checkpoint(ctx.layout.mf() / "embeddings.ilmc"));
  std::optional<QFormer> qformer;
  if (kind == AdapterKind::kQFormer || kind == AdapterKind::kQFormerRand) {
    Rng init = make_rng(ctx.seed, "qformer-init");
    qformer = QFormer::create(qformer_config(ctx, vocab), init);
    if (kind == AdapterKind::kQFormer && load_phase1) {
      nn::NamedTensors named;
      qformer->collect(named);
      load_arrays(read_checkpoint(ctx.layout.phase1() / "qformer.ilmc"), named);
    }
  }
  const AdapterConfig config{kind, ctx.config.mf.rank, decoder->config().model_dim,
                             ctx.config.qformer.model.num_queries};
  auto adapter = build_adapter(config, qformer ? &*qformer : nullptr, rng);
  return {std::make_unique<FusedModel>(decoder, std::move(adapter), std::move(tables)), sha256_file(backbone_path)};
}

std::vector<eval::EvalSet> load_eval_sets(const Context& ctx, std::string_view split, const std::vector<Task>& tasks,
                                          const std::vector<Regime>& regimes, std::size_t limit) {
  std::vector<eval::EvalSet> sets;
  for (auto task : tasks)
    for (auto regime : regimes) sets.push_back({task, regime, load_prompts(ctx, prompt_set_name(split, task, regime), limit)});
  return sets;
}

}  // namespace

Context make_context(const RunConfig& config, const fs::path& out, std::uint64_t seed) {
  Context ctx;
  ctx.config = config;
  ctx.seed = seed;
  ctx.layout.root = out / fmt::format("seed_{}", seed);
  ctx.layout.run = ctx.layout.root;
  return ctx;
}

Context with_run_dir(Context ctx, const fs::path& run) {
  ctx.layout.run = run;
  return ctx;
}

StageLock::StageLock(const fs::path& dir) : path_(dir / ".lock") {
  fs::create_directories(dir);
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    if (errno == EEXIST) {
      throw StorageError(fmt::format("{} exists: another stage is writing this run (delete it if that run died)",
                                     path_.string()));
    }
    throw StorageError(fmt::format("cannot create {}: {}", path_.string(), std::strerror(errno)));
  }
  const auto pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] const auto written = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

StageLock::~StageLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

// ---- stages -----------------------------------------------------------------------------------

void run_data(const Context& ctx) {
  const auto& c = ctx.config;
  const auto dir = ctx.layout.data();
  begin_stage(dir);
  const data::Dataset ds = c.data.source == "movielens"
                               ? data::parse_movielens(c.data.ratings, c.data.movies)
                               : data::synth_generate(c.data.synth, derive_seed(ctx.seed, "synth"));
  data::write_dataset(dir, ds);
  const auto split = data::split_leave_last(ds.sequences);
  const auto vocab = data::build_vocabulary(ds.catalog);
  write_file_atomic(dir / "vocab.txt", vocab.serialize());

  const auto item_text = data::build_item_text_pairs(ds.catalog);
  const auto item_item = data::build_item_item_pairs(split.train);
  const auto user_item = data::build_user_item_pairs(split.train);
  write_file_atomic(dir / "item_text.jsonl", data::pairs_to_jsonl(item_text, &vocab));
  write_file_atomic(dir / "item_item.jsonl", data::pairs_to_jsonl(item_item, nullptr));
  write_file_atomic(dir / "user_item.jsonl", data::pairs_to_jsonl(user_item, nullptr));

  const data::PromptOptions options{c.data.history_limit};
  Rng rng = make_rng(ctx.seed, "data");
  const auto train = data::render_train_prompts(split.train, vocab, options, rng);
  write_file_atomic(dir / "train_prompts.jsonl", data::examples_to_jsonl(train));
  std::vector<std::string> files{"items.jsonl", "users.jsonl", "sequences.jsonl", "vocab.txt", "item_text.jsonl",
                                 "item_item.jsonl", "user_item.jsonl", "train_prompts.jsonl"};

  Rng eval_rng = make_rng(ctx.seed, "eval");
  for (const auto& [name, examples] : {std::pair{"dev", &split.dev}, std::pair{"test", &split.test}}) {
    for (auto task : kTasks) {
      for (auto regime : kRegimes) {
        const auto file = prompt_set_name(name, task, regime) + ".jsonl";
        const auto prompts = data::render_eval_prompts(*examples, task, regime, vocab, options, eval_rng);
        write_file_atomic(dir / file, data::examples_to_jsonl(prompts));
        files.push_back(file);
      }
    }
  }

  data::DatasetStats stats;
  stats.users = ds.catalog.num_users;
  stats.items = ds.catalog.num_items();
  stats.item_text = item_text.size();
  stats.item_item = item_item.size();
  stats.user_item = user_item.size();
  for (const auto& seq : split.train) stats.train += seq.items.size();
  stats.dev = split.dev.size();
  stats.test = split.test.size();
  write_file_atomic(dir / "stats.jsonl", data::stats_to_jsonl(stats));
  files.push_back("stats.jsonl");
  write_manifest(dir, "data", hash_of(ctx, kDataSections), ctx.seed, files);
  spdlog::info("data: {} users, {} items, {} item-text pairs, {} train prompts", stats.users, stats.items,
               stats.item_text, train.size());
}

void run_mf(const Context& ctx) {
  const auto bundle = load_data(ctx);
  const auto dir = ctx.layout.mf();
  begin_stage(dir);
  const auto split = data::split_leave_last(bundle.dataset.sequences);
  const InteractionMatrix x(bundle.dataset.catalog.num_users, bundle.dataset.catalog.num_items(),
                            data::mf_interactions(split, bundle.dataset.sequences));
  Rng rng = make_rng(ctx.seed, "mf");
  const auto result = train_mf(x, ctx.config.mf, rng);
  const auto hash = hash_of(ctx, kMfSections);
  auto ckpt = embeddings_checkpoint(result.model);
  stamp(ckpt, hash, ctx.seed, result.objective_trace.size() - 1, sha256_file(ctx.layout.data() / "sequences.jsonl"));
  write_checkpoint(dir / "embeddings.ilmc", ckpt);
  std::string trace;
  for (std::size_t i = 0; i < result.objective_trace.size(); ++i) {
    trace += json{{"sweep", i}, {"objective", result.objective_trace[i]}}.dump() + "\n";
  }
  write_file_atomic(dir / "objective.jsonl", trace);
  write_manifest(dir, "mf", hash, ctx.seed, {"embeddings.ilmc", "objective.jsonl"});
  spdlog::info("mf: {} sweeps, objective {:.4f} -> {:.4f}", result.objective_trace.size() - 1,
               result.objective_trace.front(), result.objective_trace.back());
}

void run_backbone(const Context& ctx) {
  const auto bundle = load_data(ctx);
  const auto dir = ctx.layout.backbone();
  begin_stage(dir);
  nn::DecoderConfig config = ctx.config.backbone.model;
  config.vocab_size = bundle.vocab.size();
  Rng init = make_rng(ctx.seed, "backbone-init");
  auto decoder = nn::Decoder::create(config, init);
  Rng rng = make_rng(ctx.seed, "backbone-train");
  const auto result = pretrain(decoder, load_prompts(ctx, "train_prompts"), ctx.config.backbone.train, rng);
  const auto hash = hash_of(ctx, kBackboneSections);
  auto ckpt = backbone_checkpoint(decoder);
  stamp(ckpt, hash, ctx.seed, result.losses.size(), sha256_file(ctx.layout.data() / "train_prompts.jsonl"));
  write_checkpoint(dir / "backbone.ilmc", ckpt);
  std::string losses;
  for (std::size_t i = 0; i < result.losses.size(); ++i) losses += json{{"step", i + 1}, {"loss", result.losses[i]}}.dump() + "\n";
  write_file_atomic(dir / "losses.jsonl", losses);
  write_manifest(dir, "backbone", hash, ctx.seed, {"backbone.ilmc", "losses.jsonl"});
  if (!result.losses.empty()) {
    spdlog::info("backbone: {} steps, loss {:.4f} -> {:.4f}", result.losses.size(), result.losses.front(),
                 result.losses.back());
  }
}

Phase1Summary run_phase1(const Context& ctx) {
  const auto bundle = load_data(ctx);
  require_mf(ctx);
  const auto dir = ctx.layout.phase1();
  begin_stage(dir);
  const auto& c = ctx.config;
  const auto emb_path = ctx.layout.mf() / "embeddings.ilmc";
  const auto tables = load_cf_tables(read_checkpoint(emb_path));

  std::vector<TextPair> texts;
  for (const auto& p : data::pairs_from_jsonl(read_file(ctx.layout.data() / "item_text.jsonl"))) {
    auto tokens = bundle.vocab.encode(p.text);
    if (tokens.size() > c.qformer.model.max_text_len) tokens.resize(c.qformer.model.max_text_len);
    texts.push_back({p.left, std::move(tokens)});
  }
  Rng rng = make_rng(ctx.seed, "phase1");
  std::shuffle(texts.begin(), texts.end(), rng);
  const auto held = static_cast<std::size_t>(std::llround(c.qformer.eval_fraction * static_cast<double>(texts.size())));

  Phase1Data d;
  d.item_embeddings = tables.items;
  d.user_embeddings = tables.users;
  d.eval_texts.assign(texts.begin(), texts.begin() + static_cast<std::ptrdiff_t>(held));
  d.train_texts.assign(texts.begin() + static_cast<std::ptrdiff_t>(held), texts.end());
  for (const auto& p : data::pairs_from_jsonl(read_file(ctx.layout.data() / "item_item.jsonl")))
    d.item_item.push_back({false, p.left, p.right});
  for (const auto& p : data::pairs_from_jsonl(read_file(ctx.layout.data() / "user_item.jsonl")))
    d.user_item.push_back({true, p.left, p.right});

  Rng init = make_rng(ctx.seed, "qformer-init");
  auto model = QFormer::create(qformer_config(ctx, bundle.vocab), init);
  const auto result = phase1_train(model, d, c.qformer.train, rng);

  const auto hash = hash_of(ctx, kPhase1Sections);
  Checkpoint ckpt;
  ckpt.set_meta("kind", "qformer");
  ckpt.set_meta("mode", std::string(phase1_mode_name(c.qformer.train.mode)));
  stamp(ckpt, hash, ctx.seed, c.qformer.train.steps, sha256_file(emb_path));
  nn::NamedTensors named;
  model.collect(named);
  add_arrays(ckpt, named);
  write_checkpoint(dir / "qformer.ilmc", ckpt);

  std::string trace;
  for (const auto& r : result.trace) trace += json{{"step", r.step}, {"loss", r.name}, {"value", r.value}}.dump() + "\n";
  write_file_atomic(dir / "trace.jsonl", trace);
  const Phase1Summary summary{std::string(phase1_mode_name(c.qformer.train.mode)), result.final_train_itg,
                              result.final_eval_itg};
  json s;
  s["mode"] = summary.mode;
  s["train_pairs"] = d.train_texts.size();
  s["eval_pairs"] = d.eval_texts.size();
  s["final_train_itg"] = summary.final_train_itg;
  s["final_eval_itg"] = summary.final_eval_itg;
  write_file_atomic(dir / "summary.json", s.dump(2) + "\n");
  write_manifest(dir, "phase1", hash, ctx.seed, {"qformer.ilmc", "trace.jsonl", "summary.json"});
  spdlog::info("phase1 {}: final itg train {:.4f}, eval {:.4f}", summary.mode, summary.final_train_itg,
               summary.final_eval_itg);
  return summary;
}

Phase1Summary read_phase1_summary(const Context& ctx) {
  require_stage(ctx, ctx.layout.phase1(), "phase1", "phase1", hash_of(ctx, kPhase1Sections));
  const auto j = json::parse(read_file(ctx.layout.phase1() / "summary.json"));
  return {j.at("mode").get<std::string>(), j.at("final_train_itg").get<double>(), j.at("final_eval_itg").get<double>()};
}

Phase2Summary run_phase2(const Context& ctx, AdapterKind kind) {
  const auto bundle = load_data(ctx);
  require_mf(ctx);
  require_backbone(ctx);
  if (kind == AdapterKind::kQFormer) {
    require_stage(ctx, ctx.layout.phase1(), "phase1", "phase1", hash_of(ctx, kPhase1Sections));
  }
  const auto dir = ctx.layout.phase2(kind);
  begin_stage(dir);
  Rng rng = make_rng(ctx.seed, "phase2");
  auto built = build_model(ctx, bundle.vocab, kind, true, rng);

  const auto dev_sets = load_eval_sets(ctx, "dev", {std::begin(kTasks), std::end(kTasks)}, {Regime::kSeen},
                                       ctx.config.phase2.dev_examples);
  eval::EvalOptions dev_options;
  dev_options.ks = {10};
  const auto dev_score = [&](const FusedModel& m) {
    return eval::mean_metric(eval::evaluate_run(m, dev_sets, bundle.vocab, dev_options), "ndcg", 10);
  };
  const auto backbone_checksum = [&] {
    nn::NamedTensors named;
    built.model->backbone().collect(named, "backbone");
    return parameter_checksum(named);
  };
  const auto before = backbone_checksum();
  const auto result = phase2_train(*built.model, load_prompts(ctx, "train_prompts"), ctx.config.phase2.train, rng,
                                   dev_score);
  const auto after = backbone_checksum();
  if (after != before) throw NumericalError("phase2 " + std::string(adapter_name(kind)) + " modified the backbone");

  const auto hash = hash_of(ctx, kPhase2Sections);
  std::vector<std::string> files{"losses.jsonl", "dev.jsonl", "summary.json"};
  if (built.model->adapter() != nullptr) {
    auto ckpt = adapter_checkpoint(*built.model, built.backbone_hash);
    ckpt.set_meta("adapter", std::string(adapter_name(kind)));
    const auto parent = kind == AdapterKind::kQFormer ? ctx.layout.phase1() / "qformer.ilmc"
                                                      : ctx.layout.mf() / "embeddings.ilmc";
    stamp(ckpt, hash, ctx.seed, result.best_step, sha256_file(parent));
    write_checkpoint(dir / "adapter.ilmc", ckpt);
    files.push_back("adapter.ilmc");
  }
  std::string losses, dev;
  for (std::size_t i = 0; i < result.losses.size(); ++i) losses += json{{"step", i + 1}, {"loss", result.losses[i]}}.dump() + "\n";
  for (const auto& [step, score] : result.dev_scores) dev += json{{"step", step}, {"ndcg@10", score}}.dump() + "\n";
  write_file_atomic(dir / "losses.jsonl", losses);
  write_file_atomic(dir / "dev.jsonl", dev);
  write_file_atomic(dir / "summary.json", json{{"best_step", result.best_step},
                                               {"best_dev_ndcg@10", result.best_dev},
                                               {"backbone_checksum_before", before},
                                               {"backbone_checksum_after", after}}
                                              .dump(2) + "\n");
  write_manifest(dir, "phase2", hash, ctx.seed, files);
  spdlog::info("phase2 {}: {} steps, best dev NDCG@10 {:.4f} at step {}", adapter_name(kind), result.losses.size(),
               result.best_dev, result.best_step);
  return {result.best_step, result.best_dev, result.losses.size(), before, after};
}

std::unique_ptr<FusedModel> load_trained_model(const Context& ctx, AdapterKind kind) {
  const auto bundle = load_data(ctx);
  require_mf(ctx);
  require_backbone(ctx);
  const auto name = std::string(adapter_name(kind));
  require_stage(ctx, ctx.layout.phase2(kind), "phase2 (adapter=" + name + ")", "phase2 --adapter " + name,
                hash_of(ctx, kPhase2Sections));
  Rng rng = make_rng(ctx.seed, "phase2");
  auto built = build_model(ctx, bundle.vocab, kind, false, rng);
  if (kind != AdapterKind::kNone) {
    load_adapter(read_checkpoint(ctx.layout.phase2(kind) / "adapter.ilmc"), *built.model, built.backbone_hash);
  }
  return std::move(built.model);
}

eval::EvalReport run_evaluate(const Context& ctx, AdapterKind kind) {
  const auto bundle = load_data(ctx);
  const auto model = load_trained_model(ctx, kind);
  const auto hash = hash_of(ctx, kPhase2Sections);
  const auto dir = ctx.layout.eval(kind);
  begin_stage(dir);
  const auto& e = ctx.config.eval;
  const auto sets = load_eval_sets(ctx, "test", e.tasks, {std::begin(kRegimes), std::end(kRegimes)}, e.max_examples);
  eval::EvalOptions options;
  options.ks = e.ks;
  options.beam_size = e.beam_size;
  options.max_new = e.max_new;
  const auto report = eval::evaluate_run(*model, sets, bundle.vocab, options);
  write_file_atomic(dir / "report.jsonl", eval::report_to_jsonl(report));
  write_manifest(dir, "eval", hash, ctx.seed, {"report.jsonl"});
  return report;
}

// ---- ablations --------------------------------------------------------------------------------

std::vector<QueryRow> ablate_queries(const Context& ctx) {
  std::vector<QueryRow> rows;
  for (auto n : ctx.config.ablate.queries) {
    Context sub = with_run_dir(ctx, ctx.layout.root / "ablate" / fmt::format("queries_{}", n));
    sub.config.qformer.model.num_queries = n;
    run_phase1(sub);
    for (auto kind : {AdapterKind::kQFormer, AdapterKind::kMlp}) {
      run_phase2(sub, kind);
      const auto report = run_evaluate(sub, kind);
      std::vector<std::pair<std::string, std::optional<std::size_t>>> keys;
      std::map<std::pair<std::string, std::optional<std::size_t>>, std::pair<double, std::size_t>> sums;
      for (const auto& r : report.rows) {
        const auto key = std::pair{r.metric, r.k};
        if (!sums.contains(key)) keys.push_back(key);
        sums[key].first += r.value;
        sums[key].second += 1;
      }
      for (const auto& key : keys) {
        const auto& [total, count] = sums[key];
        rows.push_back({std::string(adapter_name(kind)), n, key.first, key.second, total / static_cast<double>(count)});
      }
    }
  }
  std::string out;
  for (const auto& r : rows) {
    out += json{{"adapter", r.adapter}, {"queries", r.queries}, {"metric", r.metric},
                {"k", r.k ? json(*r.k) : json(nullptr)}, {"value", r.value}}
               .dump() +
           "\n";
  }
  write_file_atomic(ctx.layout.root / "ablate" / "queries.jsonl", out);
  return rows;
}

std::vector<ModeRow> ablate_modes(const Context& ctx) {
  std::vector<ModeRow> rows;
  for (auto mode : ctx.config.ablate.modes) {
    Context sub = with_run_dir(ctx, ctx.layout.root / "ablate" / fmt::format("mode_{}", phase1_mode_name(mode)));
    sub.config.qformer.train.mode = mode;
    const auto s = run_phase1(sub);
    rows.push_back({s.mode, s.final_train_itg, s.final_eval_itg});
  }
  std::string out;
  for (const auto& r : rows) {
    out += json{{"mode", r.mode}, {"final_train_itg", r.final_train_itg}, {"final_eval_itg", r.final_eval_itg}}.dump() +
           "\n";
  }
  fs::create_directories(ctx.layout.root / "ablate");
  write_file_atomic(ctx.layout.root / "ablate" / "modes.jsonl", out);
  return rows;
}

}  // namespace ilm::pipeline
