#include "ilm/config.hpp"

#include <charconv>
#include <cmath>
#include <functional>
#include <map>

#include <fmt/format.h>
#include <yaml-cpp/yaml.h>

#include "ilm/checkpoint.hpp"
#include "ilm/error.hpp"

namespace ilm {

namespace {

[[noreturn]] void bad(const std::string& key, const std::string& what) { throw ConfigError(key + ": " + what); }

const std::string& scalar(const YAML::Node& n, const std::string& key) {
  if (!n.IsScalar()) bad(key, "expected a single value");
  return n.Scalar();
}

template <class T>
struct Codec;

template <>
struct Codec<std::size_t> {
  static std::string type() { return "integer"; }
  static std::size_t decode(const YAML::Node& n, const std::string& key) {
    const auto& s = scalar(n, key);
    std::size_t v = 0;
    const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || end != s.data() + s.size()) bad(key, "expected a non-negative integer, got '" + s + "'");
    return v;
  }
  static std::string encode(std::size_t v) { return std::to_string(v); }
};

template <>
struct Codec<double> {
  static std::string type() { return "number"; }
  static double decode(const YAML::Node& n, const std::string& key) {
    const auto& s = scalar(n, key);
    double v = 0.0;
    const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || end != s.data() + s.size() || !std::isfinite(v)) {
      bad(key, "expected a finite number, got '" + s + "'");
    }
    return v;
  }
  static std::string encode(double v) { return fmt::format("{}", v); }
};

template <>
struct Codec<std::string> {
  static std::string type() { return "string"; }
  static std::string decode(const YAML::Node& n, const std::string& key) { return scalar(n, key); }
  static std::string encode(const std::string& v) { return v; }
};

template <>
struct Codec<AdapterKind> {
  static std::string type() { return "none|mlp|qformer-rand|qformer"; }
  static AdapterKind decode(const YAML::Node& n, const std::string& key) {
    try {
      return parse_adapter(scalar(n, key));
    } catch (const ConfigError& e) {
      bad(key, e.what());
    }
  }
  static std::string encode(AdapterKind v) { return std::string(adapter_name(v)); }
};

template <>
struct Codec<Phase1Mode> {
  static std::string type() { return "IT|IT-II|IT-UI|IT-II-UI"; }
  static Phase1Mode decode(const YAML::Node& n, const std::string& key) {
    try {
      return parse_phase1_mode(scalar(n, key));
    } catch (const UsageError& e) {
      bad(key, e.what());
    }
  }
  static std::string encode(Phase1Mode v) { return std::string(phase1_mode_name(v)); }
};

template <>
struct Codec<data::Task> {
  static std::string type() { return "sequential|straightforward"; }
  static data::Task decode(const YAML::Node& n, const std::string& key) {
    const auto& s = scalar(n, key);
    if (s == "sequential") return data::Task::kSequential;
    if (s == "straightforward") return data::Task::kStraightforward;
    bad(key, "unknown task '" + s + "'");
  }
  static std::string encode(data::Task v) { return std::string(data::task_name(v)); }
};

template <class T>
struct Codec<std::vector<T>> {
  static std::string type() { return "list of " + Codec<T>::type(); }
  static std::vector<T> decode(const YAML::Node& n, const std::string& key) {
    if (!n.IsSequence()) bad(key, "expected a list");
    std::vector<T> out;
    for (const auto& e : n) out.push_back(Codec<T>::decode(e, key));
    return out;
  }
  static std::string encode(const std::vector<T>& v) {
    std::string out = "[";
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ", " : "") + Codec<T>::encode(v[i]);
    return out + "]";
  }
};

struct Field {
  std::string key;
  std::string type;
  std::string help;
  std::function<void(RunConfig&, const YAML::Node&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class Access>
Field field(std::string key, std::string help, Access access) {
  using T = std::remove_cvref_t<decltype(access(std::declval<RunConfig&>()))>;
  return {key, Codec<T>::type(), std::move(help),
          [access, key](RunConfig& c, const YAML::Node& n) { access(c) = Codec<T>::decode(n, key); },
          [access](const RunConfig& c) { return Codec<T>::encode(access(const_cast<RunConfig&>(c))); }};
}

#define ILM_FIELD(key, help, member) field(key, help, [](RunConfig& c) -> auto& { return c.member; })

const std::vector<Field>& fields() {
  static const std::vector<Field> table{
      ILM_FIELD("data.source", "synthetic or movielens", data.source),
      ILM_FIELD("data.ratings", "ratings.dat path (movielens)", data.ratings),
      ILM_FIELD("data.movies", "movies.dat path (movielens)", data.movies),
      ILM_FIELD("data.history_limit", "most recent history items kept in prompts", data.history_limit),
      ILM_FIELD("data.synth.users", "synthetic user count", data.synth.num_users),
      ILM_FIELD("data.synth.items", "synthetic item count", data.synth.num_items),
      ILM_FIELD("data.synth.clusters", "latent item clusters", data.synth.num_clusters),
      ILM_FIELD("data.synth.min_length", "shortest user sequence", data.synth.min_length),
      ILM_FIELD("data.synth.max_length", "longest user sequence", data.synth.max_length),
      ILM_FIELD("data.synth.within_cluster", "probability of staying in the current cluster", data.synth.within_cluster),
      ILM_FIELD("data.synth.text_sparsity", "fraction of items without text", data.synth.text_sparsity),
      ILM_FIELD("data.synth.tags_per_item", "tags drawn per item", data.synth.tags_per_item),
      ILM_FIELD("mf.rank", "CF embedding width", mf.rank),
      ILM_FIELD("mf.alpha", "confidence scale", mf.alpha),
      ILM_FIELD("mf.lambda", "L2 regularization", mf.lambda),
      ILM_FIELD("mf.sweeps", "maximum ALS sweeps", mf.max_sweeps),
      ILM_FIELD("mf.tolerance", "relative objective change that stops early", mf.tolerance),
      ILM_FIELD("mf.init_stddev", "factor initialization scale", mf.init_stddev),
      ILM_FIELD("qformer.model_dim", "Q-Former width", qformer.model.model_dim),
      ILM_FIELD("qformer.queries", "query tokens N (also the MLP output count)", qformer.model.num_queries),
      ILM_FIELD("qformer.layers", "transformer layers per tower", qformer.model.layers),
      ILM_FIELD("qformer.heads", "attention heads", qformer.model.heads),
      ILM_FIELD("qformer.max_text_len", "item text tokens kept", qformer.model.max_text_len),
      ILM_FIELD("qformer.tau_init", "initial contrastive temperature", qformer.model.tau_init),
      ILM_FIELD("qformer.mode", "phase-1 pair data", qformer.train.mode),
      ILM_FIELD("qformer.steps", "phase-1 optimizer steps", qformer.train.steps),
      ILM_FIELD("qformer.batch_size", "phase-1 batch size", qformer.train.batch_size),
      ILM_FIELD("qformer.learning_rate", "phase-1 peak learning rate", qformer.train.learning_rate),
      ILM_FIELD("qformer.clip_norm", "phase-1 gradient clipping norm", qformer.train.clip_norm),
      ILM_FIELD("qformer.eval_fraction", "item-text pairs held out for the eval itg loss", qformer.eval_fraction),
      ILM_FIELD("backbone.model_dim", "decoder width", backbone.model.model_dim),
      ILM_FIELD("backbone.layers", "decoder layers", backbone.model.layers),
      ILM_FIELD("backbone.heads", "attention heads", backbone.model.heads),
      ILM_FIELD("backbone.max_len", "decoder context length", backbone.model.max_len),
      ILM_FIELD("backbone.steps", "pretraining steps", backbone.train.steps),
      ILM_FIELD("backbone.batch_size", "pretraining batch size", backbone.train.batch_size),
      ILM_FIELD("backbone.learning_rate", "pretraining peak learning rate", backbone.train.learning_rate),
      ILM_FIELD("backbone.clip_norm", "pretraining gradient clipping norm", backbone.train.clip_norm),
      ILM_FIELD("phase2.adapter", "adapter trained by the phase2 command", phase2.adapter),
      ILM_FIELD("phase2.steps", "phase-2 optimizer steps", phase2.train.steps),
      ILM_FIELD("phase2.batch_size", "phase-2 batch size", phase2.train.batch_size),
      ILM_FIELD("phase2.learning_rate", "phase-2 peak learning rate", phase2.train.learning_rate),
      ILM_FIELD("phase2.clip_norm", "phase-2 gradient clipping norm", phase2.train.clip_norm),
      ILM_FIELD("phase2.eval_every", "steps between dev NDCG@10 checks, 0 = final step only", phase2.train.eval_every),
      ILM_FIELD("phase2.dev_examples", "dev prompts used for selection, 0 = all", phase2.dev_examples),
      ILM_FIELD("eval.ks", "cutoffs for HR and NDCG", eval.ks),
      ILM_FIELD("eval.beam_size", "beam width and ranked list length", eval.beam_size),
      ILM_FIELD("eval.max_new", "generated tokens per output", eval.max_new),
      ILM_FIELD("eval.seeds", "run seeds", eval.seeds),
      ILM_FIELD("eval.adapters", "adapters compared by evaluate", eval.adapters),
      ILM_FIELD("eval.tasks", "prompt tasks evaluated", eval.tasks),
      ILM_FIELD("eval.max_examples", "test prompts per task and regime, 0 = all", eval.max_examples),
      ILM_FIELD("ablate.queries", "query counts swept by ablate", ablate.queries),
      ILM_FIELD("ablate.modes", "phase-1 modes swept by ablate", ablate.modes),
  };
  return table;
}

#undef ILM_FIELD

void flatten(const YAML::Node& node, const std::string& prefix, std::vector<std::pair<std::string, YAML::Node>>& out) {
  if (!node.IsMap()) {
    out.emplace_back(prefix, node);
    return;
  }
  for (const auto& kv : node) {
    const auto key = kv.first.as<std::string>();
    flatten(kv.second, prefix.empty() ? key : prefix + "." + key, out);
  }
}

bool hashed(const std::string& key, const std::vector<std::string>& sections) {
  if (key == "phase2.adapter") return false;
  const auto section = key.substr(0, key.find('.'));
  if (section == "eval" || section == "ablate") return false;
  return std::find(sections.begin(), sections.end(), section) != sections.end();
}

void require(bool ok, const std::string& key, const std::string& what) {
  if (!ok) bad(key, what);
}

}  // namespace

RunConfig parse_config(const std::string& yaml_text) {
  YAML::Node root;
  try {
    root = YAML::Load(yaml_text);
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("malformed YAML: ") + e.what());
  }
  RunConfig config;
  if (root.IsNull()) return config;
  if (!root.IsMap()) throw ConfigError("config must be a mapping of sections");
  std::vector<std::pair<std::string, YAML::Node>> entries;
  flatten(root, "", entries);
  std::map<std::string, const Field*> index;
  for (const auto& f : fields()) index[f.key] = &f;
  for (const auto& [key, node] : entries) {
    const auto it = index.find(key);
    if (it == index.end()) throw ConfigError("unknown key '" + key + "' (run `ilm schema` for the list)");
    it->second->set(config, node);
  }
  validate(config);
  return config;
}

RunConfig load_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file " + path.string() + " does not exist");
  return parse_config(read_file(path));
}

void validate(const RunConfig& c) {
  require(c.data.source == "synthetic" || c.data.source == "movielens", "data.source",
          "must be synthetic or movielens");
  if (c.data.source == "movielens") {
    for (const auto& [key, path] : {std::pair{"data.ratings", c.data.ratings}, std::pair{"data.movies", c.data.movies}}) {
      require(!path.empty() && std::filesystem::exists(path), key, "file '" + path + "' does not exist");
    }
  }
  const auto& s = c.data.synth;
  require(s.num_users > 0, "data.synth.users", "must be positive");
  require(s.num_items > 0, "data.synth.items", "must be positive");
  require(s.num_clusters > 0 && s.num_clusters <= s.num_items, "data.synth.clusters", "must be in [1, items]");
  require(s.min_length >= 1 && s.min_length <= s.max_length, "data.synth.min_length", "must be in [1, max_length]");
  require(s.within_cluster >= 0.0 && s.within_cluster <= 1.0, "data.synth.within_cluster", "must be in [0, 1]");
  require(s.text_sparsity >= 0.0 && s.text_sparsity <= 1.0, "data.synth.text_sparsity", "must be in [0, 1]");
  require(c.data.history_limit >= 1, "data.history_limit", "must be positive");

  require(c.mf.rank > 0, "mf.rank", "must be positive");
  require(c.mf.alpha >= 0.0, "mf.alpha", "must be non-negative");
  require(c.mf.lambda > 0.0, "mf.lambda", "must be positive");
  require(c.mf.max_sweeps > 0, "mf.sweeps", "must be positive");

  const auto& q = c.qformer.model;
  require(q.model_dim > 0 && q.heads > 0 && q.model_dim % q.heads == 0, "qformer.heads", "must divide qformer.model_dim");
  require(q.num_queries >= 1, "qformer.queries", "must be positive");
  require(q.layers >= 1, "qformer.layers", "must be positive");
  require(q.max_text_len >= 1, "qformer.max_text_len", "must be positive");
  require(q.tau_init >= kTauMin && q.tau_init <= kTauMax, "qformer.tau_init", "must lie in [1e-3, 10]");
  require(c.qformer.train.batch_size >= 2, "qformer.batch_size", "contrastive losses need at least 2");
  require(c.qformer.train.learning_rate > 0.0, "qformer.learning_rate", "must be positive");
  require(c.qformer.eval_fraction >= 0.0 && c.qformer.eval_fraction < 1.0, "qformer.eval_fraction",
          "must be in [0, 1)");

  const auto& b = c.backbone.model;
  require(b.model_dim > 0 && b.heads > 0 && b.model_dim % b.heads == 0, "backbone.heads",
          "must divide backbone.model_dim");
  require(b.layers >= 1, "backbone.layers", "must be positive");
  require(b.max_len >= 8, "backbone.max_len", "must be at least 8");
  require(c.backbone.train.batch_size >= 1, "backbone.batch_size", "must be positive");
  require(c.backbone.train.learning_rate > 0.0, "backbone.learning_rate", "must be positive");

  require(c.phase2.train.batch_size >= 1, "phase2.batch_size", "must be positive");
  require(c.phase2.train.learning_rate > 0.0, "phase2.learning_rate", "must be positive");

  require(!c.eval.ks.empty(), "eval.ks", "must not be empty");
  for (auto k : c.eval.ks) require(k >= 1, "eval.ks", "cutoffs must be positive");
  require(c.eval.beam_size >= 1, "eval.beam_size", "must be positive");
  require(c.eval.max_new >= 1, "eval.max_new", "must be positive");
  require(!c.eval.seeds.empty(), "eval.seeds", "must not be empty");
  require(!c.eval.adapters.empty(), "eval.adapters", "must not be empty");
  require(!c.eval.tasks.empty(), "eval.tasks", "must not be empty");
  for (auto n : c.ablate.queries) require(n >= 1, "ablate.queries", "query counts must be positive");
}

std::string canonical_config(const RunConfig& config, const std::vector<std::string>& sections) {
  std::string out;
  for (const auto& f : fields())
    if (hashed(f.key, sections)) out += f.key + ": " + f.get(config) + "\n";
  return out;
}

std::string config_hash(const RunConfig& config, const std::vector<std::string>& sections) {
  return sha256_hex(canonical_config(config, sections));
}

std::string config_schema() {
  const RunConfig defaults;
  std::string out;
  for (const auto& f : fields()) {
    out += fmt::format("{:<28} {:<34} default {:<22} {}\n", f.key, f.type, f.get(defaults), f.help);
  }
  return out;
}

}  // namespace ilm
