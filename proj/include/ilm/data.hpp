#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ilm/als.hpp"
#include "ilm/rng.hpp"

namespace ilm::data {

struct ItemMeta {
  std::string title;
  std::vector<std::string> tags;

  bool has_text() const { return !title.empty() || !tags.empty(); }
  // "title | tag1, tag2"; empty when the item has no metadata.
  std::string text() const;
};

struct Catalog {
  std::vector<ItemMeta> items;
  std::size_t num_users = 0;
  // Dense index -> raw id from the source (strings so any source fits).
  std::vector<std::string> item_raw_ids;
  std::vector<std::string> user_raw_ids;
  // Latent cluster per item; filled by the synthetic generator only.
  std::vector<std::uint32_t> item_cluster;

  std::size_t num_items() const { return items.size(); }
};

struct UserSequence {
  std::uint32_t user = 0;
  std::vector<std::uint32_t> items;  // chronological
  std::vector<double> weights;       // per interaction confidence weight, same length as items
};

struct Dataset {
  Catalog catalog;
  std::vector<UserSequence> sequences;
};

// ---- MovieLens ------------------------------------------------------------------

struct RatingRecord {
  std::int64_t user = 0;
  std::int64_t item = 0;
  double rating = 0.0;
  std::int64_t timestamp = 0;

  bool operator==(const RatingRecord&) const = default;
};

RatingRecord parse_rating_line(std::string_view line, std::size_t line_no);

// Ratings "user::item::rating::ts", movies "item::title::Genre|Genre".
// Interaction weights are the rating values.
Dataset parse_movielens(const std::filesystem::path& ratings_path, const std::filesystem::path& movies_path);

// ---- synthetic generator -------------------------------------------------------------

struct SynthConfig {
  std::size_t num_users = 200;
  std::size_t num_items = 50;
  std::size_t num_clusters = 4;
  std::size_t min_length = 5;
  std::size_t max_length = 20;
  double within_cluster = 0.9;
  double text_sparsity = 0.5;
  std::size_t tags_per_item = 2;
};

// Users walk between latent clusters (stay with probability within_cluster,
// otherwise jump to another cluster by the user's preference) and pick unseen
// items by in-cluster popularity.
Dataset synth_generate(const SynthConfig& config, std::uint64_t seed);

// ---- splits -----------------------------------------------------------------------------

struct EvalExample {
  std::uint32_t user = 0;
  std::vector<std::uint32_t> history;
  std::uint32_t target = 0;
};

struct Split {
  std::vector<UserSequence> train;  // all but the last two items of eligible users
  std::vector<EvalExample> dev;
  std::vector<EvalExample> test;
  std::vector<std::uint32_t> excluded_users;  // sequences shorter than 3
};

Split split_leave_last(const std::vector<UserSequence>& sequences);

// Train interactions of split users plus every interaction of excluded users.
std::vector<Interaction> mf_interactions(const Split& split, const std::vector<UserSequence>& sequences);

// ---- pairs ---------------------------------------------------------------------------------

enum class PairKind { kItemText, kItemItem, kUserItem };

std::string_view pair_kind_name(PairKind kind);

struct PairExample {
  PairKind kind = PairKind::kItemText;
  std::uint32_t left = 0;   // item, or user for user-item
  std::uint32_t right = 0;  // item (unused for item-text)
  std::string text;         // item-text only

  bool operator==(const PairExample&) const = default;
};

std::vector<PairExample> build_item_text_pairs(const Catalog& catalog);
std::vector<PairExample> build_item_item_pairs(const std::vector<UserSequence>& train);
std::vector<PairExample> build_user_item_pairs(const std::vector<UserSequence>& train);

// ---- vocabulary and tokenizer ---------------------------------------------------------------

namespace tok {
constexpr int kPad = 0;
constexpr int kBos = 1;
constexpr int kEos = 2;
constexpr int kCls = 3;
constexpr int kItemSlot = 4;
constexpr int kUserSlot = 5;
constexpr int kUnk = 6;
constexpr int kNumSpecial = 7;
}  // namespace tok

// Lowercased word tokens; letters, digits, '_' and '\'' form words, any other
// non-space character is its own token.
std::vector<std::string> tokenize_words(std::string_view text);

class Vocabulary {
 public:
  Vocabulary() = default;
  // Specials, then sorted words, then item_0.., then user_0..
  Vocabulary(std::vector<std::string> words, std::size_t num_items, std::size_t num_users);

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(int id) const;
  std::optional<int> find(const std::string& token) const;
  int id(const std::string& token) const;  // throws VocabularyError
  int item_token(std::uint32_t item) const;
  int user_token(std::uint32_t user) const;
  std::optional<std::uint32_t> item_of(int id) const;
  std::size_t num_items() const { return num_items_; }
  std::size_t num_users() const { return num_users_; }

  // Unknown words map to UNK.
  std::vector<int> encode(std::string_view text) const;
  std::string decode(std::span<const int> ids) const;

  std::string serialize() const;  // one token per line, line number = id
  static Vocabulary deserialize(const std::string& text, std::size_t num_items, std::size_t num_users);

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int> index_;
  int first_item_ = 0;
  int first_user_ = 0;
  std::size_t num_items_ = 0;
  std::size_t num_users_ = 0;
};

// ---- prompts ----------------------------------------------------------------------------------

enum class Task { kSequential, kStraightforward };

std::string_view task_name(Task task);
Task parse_task(std::string_view name);

struct Template {
  Task task;
  std::string text;
};

constexpr std::size_t kTrainTemplates = 10;

// 10 training templates followed by 1 held-out template.
const std::vector<Template>& builtin_templates(Task task);

Vocabulary build_vocabulary(const Catalog& catalog);

enum class EntityKind : std::uint8_t { kNone, kItem, kUser };

struct SequenceExample {
  Task task = Task::kSequential;
  std::size_t template_index = 0;
  std::uint32_t user = 0;
  std::vector<int> prompt;
  // Entity carried by each prompt position (placeholder slots only).
  std::vector<EntityKind> slot_kind;
  std::vector<std::uint32_t> slot_id;
  std::vector<int> target;  // item token then EOS

  std::size_t num_slots() const;
  std::uint32_t target_item(const Vocabulary& vocab) const;
};

// The prompt with placeholder slots removed (text-only path).
std::vector<int> strip_placeholders(const SequenceExample& example);

struct PromptOptions {
  std::size_t history_limit = 10;
};

// Renders one example; the history is truncated to the most recent items.
SequenceExample render_example(const Template& tmpl, std::size_t template_index, const Vocabulary& vocab,
                               std::uint32_t user, std::span<const std::uint32_t> history, std::uint32_t target,
                               const PromptOptions& options);

// Train prompts: every train position k >= 1 of every user for both tasks,
// template drawn uniformly from the training templates.
std::vector<SequenceExample> render_train_prompts(const std::vector<UserSequence>& train, const Vocabulary& vocab,
                                                  const PromptOptions& options, Rng& rng);

enum class Regime { kSeen, kUnseen };
std::string_view regime_name(Regime regime);

// Eval prompts for one task: seen draws one of the training templates per
// example, unseen always uses the held-out template.
std::vector<SequenceExample> render_eval_prompts(const std::vector<EvalExample>& split, Task task, Regime regime,
                                                 const Vocabulary& vocab, const PromptOptions& options, Rng& rng);

// ---- artifacts ------------------------------------------------------------------------------------

void write_dataset(const std::filesystem::path& dir, const Dataset& dataset);
Dataset read_dataset(const std::filesystem::path& dir);

std::string pairs_to_jsonl(const std::vector<PairExample>& pairs, const Vocabulary* vocab);
std::vector<PairExample> pairs_from_jsonl(const std::string& text);
std::string examples_to_jsonl(const std::vector<SequenceExample>& examples);
std::vector<SequenceExample> examples_from_jsonl(const std::string& text);

struct DatasetStats {
  std::size_t users = 0;
  std::size_t items = 0;
  std::size_t item_text = 0;
  std::size_t item_item = 0;
  std::size_t user_item = 0;
  std::size_t train = 0;  // train interactions
  std::size_t dev = 0;
  std::size_t test = 0;
};

std::string stats_to_jsonl(const DatasetStats& stats);

}  // namespace ilm::data
