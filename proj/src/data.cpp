#include "ilm/data.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <numeric>
#include <set>
#include <sstream>

#include "ilm/checkpoint.hpp"
#include "ilm/error.hpp"

namespace ilm::data {

using nlohmann::json;

std::string ItemMeta::text() const {
  if (!has_text()) return {};
  std::string out = title;
  if (!tags.empty()) {
    out += " | ";
    for (std::size_t i = 0; i < tags.size(); ++i) {
      if (i) out += ", ";
      out += tags[i];
    }
  }
  return out;
}

// ---- MovieLens ------------------------------------------------------------------

namespace {

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find("::", start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 2;
  }
}

template <typename T>
T parse_number(std::string_view field, std::size_t line_no, std::string_view what) {
  T value{};
  const auto* end = field.data() + field.size();
  auto [ptr, ec] = std::from_chars(field.data(), end, value);
  if (ec != std::errc() || ptr != end || field.empty()) {
    throw ParseError("line " + std::to_string(line_no) + ": bad " + std::string(what) + " '" + std::string(field) + "'");
  }
  return value;
}

std::string_view trim_cr(std::string_view line) {
  if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
  return line;
}

}  // namespace

RatingRecord parse_rating_line(std::string_view line, std::size_t line_no) {
  const auto fields = split_fields(trim_cr(line));
  if (fields.size() != 4) {
    throw ParseError("line " + std::to_string(line_no) + ": expected 4 '::'-separated fields, got " +
                     std::to_string(fields.size()));
  }
  RatingRecord r;
  r.user = parse_number<std::int64_t>(fields[0], line_no, "user id");
  r.item = parse_number<std::int64_t>(fields[1], line_no, "item id");
  r.rating = parse_number<double>(fields[2], line_no, "rating");
  r.timestamp = parse_number<std::int64_t>(fields[3], line_no, "timestamp");
  return r;
}

Dataset parse_movielens(const std::filesystem::path& ratings_path, const std::filesystem::path& movies_path) {
  std::map<std::int64_t, ItemMeta> movies;
  {
    std::ifstream in(movies_path);
    if (!in) throw StorageError("cannot open " + movies_path.string());
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const auto trimmed = trim_cr(line);
      if (trimmed.empty()) continue;
      const auto fields = split_fields(trimmed);
      if (fields.size() != 3) {
        throw ParseError(movies_path.filename().string() + " line " + std::to_string(line_no) +
                         ": expected 3 '::'-separated fields");
      }
      ItemMeta meta;
      meta.title = std::string(fields[1]);
      std::string_view genres = fields[2];
      while (!genres.empty()) {
        const auto bar = genres.find('|');
        const auto tag = genres.substr(0, bar);
        if (!tag.empty()) meta.tags.emplace_back(tag);
        if (bar == std::string_view::npos) break;
        genres.remove_prefix(bar + 1);
      }
      movies[parse_number<std::int64_t>(fields[0], line_no, "movie id")] = std::move(meta);
    }
  }

  std::vector<RatingRecord> ratings;
  {
    std::ifstream in(ratings_path);
    if (!in) throw StorageError("cannot open " + ratings_path.string());
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (trim_cr(line).empty()) continue;
      ratings.push_back(parse_rating_line(line, line_no));
      if (!movies.count(ratings.back().item)) {
        throw CatalogError("ratings line " + std::to_string(line_no) + ": unknown item " +
                           std::to_string(ratings.back().item));
      }
    }
  }
  if (ratings.empty()) throw UsageError("ratings file " + ratings_path.string() + " has no ratings");

  std::set<std::int64_t> user_ids, item_ids;
  for (const auto& r : ratings) {
    user_ids.insert(r.user);
    item_ids.insert(r.item);
  }
  Dataset ds;
  std::map<std::int64_t, std::uint32_t> user_index, item_index;
  for (auto u : user_ids) {
    user_index[u] = static_cast<std::uint32_t>(ds.catalog.user_raw_ids.size());
    ds.catalog.user_raw_ids.push_back(std::to_string(u));
  }
  for (auto i : item_ids) {
    item_index[i] = static_cast<std::uint32_t>(ds.catalog.items.size());
    ds.catalog.item_raw_ids.push_back(std::to_string(i));
    ds.catalog.items.push_back(movies[i]);
  }
  ds.catalog.num_users = user_ids.size();

  std::vector<std::vector<std::size_t>> per_user(user_ids.size());
  for (std::size_t k = 0; k < ratings.size(); ++k) per_user[user_index[ratings[k].user]].push_back(k);
  for (std::uint32_t u = 0; u < per_user.size(); ++u) {
    auto& idx = per_user[u];
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return ratings[a].timestamp < ratings[b].timestamp; });
    UserSequence seq{u, {}, {}};
    for (auto k : idx) {
      seq.items.push_back(item_index[ratings[k].item]);
      seq.weights.push_back(ratings[k].rating);
    }
    ds.sequences.push_back(std::move(seq));
  }
  return ds;
}

// ---- synthetic generator -------------------------------------------------------------

namespace {

std::string make_word(Rng& rng, std::set<std::string>& used) {
  static const char* consonants = "bcdfghklmnprstvz";
  static const char* vowels = "aeiou";
  while (true) {
    std::string w;
    const auto syllables = 2 + uniform_index(rng, 2);
    for (std::size_t s = 0; s < syllables; ++s) {
      w.push_back(consonants[uniform_index(rng, 16)]);
      w.push_back(vowels[uniform_index(rng, 5)]);
    }
    if (used.insert(w).second) return w;
  }
}

std::size_t sample_weighted(Rng& rng, const std::vector<double>& weights) {
  const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  double u = uniform01(rng) * total;
  std::size_t last = weights.size();
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (weights[i] <= 0) continue;
    last = i;
    if (u < weights[i]) return i;
    u -= weights[i];
  }
  return last;
}

}  // namespace

Dataset synth_generate(const SynthConfig& config, std::uint64_t seed) {
  if (config.num_clusters == 0 || config.num_items == 0 || config.num_users == 0) {
    throw UsageError("synthetic config needs users, items and clusters");
  }
  if (config.num_clusters > config.num_items) {
    throw UsageError("cluster count " + std::to_string(config.num_clusters) + " exceeds item count " +
                     std::to_string(config.num_items));
  }
  if (config.min_length == 0 || config.min_length > config.max_length) throw UsageError("bad sequence length range");
  if (config.text_sparsity < 0.0 || config.text_sparsity > 1.0) throw UsageError("text sparsity must be in [0,1]");
  Rng rng = make_rng(seed, "synth");
  const std::size_t C = config.num_clusters, I = config.num_items;

  Dataset ds;
  auto& cat = ds.catalog;
  cat.num_users = config.num_users;
  std::vector<std::uint32_t> perm(I);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  cat.item_cluster.assign(I, 0);
  std::vector<std::vector<std::uint32_t>> members(C);
  for (std::size_t k = 0; k < I; ++k) {
    cat.item_cluster[perm[k]] = static_cast<std::uint32_t>(k % C);
  }
  for (std::uint32_t i = 0; i < I; ++i) members[cat.item_cluster[i]].push_back(i);

  std::vector<double> popularity(I);
  for (auto& m : members) {
    std::vector<std::size_t> rank(m.size());
    std::iota(rank.begin(), rank.end(), 0);
    std::shuffle(rank.begin(), rank.end(), rng);
    for (std::size_t k = 0; k < m.size(); ++k) popularity[m[k]] = 1.0 / std::pow(static_cast<double>(rank[k] + 1), 0.8);
  }

  std::set<std::string> used;
  std::vector<std::string> generic;
  for (int k = 0; k < 24; ++k) generic.push_back(make_word(rng, used));
  std::vector<std::vector<std::string>> cluster_words(C), cluster_tags(C);
  const std::size_t tag_pool = std::max<std::size_t>(4, config.tags_per_item);
  for (std::size_t c = 0; c < C; ++c) {
    for (int k = 0; k < 6; ++k) cluster_words[c].push_back(make_word(rng, used));
    for (std::size_t k = 0; k < tag_pool; ++k) cluster_tags[c].push_back(make_word(rng, used));
  }
  cat.items.resize(I);
  for (std::uint32_t i = 0; i < I; ++i) {
    const auto c = cat.item_cluster[i];
    auto& item = cat.items[i];
    item.title = generic[uniform_index(rng, generic.size())] + " " + cluster_words[c][uniform_index(rng, 6)];
    std::vector<std::string> pool = cluster_tags[c];
    std::shuffle(pool.begin(), pool.end(), rng);
    pool.resize(config.tags_per_item);
    item.tags = pool;
    cat.item_raw_ids.push_back(std::to_string(i));
  }
  const auto empty_count = static_cast<std::size_t>(std::llround(config.text_sparsity * static_cast<double>(I)));
  std::vector<std::uint32_t> order(I);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t k = 0; k < empty_count; ++k) cat.items[order[k]] = ItemMeta{};

  std::gamma_distribution<double> gamma(0.5, 1.0);
  for (std::uint32_t u = 0; u < config.num_users; ++u) {
    cat.user_raw_ids.push_back(std::to_string(u));
    std::vector<double> pref(C);
    for (auto& p : pref) p = gamma(rng) + 1e-3;
    const auto length = std::min(I, config.min_length + uniform_index(rng, config.max_length - config.min_length + 1));
    std::vector<bool> taken(I, false);
    std::vector<std::size_t> remaining(C);
    for (std::size_t c = 0; c < C; ++c) remaining[c] = members[c].size();
    UserSequence seq{u, {}, {}};
    std::size_t cluster = sample_weighted(rng, pref);
    for (std::size_t step = 0; step < length; ++step) {
      if (step > 0 && C > 1 && uniform01(rng) >= config.within_cluster) {
        std::vector<double> w = pref;
        w[cluster] = 0.0;
        cluster = sample_weighted(rng, w);
      }
      if (remaining[cluster] == 0) {
        std::vector<double> w(C);
        for (std::size_t c = 0; c < C; ++c) w[c] = remaining[c] ? pref[c] : 0.0;
        cluster = sample_weighted(rng, w);
      }
      std::vector<double> w;
      for (auto i : members[cluster]) w.push_back(taken[i] ? 0.0 : popularity[i]);
      const auto item = members[cluster][sample_weighted(rng, w)];
      taken[item] = true;
      --remaining[cluster];
      seq.items.push_back(item);
      seq.weights.push_back(1.0);
    }
    ds.sequences.push_back(std::move(seq));
  }
  return ds;
}

// ---- splits -----------------------------------------------------------------------------

Split split_leave_last(const std::vector<UserSequence>& sequences) {
  Split split;
  for (const auto& seq : sequences) {
    const auto n = seq.items.size();
    if (n < 3) {
      spdlog::warn("user {} has {} interactions, excluded from the split", seq.user, n);
      split.excluded_users.push_back(seq.user);
      continue;
    }
    UserSequence train{seq.user, {seq.items.begin(), seq.items.end() - 2}, {}};
    if (seq.weights.size() == n) train.weights.assign(seq.weights.begin(), seq.weights.end() - 2);
    else train.weights.assign(n - 2, 1.0);
    split.train.push_back(std::move(train));
    split.dev.push_back({seq.user, {seq.items.begin(), seq.items.end() - 2}, seq.items[n - 2]});
    split.test.push_back({seq.user, {seq.items.begin(), seq.items.end() - 1}, seq.items[n - 1]});
  }
  return split;
}

std::vector<Interaction> mf_interactions(const Split& split, const std::vector<UserSequence>& sequences) {
  std::vector<Interaction> out;
  for (const auto& seq : split.train)
    for (std::size_t k = 0; k < seq.items.size(); ++k) out.push_back({seq.user, seq.items[k], seq.weights[k]});
  const std::set<std::uint32_t> excluded(split.excluded_users.begin(), split.excluded_users.end());
  for (const auto& seq : sequences) {
    if (!excluded.count(seq.user)) continue;
    for (std::size_t k = 0; k < seq.items.size(); ++k)
      out.push_back({seq.user, seq.items[k], k < seq.weights.size() ? seq.weights[k] : 1.0});
  }
  return out;
}

// ---- pairs ---------------------------------------------------------------------------------

std::string_view pair_kind_name(PairKind kind) {
  switch (kind) {
    case PairKind::kItemText: return "item-text";
    case PairKind::kItemItem: return "item-item";
    case PairKind::kUserItem: return "user-item";
  }
  return "?";
}

std::vector<PairExample> build_item_text_pairs(const Catalog& catalog) {
  std::vector<PairExample> out;
  for (std::uint32_t i = 0; i < catalog.items.size(); ++i) {
    if (!catalog.items[i].has_text()) continue;
    out.push_back({PairKind::kItemText, i, i, catalog.items[i].text()});
  }
  return out;
}

std::vector<PairExample> build_item_item_pairs(const std::vector<UserSequence>& train) {
  std::vector<PairExample> out;
  std::set<std::pair<std::uint32_t, std::uint32_t>> seen;
  for (const auto& seq : train) {
    for (std::size_t k = 0; k + 1 < seq.items.size(); ++k) {
      if (seen.insert({seq.items[k], seq.items[k + 1]}).second) {
        out.push_back({PairKind::kItemItem, seq.items[k], seq.items[k + 1], {}});
      }
    }
  }
  return out;
}

std::vector<PairExample> build_user_item_pairs(const std::vector<UserSequence>& train) {
  std::vector<PairExample> out;
  std::set<std::pair<std::uint32_t, std::uint32_t>> seen;
  for (const auto& seq : train) {
    for (auto item : seq.items) {
      if (seen.insert({seq.user, item}).second) out.push_back({PairKind::kUserItem, seq.user, item, {}});
    }
  }
  return out;
}

// ---- vocabulary ----------------------------------------------------------------------------

std::vector<std::string> tokenize_words(std::string_view text) {
  std::vector<std::string> out;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) out.push_back(std::move(current));
    current.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c) || ch == '_' || ch == '\'' || c >= 0x80) {
      current.push_back(static_cast<char>(std::tolower(c)));
    } else if (std::isspace(c)) {
      flush();
    } else {
      flush();
      out.emplace_back(1, ch);
    }
  }
  flush();
  return out;
}

namespace {
const char* kSpecialNames[tok::kNumSpecial] = {"<pad>", "<bos>", "<eos>", "<cls>", "<item>", "<user>", "<unk>"};
}

Vocabulary::Vocabulary(std::vector<std::string> words, std::size_t num_items, std::size_t num_users)
    : num_items_(num_items), num_users_(num_users) {
  for (const char* s : kSpecialNames) tokens_.emplace_back(s);
  std::set<std::string> entity_names;
  for (std::size_t i = 0; i < num_items; ++i) entity_names.insert("item_" + std::to_string(i));
  for (std::size_t u = 0; u < num_users; ++u) entity_names.insert("user_" + std::to_string(u));
  std::set<std::string> unique(words.begin(), words.end());
  for (const auto& w : unique) {
    if (w.empty() || entity_names.count(w) || (w.front() == '<' && w.size() > 1)) continue;
    tokens_.push_back(w);
  }
  first_item_ = static_cast<int>(tokens_.size());
  for (std::size_t i = 0; i < num_items; ++i) tokens_.push_back("item_" + std::to_string(i));
  first_user_ = static_cast<int>(tokens_.size());
  for (std::size_t u = 0; u < num_users; ++u) tokens_.push_back("user_" + std::to_string(u));
  for (std::size_t k = 0; k < tokens_.size(); ++k) index_[tokens_[k]] = static_cast<int>(k);
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(size()));
  }
  return tokens_[id];
}

std::optional<int> Vocabulary::find(const std::string& token) const {
  auto it = index_.find(token);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

int Vocabulary::id(const std::string& token) const {
  auto found = find(token);
  if (!found) throw VocabularyError("unknown token '" + token + "'");
  return *found;
}

int Vocabulary::item_token(std::uint32_t item) const {
  if (item >= num_items_) throw VocabularyError("item " + std::to_string(item) + " has no token");
  return first_item_ + static_cast<int>(item);
}

int Vocabulary::user_token(std::uint32_t user) const {
  if (user >= num_users_) throw VocabularyError("user " + std::to_string(user) + " has no token");
  return first_user_ + static_cast<int>(user);
}

std::optional<std::uint32_t> Vocabulary::item_of(int id) const {
  if (id >= first_item_ && id < first_item_ + static_cast<int>(num_items_)) {
    return static_cast<std::uint32_t>(id - first_item_);
  }
  return std::nullopt;
}

std::vector<int> Vocabulary::encode(std::string_view text) const {
  std::vector<int> out;
  for (const auto& w : tokenize_words(text)) out.push_back(find(w).value_or(tok::kUnk));
  return out;
}

std::string Vocabulary::decode(std::span<const int> ids) const {
  std::string out;
  for (std::size_t k = 0; k < ids.size(); ++k) {
    if (k) out += ' ';
    out += token(ids[k]);
  }
  return out;
}

std::string Vocabulary::serialize() const {
  std::string out;
  for (const auto& t : tokens_) out += t + "\n";
  return out;
}

Vocabulary Vocabulary::deserialize(const std::string& text, std::size_t num_items, std::size_t num_users) {
  std::vector<std::string> lines;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  if (lines.size() < tok::kNumSpecial + num_items + num_users) throw StorageError("vocabulary file too short");
  std::vector<std::string> words(lines.begin() + tok::kNumSpecial, lines.end() - num_items - num_users);
  Vocabulary v(words, num_items, num_users);
  if (v.tokens_ != lines) throw StorageError("vocabulary file is not in canonical order");
  return v;
}

// ---- templates and prompts ---------------------------------------------------------------------

std::string_view task_name(Task task) { return task == Task::kSequential ? "sequential" : "straightforward"; }

Task parse_task(std::string_view name) {
  if (name == "sequential") return Task::kSequential;
  if (name == "straightforward") return Task::kStraightforward;
  throw UsageError("unknown task '" + std::string(name) + "'");
}

std::string_view regime_name(Regime regime) { return regime == Regime::kSeen ? "seen" : "unseen"; }

const std::vector<Template>& builtin_templates(Task task) {
  static const std::vector<Template> sequential = {
      {Task::kSequential, "user {user} has interacted with {history} . predict the next item for this user :"},
      {Task::kSequential, "given the history {history} of user {user} , what comes next ?"},
      {Task::kSequential, "here is what user {user} watched : {history} . what will they watch next ?"},
      {Task::kSequential, "{user} watched {history} in order . recommend the next item :"},
      {Task::kSequential, "based on {history} , which item should user {user} see next ?"},
      {Task::kSequential, "sequence for {user} : {history} . next item ?"},
      {Task::kSequential, "the viewing history of {user} is {history} . choose the following item ."},
      {Task::kSequential, "user {user} recently enjoyed {history} . suggest one more item :"},
      {Task::kSequential, "considering {history} , predict what {user} will pick next ."},
      {Task::kSequential, "items consumed by {user} so far : {history} . what is next ?"},
      {Task::kSequential, "after {history} , user {user} is most likely to interact with which item ?"},
  };
  static const std::vector<Template> straightforward = {
      {Task::kStraightforward, "what should we recommend to user {user} ?"},
      {Task::kStraightforward, "pick an item for {user} ."},
      {Task::kStraightforward, "which item would user {user} like ?"},
      {Task::kStraightforward, "recommend something for {user} :"},
      {Task::kStraightforward, "user {user} is looking for a new item . suggest one :"},
      {Task::kStraightforward, "choose the best item for {user} ."},
      {Task::kStraightforward, "what would {user} enjoy ?"},
      {Task::kStraightforward, "find an item that user {user} will like ."},
      {Task::kStraightforward, "suggest an item to {user} :"},
      {Task::kStraightforward, "give user {user} a recommendation ."},
      {Task::kStraightforward, "if you were to select one item for user {user} , which would it be ?"},
  };
  return task == Task::kSequential ? sequential : straightforward;
}

namespace {

struct Segment {
  bool field;
  std::string text;
};

std::vector<Segment> parse_template(const Template& tmpl) {
  std::vector<Segment> out;
  std::string_view rest = tmpl.text;
  while (!rest.empty()) {
    const auto open = rest.find('{');
    const auto close_stray = rest.find('}');
    if (close_stray < open) throw TemplateError("unbalanced '}' in template: " + tmpl.text);
    if (open == std::string_view::npos) {
      out.push_back({false, std::string(rest)});
      break;
    }
    if (open) out.push_back({false, std::string(rest.substr(0, open))});
    const auto close = rest.find('}', open);
    if (close == std::string_view::npos) throw TemplateError("unterminated field in template: " + tmpl.text);
    const std::string name(rest.substr(open + 1, close - open - 1));
    const bool allowed = name == "user" || (name == "history" && tmpl.task == Task::kSequential);
    if (!allowed) {
      throw TemplateError("template for task " + std::string(task_name(tmpl.task)) + " references field {" + name +
                          "} which the task does not provide");
    }
    out.push_back({true, name});
    rest.remove_prefix(close + 1);
  }
  return out;
}

void append_token(SequenceExample& ex, int token, EntityKind kind = EntityKind::kNone, std::uint32_t id = 0) {
  ex.prompt.push_back(token);
  ex.slot_kind.push_back(kind);
  ex.slot_id.push_back(id);
}

}  // namespace

static std::vector<std::string> template_words() {
  std::vector<std::string> out;
  for (Task task : {Task::kSequential, Task::kStraightforward}) {
    for (const auto& t : builtin_templates(task)) {
      for (const auto& seg : parse_template(t)) {
        if (seg.field) continue;
        for (auto& w : tokenize_words(seg.text)) out.push_back(std::move(w));
      }
    }
  }
  out.push_back(",");
  return out;
}

Vocabulary build_vocabulary(const Catalog& catalog) {
  std::vector<std::string> words = template_words();
  for (const auto& item : catalog.items)
    for (auto& w : tokenize_words(item.text())) words.push_back(std::move(w));
  return Vocabulary(std::move(words), catalog.num_items(), catalog.num_users);
}

std::size_t SequenceExample::num_slots() const {
  return static_cast<std::size_t>(
      std::count_if(slot_kind.begin(), slot_kind.end(), [](EntityKind k) { return k != EntityKind::kNone; }));
}

std::uint32_t SequenceExample::target_item(const Vocabulary& vocab) const {
  if (target.empty()) throw UsageError("example has an empty target");
  const auto item = vocab.item_of(target.front());
  if (!item) throw VocabularyError("example target is not an item token");
  return *item;
}

std::vector<int> strip_placeholders(const SequenceExample& example) {
  std::vector<int> out;
  for (std::size_t k = 0; k < example.prompt.size(); ++k)
    if (example.slot_kind[k] == EntityKind::kNone) out.push_back(example.prompt[k]);
  return out;
}

SequenceExample render_example(const Template& tmpl, std::size_t template_index, const Vocabulary& vocab,
                               std::uint32_t user, std::span<const std::uint32_t> history, std::uint32_t target,
                               const PromptOptions& options) {
  SequenceExample ex;
  ex.task = tmpl.task;
  ex.template_index = template_index;
  ex.user = user;
  if (history.size() > options.history_limit) history = history.subspan(history.size() - options.history_limit);
  for (const auto& seg : parse_template(tmpl)) {
    if (!seg.field) {
      for (int id : vocab.encode(seg.text)) append_token(ex, id);
    } else if (seg.text == "user") {
      append_token(ex, vocab.user_token(user));
      append_token(ex, tok::kUserSlot, EntityKind::kUser, user);
    } else {
      for (std::size_t k = 0; k < history.size(); ++k) {
        if (k) append_token(ex, vocab.id(","));
        append_token(ex, vocab.item_token(history[k]));
        append_token(ex, tok::kItemSlot, EntityKind::kItem, history[k]);
      }
    }
  }
  ex.target = {vocab.item_token(target), tok::kEos};
  return ex;
}

std::vector<SequenceExample> render_train_prompts(const std::vector<UserSequence>& train, const Vocabulary& vocab,
                                                  const PromptOptions& options, Rng& rng) {
  std::vector<SequenceExample> out;
  for (const auto& seq : train) {
    for (std::size_t k = 1; k < seq.items.size(); ++k) {
      const std::span<const std::uint32_t> history(seq.items.data(), k);
      for (Task task : {Task::kSequential, Task::kStraightforward}) {
        const auto t = uniform_index(rng, kTrainTemplates);
        out.push_back(render_example(builtin_templates(task)[t], t, vocab, seq.user, history, seq.items[k], options));
      }
    }
  }
  return out;
}

std::vector<SequenceExample> render_eval_prompts(const std::vector<EvalExample>& split, Task task, Regime regime,
                                                 const Vocabulary& vocab, const PromptOptions& options, Rng& rng) {
  std::vector<SequenceExample> out;
  const auto& templates = builtin_templates(task);
  for (const auto& ex : split) {
    const std::size_t t = regime == Regime::kSeen ? uniform_index(rng, kTrainTemplates) : kTrainTemplates;
    out.push_back(render_example(templates[t], t, vocab, ex.user, ex.history, ex.target, options));
  }
  return out;
}

// ---- artifacts ------------------------------------------------------------------------------------

namespace {

std::vector<json> parse_jsonl(const std::string& text, const std::string& what) {
  std::vector<json> out;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::exception& e) {
      throw ParseError(what + " line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

template <typename F>
auto guarded(const std::string& what, F fn) {
  try {
    return fn();
  } catch (const json::exception& e) {
    throw ParseError(what + ": " + e.what());
  }
}

}  // namespace

void write_dataset(const std::filesystem::path& dir, const Dataset& dataset) {
  std::string items;
  const auto& cat = dataset.catalog;
  for (std::size_t i = 0; i < cat.items.size(); ++i) {
    json j{{"id", i}, {"raw", cat.item_raw_ids.at(i)}, {"title", cat.items[i].title}, {"tags", cat.items[i].tags}};
    if (!cat.item_cluster.empty()) j["cluster"] = cat.item_cluster[i];
    items += j.dump() + "\n";
  }
  std::string users;
  for (std::size_t u = 0; u < cat.num_users; ++u) users += json{{"id", u}, {"raw", cat.user_raw_ids.at(u)}}.dump() + "\n";
  std::string seqs;
  for (const auto& s : dataset.sequences) {
    seqs += json{{"user", s.user}, {"items", s.items}, {"weights", s.weights}}.dump() + "\n";
  }
  write_file_atomic(dir / "items.jsonl", items);
  write_file_atomic(dir / "users.jsonl", users);
  write_file_atomic(dir / "sequences.jsonl", seqs);
}

Dataset read_dataset(const std::filesystem::path& dir) {
  return guarded("dataset " + dir.string(), [&] {
    Dataset ds;
    auto& cat = ds.catalog;
    for (const auto& j : parse_jsonl(read_file(dir / "items.jsonl"), "items.jsonl")) {
      if (j.at("id").get<std::size_t>() != cat.items.size()) throw CatalogError("item ids are not dense");
      cat.items.push_back({j.at("title").get<std::string>(), j.at("tags").get<std::vector<std::string>>()});
      cat.item_raw_ids.push_back(j.at("raw").get<std::string>());
      if (j.contains("cluster")) cat.item_cluster.push_back(j["cluster"].get<std::uint32_t>());
    }
    for (const auto& j : parse_jsonl(read_file(dir / "users.jsonl"), "users.jsonl")) {
      if (j.at("id").get<std::size_t>() != cat.user_raw_ids.size()) throw CatalogError("user ids are not dense");
      cat.user_raw_ids.push_back(j.at("raw").get<std::string>());
    }
    cat.num_users = cat.user_raw_ids.size();
    for (const auto& j : parse_jsonl(read_file(dir / "sequences.jsonl"), "sequences.jsonl")) {
      UserSequence s{j.at("user").get<std::uint32_t>(), j.at("items").get<std::vector<std::uint32_t>>(),
                     j.at("weights").get<std::vector<double>>()};
      if (s.user >= cat.num_users) throw CatalogError("sequence for unknown user " + std::to_string(s.user));
      for (auto i : s.items)
        if (i >= cat.items.size()) throw CatalogError("sequence references unknown item " + std::to_string(i));
      ds.sequences.push_back(std::move(s));
    }
    return ds;
  });
}

std::string pairs_to_jsonl(const std::vector<PairExample>& pairs, const Vocabulary* vocab) {
  std::string out;
  for (const auto& p : pairs) {
    json j{{"kind", pair_kind_name(p.kind)}, {"left", p.left}};
    if (p.kind == PairKind::kItemText) {
      j["text"] = p.text;
      if (vocab) j["tokens"] = vocab->encode(p.text);
    } else {
      j["right"] = p.right;
    }
    out += j.dump() + "\n";
  }
  return out;
}

std::vector<PairExample> pairs_from_jsonl(const std::string& text) {
  return guarded("pairs", [&] {
    std::vector<PairExample> out;
    for (const auto& j : parse_jsonl(text, "pairs")) {
      PairExample p;
      const auto kind = j.at("kind").get<std::string>();
      p.left = j.at("left").get<std::uint32_t>();
      if (kind == "item-text") {
        p.kind = PairKind::kItemText;
        p.right = p.left;
        p.text = j.at("text").get<std::string>();
      } else {
        p.kind = kind == "item-item" ? PairKind::kItemItem : PairKind::kUserItem;
        if (kind != "item-item" && kind != "user-item") throw ParseError("unknown pair kind '" + kind + "'");
        p.right = j.at("right").get<std::uint32_t>();
      }
      out.push_back(std::move(p));
    }
    return out;
  });
}

std::string examples_to_jsonl(const std::vector<SequenceExample>& examples) {
  std::string out;
  for (const auto& ex : examples) {
    json slots = json::array();
    for (std::size_t k = 0; k < ex.prompt.size(); ++k) {
      if (ex.slot_kind[k] == EntityKind::kNone) continue;
      slots.push_back({{"pos", k}, {"kind", ex.slot_kind[k] == EntityKind::kItem ? "item" : "user"}, {"id", ex.slot_id[k]}});
    }
    out += json{{"task", task_name(ex.task)}, {"template", ex.template_index}, {"user", ex.user},
                {"prompt", ex.prompt}, {"slots", slots}, {"target", ex.target}}
               .dump() +
           "\n";
  }
  return out;
}

std::vector<SequenceExample> examples_from_jsonl(const std::string& text) {
  return guarded("examples", [&] {
    std::vector<SequenceExample> out;
    for (const auto& j : parse_jsonl(text, "examples")) {
      SequenceExample ex;
      ex.task = parse_task(j.at("task").get<std::string>());
      ex.template_index = j.at("template").get<std::size_t>();
      ex.user = j.at("user").get<std::uint32_t>();
      ex.prompt = j.at("prompt").get<std::vector<int>>();
      ex.slot_kind.assign(ex.prompt.size(), EntityKind::kNone);
      ex.slot_id.assign(ex.prompt.size(), 0);
      for (const auto& s : j.at("slots")) {
        const auto pos = s.at("pos").get<std::size_t>();
        if (pos >= ex.prompt.size()) throw ParseError("slot position outside prompt");
        ex.slot_kind[pos] = s.at("kind").get<std::string>() == "item" ? EntityKind::kItem : EntityKind::kUser;
        ex.slot_id[pos] = s.at("id").get<std::uint32_t>();
      }
      ex.target = j.at("target").get<std::vector<int>>();
      out.push_back(std::move(ex));
    }
    return out;
  });
}

std::string stats_to_jsonl(const DatasetStats& s) {
  std::string out;
  for (const auto& [k, v] : std::vector<std::pair<std::string, std::size_t>>{
           {"users", s.users}, {"items", s.items}, {"item_text", s.item_text}, {"item_item", s.item_item},
           {"user_item", s.user_item}, {"train", s.train}, {"dev", s.dev}, {"test", s.test}}) {
    out += json{{"stat", k}, {"value", v}}.dump() + "\n";
  }
  return out;
}

}  // namespace ilm::data
