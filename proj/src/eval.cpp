#include "ilm/eval.hpp"

#include <charconv>
#include <cmath>
#include <map>
#include <regex>
#include <sstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "ilm/error.hpp"

namespace ilm::eval {

using json = nlohmann::ordered_json;

std::vector<std::uint64_t> filter_valid(const std::vector<std::string>& outputs) {
  static const std::regex pattern(R"(.*item_(\d+)$)");
  std::vector<std::uint64_t> ids;
  std::smatch m;
  for (const auto& s : outputs) {
    if (!std::regex_match(s, m, pattern)) continue;
    const auto digits = m.str(1);
    std::uint64_t id = 0;
    const auto [end, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), id);
    if (ec == std::errc() && end == digits.data() + digits.size()) ids.push_back(id);
  }
  return ids;
}

std::vector<std::uint64_t> dedup_ids(const std::vector<std::uint64_t>& ids) {
  std::vector<std::uint64_t> out;
  for (auto id : ids)
    if (std::find(out.begin(), out.end(), id) == out.end()) out.push_back(id);
  return out;
}

double hr_at_k(const std::vector<std::uint64_t>& ranked, std::uint64_t target, std::size_t k) {
  if (k == 0) throw UsageError("K must be at least 1");
  const auto n = std::min(k, ranked.size());
  return std::find(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(n), target) !=
                 ranked.begin() + static_cast<std::ptrdiff_t>(n)
             ? 1.0
             : 0.0;
}

double ndcg_at_k(const std::vector<std::uint64_t>& ranked, std::uint64_t target, std::size_t k) {
  if (k == 0) throw UsageError("K must be at least 1");
  for (std::size_t r = 0; r < std::min(k, ranked.size()); ++r) {
    if (ranked[r] == target) return 1.0 / std::log2(static_cast<double>(r) + 2.0);
  }
  return 0.0;
}

double log_perplexity(const PromptModel& model, const std::vector<data::SequenceExample>& examples) {
  if (examples.empty()) throw UsageError("log perplexity needs at least one example");
  double total = 0.0;
  for (const auto& ex : examples) total += model.target_nll(ex);
  return total / static_cast<double>(examples.size());
}

RankedList decode_hypotheses(const std::vector<BeamHypothesis>& hyps, const data::Vocabulary& vocab) {
  RankedList list;
  for (const auto& h : hyps) {
    std::span<const int> tokens(h.tokens);
    if (!tokens.empty() && tokens.back() == data::tok::kEos) tokens = tokens.first(tokens.size() - 1);
    list.outputs.push_back(vocab.decode(tokens));
    list.scores.push_back(h.score);
  }
  return list;
}

const MetricRow* EvalReport::find(std::string_view task, std::string_view regime, std::string_view metric,
                                  std::optional<std::size_t> k) const {
  for (const auto& r : rows)
    if (r.task == task && r.regime == regime && r.metric == metric && r.k == k) return &r;
  return nullptr;
}

std::vector<MetricRow> score_lists(const EvalSet& set, const std::vector<RankedList>& lists,
                                   const data::Vocabulary& vocab, const EvalOptions& options) {
  if (lists.size() != set.examples.size()) throw DimensionError("one ranked list per example required");
  const std::string task(data::task_name(set.task)), regime(data::regime_name(set.regime));
  std::vector<double> hr(options.ks.size(), 0.0), ndcg(options.ks.size(), 0.0);
  std::size_t outputs = 0, valid = 0;
  for (std::size_t i = 0; i < lists.size(); ++i) {
    const auto ids = filter_valid(lists[i].outputs);
    outputs += lists[i].outputs.size();
    valid += ids.size();
    const auto ranked = dedup_ids(ids);
    const std::uint64_t target = set.examples[i].target_item(vocab);
    for (std::size_t j = 0; j < options.ks.size(); ++j) {
      hr[j] += hr_at_k(ranked, target, options.ks[j]);
      ndcg[j] += ndcg_at_k(ranked, target, options.ks[j]);
    }
  }
  const auto n = lists.size();
  const double denom = n == 0 ? 1.0 : static_cast<double>(n);
  std::vector<MetricRow> rows;
  for (std::size_t j = 0; j < options.ks.size(); ++j) rows.push_back({task, regime, "hr", options.ks[j], hr[j] / denom, n});
  for (std::size_t j = 0; j < options.ks.size(); ++j)
    rows.push_back({task, regime, "ndcg", options.ks[j], ndcg[j] / denom, n});
  rows.push_back({task, regime, "valid_rate", std::nullopt,
                  outputs == 0 ? 0.0 : static_cast<double>(valid) / static_cast<double>(outputs), n});
  return rows;
}

EvalReport evaluate_run(const PromptModel& model, const std::vector<EvalSet>& sets, const data::Vocabulary& vocab,
                        const EvalOptions& options) {
  EvalReport report;
  for (const auto& set : sets) {
    if (set.examples.empty()) continue;
    std::vector<RankedList> lists;
    for (const auto& ex : set.examples) {
      lists.push_back(decode_hypotheses(model.generate(ex, options.beam_size, options.max_new), vocab));
    }
    auto rows = score_lists(set, lists, vocab, options);
    rows.push_back({std::string(data::task_name(set.task)), std::string(data::regime_name(set.regime)), "log_ppl",
                    std::nullopt, log_perplexity(model, set.examples), set.examples.size()});
    report.rows.insert(report.rows.end(), rows.begin(), rows.end());
  }
  return report;
}

double mean_metric(const EvalReport& report, std::string_view metric, std::size_t k) {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& r : report.rows) {
    if (r.metric == metric && r.k == k) {
      total += r.value;
      ++n;
    }
  }
  if (n == 0) throw UsageError(fmt::format("report has no {}@{} rows", metric, k));
  return total / static_cast<double>(n);
}

namespace {

json k_json(const std::optional<std::size_t>& k) { return k ? json(*k) : json(nullptr); }

std::string metric_label(const std::string& metric, const std::optional<std::size_t>& k) {
  return k ? fmt::format("{}@{}", metric, *k) : metric;
}

}  // namespace

std::string report_to_jsonl(const EvalReport& report) {
  std::string out;
  for (const auto& r : report.rows) {
    json j;
    j["task"] = r.task;
    j["regime"] = r.regime;
    j["metric"] = r.metric;
    j["k"] = k_json(r.k);
    j["value"] = r.value;
    j["count"] = r.count;
    out += j.dump() + "\n";
  }
  return out;
}

EvalReport report_from_jsonl(const std::string& text) {
  EvalReport report;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = json::parse(line);
      MetricRow r{j.at("task"), j.at("regime"), j.at("metric"), std::nullopt, j.at("value"), j.at("count")};
      if (!j.at("k").is_null()) r.k = j.at("k").get<std::size_t>();
      report.rows.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw ParseError(fmt::format("report line {}: {}", line_no, e.what()));
    }
  }
  return report;
}

std::string report_table(const EvalReport& report) {
  std::string out = fmt::format("{:<16}{:<8}{:<12}{:>10}{:>8}\n", "task", "regime", "metric", "value", "n");
  for (const auto& r : report.rows) {
    out += fmt::format("{:<16}{:<8}{:<12}{:>10.4f}{:>8}\n", r.task, r.regime, metric_label(r.metric, r.k), r.value,
                       r.count);
  }
  return out;
}

std::vector<AggregateRow> aggregate(const std::string& label, const std::vector<EvalReport>& runs) {
  using Key = std::tuple<std::string, std::string, std::string, std::optional<std::size_t>>;
  std::vector<Key> order;
  std::map<Key, std::vector<double>> values;
  for (const auto& run : runs) {
    for (const auto& r : run.rows) {
      Key key{r.task, r.regime, r.metric, r.k};
      if (!values.contains(key)) order.push_back(key);
      values[key].push_back(r.value);
    }
  }
  std::vector<AggregateRow> rows;
  for (const auto& key : order) {
    const auto& v = values[key];
    const double n = static_cast<double>(v.size());
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= n;
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    const double se = v.size() > 1 ? std::sqrt(ss / (n - 1.0)) / std::sqrt(n) : 0.0;
    rows.push_back({label, std::get<0>(key), std::get<1>(key), std::get<2>(key), std::get<3>(key), mean, se, v.size()});
  }
  return rows;
}

std::string aggregate_to_jsonl(const std::vector<AggregateRow>& rows) {
  std::string out;
  for (const auto& r : rows) {
    json j;
    j["label"] = r.label;
    j["task"] = r.task;
    j["regime"] = r.regime;
    j["metric"] = r.metric;
    j["k"] = k_json(r.k);
    j["mean"] = r.mean;
    j["standard_error"] = r.standard_error;
    j["runs"] = r.runs;
    out += j.dump() + "\n";
  }
  return out;
}

std::string aggregate_table(const std::vector<AggregateRow>& rows) {
  std::string out =
      fmt::format("{:<14}{:<16}{:<8}{:<12}{:>18}{:>6}\n", "model", "task", "regime", "metric", "mean ± se", "runs");
  for (const auto& r : rows) {
    out += fmt::format("{:<14}{:<16}{:<8}{:<12}{:>10.4f} ± {:<6.4f}{:>6}\n", r.label, r.task, r.regime,
                       metric_label(r.metric, r.k), r.mean, r.standard_error, r.runs);
  }
  return out;
}

}  // namespace ilm::eval
