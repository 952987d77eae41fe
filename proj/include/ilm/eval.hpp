#pragma once

// Ranking metrics over generated item ids, perplexity, and run reports.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ilm/backbone.hpp"
#include "ilm/data.hpp"

namespace ilm::eval {

// Anything that can score and decode a rendered prompt.
class PromptModel {
 public:
  virtual ~PromptModel() = default;
  virtual std::vector<BeamHypothesis> generate(const data::SequenceExample& example, std::size_t beam_size,
                                               std::size_t max_new) const = 0;
  // Mean NLL per target token.
  virtual double target_nll(const data::SequenceExample& example) const = 0;
};

// Keeps strings matching `.*item_(\d+)$` and returns their ids in order.
std::vector<std::uint64_t> filter_valid(const std::vector<std::string>& outputs);

// Collapses repeated ids to their first occurrence.
std::vector<std::uint64_t> dedup_ids(const std::vector<std::uint64_t>& ids);

double hr_at_k(const std::vector<std::uint64_t>& ranked, std::uint64_t target, std::size_t k);
double ndcg_at_k(const std::vector<std::uint64_t>& ranked, std::uint64_t target, std::size_t k);

double log_perplexity(const PromptModel& model, const std::vector<data::SequenceExample>& examples);

struct RankedList {
  std::vector<std::string> outputs;  // decoded strings, best first
  std::vector<double> scores;
};

RankedList decode_hypotheses(const std::vector<BeamHypothesis>& hyps, const data::Vocabulary& vocab);

struct MetricRow {
  std::string task;
  std::string regime;
  std::string metric;  // "hr", "ndcg", "log_ppl", "valid_rate"
  std::optional<std::size_t> k;
  double value = 0.0;
  std::size_t count = 0;
};

struct EvalReport {
  std::vector<MetricRow> rows;
  const MetricRow* find(std::string_view task, std::string_view regime, std::string_view metric,
                        std::optional<std::size_t> k = std::nullopt) const;
};

struct EvalOptions {
  std::vector<std::size_t> ks{5, 10};
  std::size_t beam_size = 10;
  std::size_t max_new = 2;
};

struct EvalSet {
  data::Task task = data::Task::kSequential;
  data::Regime regime = data::Regime::kSeen;
  std::vector<data::SequenceExample> examples;
};

// Metrics for one example set from already-decoded lists.
std::vector<MetricRow> score_lists(const EvalSet& set, const std::vector<RankedList>& lists,
                                   const data::Vocabulary& vocab, const EvalOptions& options);

EvalReport evaluate_run(const PromptModel& model, const std::vector<EvalSet>& sets, const data::Vocabulary& vocab,
                        const EvalOptions& options);

// Mean NDCG@k over every set in the report.
double mean_metric(const EvalReport& report, std::string_view metric, std::size_t k);

std::string report_to_jsonl(const EvalReport& report);
EvalReport report_from_jsonl(const std::string& text);
std::string report_table(const EvalReport& report);

struct AggregateRow {
  std::string label;
  std::string task;
  std::string regime;
  std::string metric;
  std::optional<std::size_t> k;
  double mean = 0.0;
  double standard_error = 0.0;
  std::size_t runs = 0;
};

// Mean and standard error (sample sd / sqrt(n)) per metric across runs.
std::vector<AggregateRow> aggregate(const std::string& label, const std::vector<EvalReport>& runs);
std::string aggregate_to_jsonl(const std::vector<AggregateRow>& rows);
std::string aggregate_table(const std::vector<AggregateRow>& rows);

}  // namespace ilm::eval
