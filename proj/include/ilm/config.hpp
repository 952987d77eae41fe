#pragma once

// Run configuration: YAML file with one mapping per section, validated against
// the field table below. Unknown keys are errors.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ilm/als.hpp"
#include "ilm/backbone.hpp"
#include "ilm/data.hpp"
#include "ilm/fusion.hpp"
#include "ilm/qformer.hpp"

namespace ilm {

struct DataSection {
  std::string source = "synthetic";  // synthetic | movielens
  data::SynthConfig synth;
  std::string ratings;
  std::string movies;
  std::size_t history_limit = 10;
};

struct QFormerSection {
  QFormerConfig model;  // cf_dim and vocab_size are filled from the data
  Phase1Config train;
  double eval_fraction = 0.2;  // item-text pairs held out for the eval itg loss
};

struct BackboneSection {
  nn::DecoderConfig model;  // vocab_size is filled from the data
  PretrainConfig train;
};

struct Phase2Section {
  Phase2Config train;
  AdapterKind adapter = AdapterKind::kQFormer;
  std::size_t dev_examples = 0;  // dev prompts scored for checkpoint selection, 0 = all
};

struct EvalSection {
  std::vector<std::size_t> ks{5, 10};
  std::size_t beam_size = 10;
  std::size_t max_new = 2;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::vector<AdapterKind> adapters{AdapterKind::kNone, AdapterKind::kMlp, AdapterKind::kQFormerRand,
                                    AdapterKind::kQFormer};
  std::vector<data::Task> tasks{data::Task::kSequential, data::Task::kStraightforward};
  std::size_t max_examples = 0;  // per task and regime, 0 = all
};

struct AblateSection {
  std::vector<std::size_t> queries{1, 2, 4, 8, 16};
  std::vector<Phase1Mode> modes{Phase1Mode::kIT, Phase1Mode::kITII, Phase1Mode::kITUI};
};

struct RunConfig {
  DataSection data;
  AlsConfig mf;
  QFormerSection qformer;
  BackboneSection backbone;
  Phase2Section phase2;
  EvalSection eval;
  AblateSection ablate;
};

RunConfig parse_config(const std::string& yaml_text);
RunConfig load_config(const std::filesystem::path& path);
// Range and consistency checks; load_config calls it.
void validate(const RunConfig& config);

// Canonical "key: value" lines for the given sections, in schema order.
std::string canonical_config(const RunConfig& config, const std::vector<std::string>& sections);
// sha256 of canonical_config. The eval and ablate sections and phase2.adapter
// never enter a hash.
std::string config_hash(const RunConfig& config, const std::vector<std::string>& sections);

// Human-readable listing of every key with its type, default and meaning.
std::string config_schema();

}  // namespace ilm
