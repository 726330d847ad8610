#pragma once

// Stages of the end-to-end run, shared by the CLI and the acceptance suite.
//
//   benchmark   gen_prompts -> make_split
//   base        random init -> supervised pretraining on a separate corpus
//   sft         base -> supervised fine-tuning on train natives
//   preferences K samples per prompt from base at gen_temperature
//   variants    train_loop from sft with ref = sft
//
// Every stage draws from derive_seed(master seed, stage name).

#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "pepdpo/analysis.hpp"
#include "pepdpo/config.hpp"
#include "pepdpo/dataset.hpp"
#include "pepdpo/policy.hpp"
#include "pepdpo/train.hpp"

namespace pepdpo::pipeline {

std::uint64_t stage_seed(std::uint64_t master, std::string_view stage);
// (stage, seed) for every stage, in pipeline order; recorded in manifests.
std::vector<std::pair<std::string, std::uint64_t>> stage_seeds(std::uint64_t master);

struct Benchmark {
  std::vector<dataset::Prompt> prompts;
  dataset::SplitManifest split;
  std::vector<dataset::Prompt> train, test;
};

Benchmark make_benchmark(const config::RunConfig& cfg);

policy::PolicyParams make_base(const config::RunConfig& cfg, std::vector<train::EpochLog>* log = nullptr);

policy::PolicyParams make_sft(const config::RunConfig& cfg, const policy::PolicyParams& base,
                              const std::vector<dataset::Prompt>& train,
                              std::vector<train::EpochLog>* log = nullptr);

// `stage` separates the train and test streams ("gen/train", "gen/test").
std::vector<dataset::PreferenceRecord> make_preferences(const config::RunConfig& cfg,
                                                        const policy::PolicyParams& base,
                                                        const std::vector<dataset::Prompt>& prompts,
                                                        std::string_view stage);

// All preference variants share one training stream so that runs differing
// only in alpha see identical batches and decoding orders.
train::TrainResult run_variant(const config::RunConfig& cfg, const policy::PolicyParams& sft,
                               const std::vector<train::PromptData>& data, train::Variant v, double alpha);

// "sft", "dpo", "dpo_scaled", or e.g. "dpo_diversity_a0.1" for alpha variants.
std::string checkpoint_name(train::Variant v, double alpha);

analysis::EvalOptions eval_options(const config::RunConfig& cfg);

struct EntropyRow {
  std::string structure_id;
  Sequence sequence;
  double value;  // Vasicek estimate; -inf when collapsed
  bool collapsed;
  double logprob_mean;
  double logprob_std;
};

// Differential entropy of log pi(native | x) over cfg.entropy_orders decoding
// orders, one row per prompt.
std::vector<EntropyRow> entropy_table(const config::RunConfig& cfg, const policy::PolicyParams& pi,
                                      const std::vector<dataset::Prompt>& prompts);
// Mean over rows, with collapsed rows excluded (NaN when all collapse).
double mean_entropy(const std::vector<EntropyRow>& rows);
std::string entropy_csv(const std::vector<std::pair<std::string, std::vector<EntropyRow>>>& tables);

analysis::MeanWithError token_entropy(const config::RunConfig& cfg, const policy::PolicyParams& pi,
                                      const std::vector<dataset::Prompt>& prompts);

}  // namespace pepdpo::pipeline
