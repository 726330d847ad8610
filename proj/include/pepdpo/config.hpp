#pragma once

// Flat key=value run configuration shared by every subcommand.
//
//   # comment
//   seed = 7
//   alpha_grid = 0,0.1,0.2,0.5
//
// Keys are listed in `config_keys()`. Unknown keys, duplicate keys and
// unparsable values raise Error(Config) naming the key and line.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "pepdpo/policy.hpp"
#include "pepdpo/train.hpp"

namespace pepdpo::config {

struct RunConfig {
  std::uint64_t seed = 1;

  // Benchmark.
  std::size_t n_prompts = 250;
  double test_fraction = 0.2;
  std::size_t min_length = 10;
  std::size_t max_length = 30;
  double identity_threshold = 0.4;

  // Pretraining of the data-generating base policy on a separate corpus.
  std::size_t pretrain_prompts = 3000;
  std::size_t pretrain_epochs = 20;
  double pretrain_learning_rate = 3e-3;

  // Preference data.
  std::size_t K = 4;
  double gen_temperature = 0.1;

  // Supervised fine-tuning on train natives.
  std::size_t sft_epochs = 2;
  double sft_learning_rate = 1e-3;

  // Preference optimization. beta unset means the variant preset.
  std::string variant = "dpo";
  std::optional<double> beta;
  std::optional<double> alpha;
  std::vector<double> alpha_grid{0.0, 0.1, 0.2, 0.5};
  train::TrainConfig train;

  // Evaluation.
  std::size_t eval_samples = 4;
  double eval_temperature = 0.0;
  bool fixed_order = false;
  std::size_t entropy_orders = 128;
  std::size_t token_entropy_samples = 4;
  std::vector<double> bucket_edges{0.0, 0.2, 0.3, 0.4, 1.0};

  std::size_t jobs = 1;

  policy::PolicyConfig policy;
};

std::vector<std::string_view> config_keys();

RunConfig parse_config(std::string_view text);
RunConfig load_config(const std::string& path);

// Applies one key=value assignment (also used for CLI overrides).
void set_value(RunConfig& cfg, std::string_view key, std::string_view value);

// Canonical text: every key in config_keys() order, one per line. Hashing
// this makes the config hash independent of comments and key order.
std::string canonical_text(const RunConfig& cfg);

// Training config for one variant and alpha, with the beta preset applied
// when beta is unset.
train::TrainConfig train_config(const RunConfig& cfg, train::Variant v, double alpha);

void validate(const RunConfig& cfg);

}  // namespace pepdpo::config
