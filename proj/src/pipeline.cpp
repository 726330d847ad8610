#include "pepdpo/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <unordered_set>

#include "pepdpo/error.hpp"
#include "pepdpo/parallel.hpp"

namespace pepdpo::pipeline {
namespace {

constexpr std::string_view kStages[] = {"prompts", "split",  "pretrain_corpus", "init", "pretrain",
                                        "sft",     "gen/train", "gen/test",     "dpo",  "eval",
                                        "entropy", "token_entropy"};

std::vector<dataset::Prompt> select(const std::vector<dataset::Prompt>& prompts, const std::vector<std::string>& ids) {
  std::unordered_set<std::string> want(ids.begin(), ids.end());
  std::vector<dataset::Prompt> out;
  for (const auto& p : prompts)
    if (want.contains(p.id())) out.push_back(p);
  return out;
}

train::TrainConfig supervised_config(const config::RunConfig& cfg, std::size_t epochs, double lr,
                                     std::uint64_t seed) {
  train::TrainConfig t = cfg.train;
  t.alpha = 0.0;
  t.epochs = epochs;
  t.learning_rate = lr;
  t.seed = seed;
  t.jobs = cfg.jobs;
  return t;
}

std::string fmt(double v) {
  if (std::isinf(v)) return v < 0 ? "-inf" : "inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9f", v);
  return buf;
}

}  // namespace

std::uint64_t stage_seed(std::uint64_t master, std::string_view stage) { return derive_seed(master, stage); }

std::vector<std::pair<std::string, std::uint64_t>> stage_seeds(std::uint64_t master) {
  std::vector<std::pair<std::string, std::uint64_t>> out{{"master", master}};
  for (auto s : kStages) out.emplace_back(std::string(s), stage_seed(master, s));
  return out;
}

Benchmark make_benchmark(const config::RunConfig& cfg) {
  Benchmark b;
  b.prompts = dataset::gen_prompts(cfg.n_prompts, cfg.min_length, cfg.max_length, stage_seed(cfg.seed, "prompts"));
  b.split = dataset::make_split(b.prompts, cfg.identity_threshold, cfg.test_fraction, stage_seed(cfg.seed, "split"));
  b.train = select(b.prompts, b.split.train_ids);
  b.test = select(b.prompts, b.split.test_ids);
  return b;
}

policy::PolicyParams make_base(const config::RunConfig& cfg, std::vector<train::EpochLog>* log) {
  Rng rng(stage_seed(cfg.seed, "init"));
  auto base = policy::PolicyParams::init_random(cfg.policy, rng);
  if (cfg.pretrain_prompts == 0 || cfg.pretrain_epochs == 0) return base;
  const auto corpus = dataset::gen_prompts(cfg.pretrain_prompts, cfg.min_length, cfg.max_length,
                                           stage_seed(cfg.seed, "pretrain_corpus"));
  std::vector<train::PromptData> data;
  data.reserve(corpus.size());
  for (const auto& p : corpus) data.push_back(train::make_prompt_data(p, cfg.policy));
  return train::sft(base, data,
                    supervised_config(cfg, cfg.pretrain_epochs, cfg.pretrain_learning_rate,
                                      stage_seed(cfg.seed, "pretrain")),
                    log);
}

policy::PolicyParams make_sft(const config::RunConfig& cfg, const policy::PolicyParams& base,
                              const std::vector<dataset::Prompt>& train, std::vector<train::EpochLog>* log) {
  std::vector<train::PromptData> data;
  data.reserve(train.size());
  for (const auto& p : train) data.push_back(train::make_prompt_data(p, cfg.policy));
  return train::sft(base, data,
                    supervised_config(cfg, cfg.sft_epochs, cfg.sft_learning_rate, stage_seed(cfg.seed, "sft")),
                    log);
}

std::vector<dataset::PreferenceRecord> make_preferences(const config::RunConfig& cfg,
                                                        const policy::PolicyParams& base,
                                                        const std::vector<dataset::Prompt>& prompts,
                                                        std::string_view stage) {
  return dataset::gen_preferences(base, prompts, cfg.K, cfg.gen_temperature, stage_seed(cfg.seed, stage), cfg.jobs);
}

train::TrainResult run_variant(const config::RunConfig& cfg, const policy::PolicyParams& sft,
                               const std::vector<train::PromptData>& data, train::Variant v, double alpha) {
  auto t = config::train_config(cfg, v, alpha);
  t.seed = stage_seed(cfg.seed, v == train::Variant::Sft ? "sft" : "dpo");
  return train::train_loop(sft, sft, data, t, v);
}

std::string checkpoint_name(train::Variant v, double alpha) {
  std::string name(train::variant_name(v));
  if (train::uses_diversity(v) || train::uses_entropy(v)) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "_a%g", alpha);
    name += buf;
  }
  return name;
}

analysis::EvalOptions eval_options(const config::RunConfig& cfg) {
  analysis::EvalOptions o;
  o.n_samples = cfg.eval_samples;
  o.temperature = cfg.eval_temperature;
  o.fixed_order = cfg.fixed_order;
  o.seed = stage_seed(cfg.seed, "eval");
  o.jobs = cfg.jobs;
  return o;
}

std::vector<EntropyRow> entropy_table(const config::RunConfig& cfg, const policy::PolicyParams& pi,
                                      const std::vector<dataset::Prompt>& prompts) {
  std::vector<EntropyRow> rows(prompts.size());
  const std::uint64_t seed = stage_seed(cfg.seed, "entropy");
  parallel_for(prompts.size(), cfg.jobs, [&](std::size_t i) {
    const auto& p = prompts[i];
    Rng rng(derive_seed(seed, p.id()));
    const auto f = policy::featurize(p.structure, pi.config());
    const auto lp = analysis::logprob_over_orders(pi, f, p.native, cfg.entropy_orders, rng, cfg.fixed_order);
    const auto h = analysis::vasicek_entropy(lp);
    const auto stats = analysis::mean_with_error(lp);
    const double sd = stats.stderr_ * std::sqrt(static_cast<double>(stats.n));
    rows[i] = {p.id(), p.native, h.value, h.collapsed, stats.mean, sd};
  });
  return rows;
}

double mean_entropy(const std::vector<EntropyRow>& rows) {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& r : rows)
    if (!r.collapsed) {
      s += r.value;
      ++n;
    }
  return n ? s / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

std::string entropy_csv(const std::vector<std::pair<std::string, std::vector<EntropyRow>>>& tables) {
  std::string s = "checkpoint,structure_id,sequence,diff_entropy,collapsed,logprob_mean,logprob_std\n";
  for (const auto& [name, rows] : tables)
    for (const auto& r : rows)
      s += name + "," + r.structure_id + "," + r.sequence.str() + "," + fmt(r.value) + "," +
           (r.collapsed ? "1" : "0") + "," + fmt(r.logprob_mean) + "," + fmt(r.logprob_std) + "\n";
  return s;
}

analysis::MeanWithError token_entropy(const config::RunConfig& cfg, const policy::PolicyParams& pi,
                                      const std::vector<dataset::Prompt>& prompts) {
  std::vector<policy::Features> feats;
  feats.reserve(prompts.size());
  for (const auto& p : prompts) feats.push_back(policy::featurize(p.structure, pi.config()));
  return analysis::token_entropy(pi, feats, cfg.token_entropy_samples, stage_seed(cfg.seed, "token_entropy"));
}

}  // namespace pepdpo::pipeline
