#pragma once

// Evaluation metrics, estimators, sweeps, and report emitters.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pepdpo/dataset.hpp"
#include "pepdpo/policy.hpp"
#include "pepdpo/sequence.hpp"

namespace pepdpo::analysis {

// Mean pairwise Hamming fraction over all unordered pairs. Needs >= 2 samples.
double diversity(std::span<const Sequence> samples);
double recovery(const Sequence& native, const Sequence& sample);
double best_of_n_recovery(const Sequence& native, std::span<const Sequence> samples);

struct MeanWithError {
  double mean = 0.0;
  double stderr_ = 0.0;  // sample std / sqrt(n)
  std::size_t n = 0;
};
MeanWithError mean_with_error(std::span<const double> values);

// Monte-Carlo KL(theta || ref): y ~ theta at T = 1 with a random order, then
// lp_theta(y) - lp_ref(y) under that same order; averaged over samples and prompts.
MeanWithError kl_estimate(const policy::PolicyParams& theta, const policy::PolicyParams& ref,
                          std::span<const policy::Features> prompts, std::size_t n_samples,
                          std::uint64_t seed);

struct EntropyEstimate {
  double value;    // -infinity when collapsed
  bool collapsed;  // fewer than two distinct sample values
};

// m-spacing estimate of differential entropy with m = round(sqrt(n)) and the
// Wieczorkowski-Grzegorzewski bias correction. Order statistics beyond the
// sample range are clamped to the extremes.
EntropyEstimate vasicek_entropy(std::span<const double> samples);
std::size_t vasicek_window(std::size_t n);

// Log-probabilities of y under n_orders random decoding orders (or the
// identity order repeated when fixed_order is set).
std::vector<double> logprob_over_orders(const policy::PolicyParams& pi, const policy::Features& f,
                                        const Sequence& y, std::size_t n_orders, Rng& rng,
                                        bool fixed_order = false);

EntropyEstimate diff_entropy(const policy::PolicyParams& pi, const policy::Features& f,
                             const Sequence& y, std::size_t n_orders, Rng& rng,
                             bool fixed_order = false);

// -mean over samples y ~ pi (T = 1) of lp(y) / L.
MeanWithError token_entropy(const policy::PolicyParams& pi, std::span<const policy::Features> prompts,
                            std::size_t samples_per_prompt, std::uint64_t seed);

using TokenDistribution = std::array<double, kNumTokens>;
TokenDistribution token_frequencies(std::span<const Sequence> seqs);
// KL(p || q) after adding 1e-6 to each cell and renormalizing.
double token_freq_kl(const TokenDistribution& p, const TokenDistribution& q);

// Spearman rank correlation with average ranks for ties; nullopt when
// either input has zero variance.
std::optional<double> rank_correlation(std::span<const double> a, std::span<const double> b);

struct PromptRow {
  std::string structure_id;
  double mean_tm = 0.0;
  double diversity = 0.0;
  double recovery = 0.0;
  std::vector<double> best_of_n;  // best_of_n[k] = best recovery among first k+1 samples
  std::vector<Sequence> samples;
};

struct EvalReport {
  std::vector<PromptRow> rows;
  MeanWithError tm, diversity, recovery;
  std::vector<double> best_of_n_mean;
};

struct EvalOptions {
  std::size_t n_samples = 4;
  double temperature = 0.0;
  bool fixed_order = false;
  std::uint64_t seed = 0;  // prompt streams: derive_seed(seed, structure id)
  std::size_t jobs = 1;
};

EvalReport evaluate(const policy::PolicyParams& pi, const std::vector<dataset::Prompt>& prompts,
                    const EvalOptions& opt);
// Recomputes the aggregates from rows (used after editing rows).
void aggregate(EvalReport& report);

struct SweepPoint {
  double temperature;
  double alpha;
  std::string variant;
  double mean_reward;
  double mean_diversity;
  double reward_stderr = 0.0;
  double diversity_stderr = 0.0;
  bool pareto = false;
};

struct NamedPolicy {
  std::string variant;
  double alpha;
  const policy::PolicyParams* params;
};

// Marks points not dominated in (reward, diversity) by any other point.
void mark_pareto(std::vector<SweepPoint>& points);

std::vector<SweepPoint> sweep(std::span<const NamedPolicy> policies, std::span<const double> temperatures,
                              const std::vector<dataset::Prompt>& prompts, const EvalOptions& base);

std::vector<double> default_temperatures();  // 0.0, 0.1, ..., 1.0

struct BucketDelta {
  double lo, hi;
  std::size_t count;
  double mean_delta;  // mean(TM_a - TM_b); NaN when count == 0
};

// Groups prompts by R(x) from `records` into [edges[i], edges[i+1]) (last
// bucket closed) and averages TM_a - TM_b. Empty buckets have count 0.
std::vector<BucketDelta> bucket_tm_delta(const std::vector<dataset::PreferenceRecord>& records,
                                         const EvalReport& a, const EvalReport& b,
                                         std::span<const double> edges);

std::string report_csv(const EvalReport& r);
std::string report_json(const EvalReport& r, const std::string& label);
std::string sweep_csv(const std::vector<SweepPoint>& points);

}  // namespace pepdpo::analysis
