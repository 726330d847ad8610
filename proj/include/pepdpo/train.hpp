#pragma once

// Supervised fine-tuning and the DPO family of preference losses.
//
// Every pairwise loss has the form
//     -log sigmoid( margin )
//     margin = beta * (lp_theta(y_w) - R * lp_ref(y_w))
//            - beta * (lp_theta(y_l) - R * lp_ref(y_l)) + offset
// where lp are sequence log-probabilities evaluated under one decoding order
// per (x, y) shared by theta and ref, R = 1 unless reward scaling is on,
// and `offset` is a constant (no gradient) built from the frozen snapshot
// policy tilde: diversity penalties or snapshot log-probabilities.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pepdpo/dataset.hpp"
#include "pepdpo/policy.hpp"
#include "pepdpo/rng.hpp"

namespace pepdpo::train {

enum class Variant { Sft, Dpo, DpoScaled, DpoDiversity, DpoEntropy, DpoScaledDiversity };

std::string_view variant_name(Variant v);
Variant parse_variant(std::string_view name);  // throws Error(Config)
bool uses_diversity(Variant v);
bool uses_entropy(Variant v);
bool uses_scaling(Variant v);

// Which way the snapshot term enters the margin.
//   Standard:  diversity  +alpha*d(y_l) - alpha*d(y_w)
//              entropy    +alpha*log tilde(y_w) - alpha*log tilde(y_l)
//   Flipped:   the opposite signs (the argmin line of the published
//              diversity algorithm, and the published entropy loss).
enum class PenaltySign { Standard, Flipped };

struct TrainConfig {
  double beta = 0.1;
  double alpha = 0.0;
  bool reward_scaled = false;
  std::size_t M = 8;            // snapshot samples per prompt
  std::size_t K_refresh = 5;    // epochs between snapshot refreshes
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  double learning_rate = 1e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;

  double tilde_temperature = 1.0;  // sampling temperature for snapshot samples
  PenaltySign penalty_sign = PenaltySign::Standard;
  std::size_t n_orders = 1;       // decoding orders averaged per log-probability
  std::size_t kl_prompts = 16;    // prompts used for the per-epoch KL estimate
  std::size_t kl_samples = 2;     // samples per prompt for the KL estimate
  std::size_t jobs = 1;

  void validate(Variant v) const;  // throws Error(Config)
};

// Desk-scale presets. Standard DPO runs at beta = 0.5, regularized and
// scaled variants at beta = 0.1 so all of them spend a similar KL budget.
inline constexpr double kBetaStandardDpo = 0.5;
inline constexpr double kBetaRegularized = 0.1;
double preset_beta(Variant v, double alpha);

class Adam {
 public:
  Adam() = default;
  explicit Adam(const policy::PolicyConfig& shape);
  // params -= lr * mhat / (sqrt(vhat) + eps)
  void step(policy::PolicyParams& params, const policy::Gradient& grad, const TrainConfig& cfg);
  std::size_t steps() const { return t_; }

 private:
  std::optional<policy::PolicyParams> m_, v_;
  std::size_t t_ = 0;
};

// A prompt with structure-derived inputs computed once.
struct PromptData {
  dataset::Prompt prompt;
  policy::Features features;
  std::vector<dataset::Candidate> candidates;  // empty for SFT-only data
  std::vector<std::pair<std::uint32_t, std::uint32_t>> pairs;
  double mean_reward = 1.0;
};

PromptData make_prompt_data(const dataset::Prompt& p, const policy::PolicyConfig& config);
std::vector<PromptData> make_prompt_data(const std::vector<dataset::PreferenceRecord>& records,
                                         const policy::PolicyConfig& config);

struct PairRef {
  std::size_t prompt;  // index into the PromptData list
  std::uint32_t winner, loser;
};
std::vector<PairRef> flatten_pairs(const std::vector<PromptData>& data);

struct LossAndGrad {
  double loss = 0.0;         // mean over the batch
  double margin_mean = 0.0;  // mean implicit-reward margin r_w - r_l (without offset)
  policy::Gradient grad;
};

// Decoding orders for one pair: first for the winner, then for the loser;
// each has n_orders entries.
struct PairOrders {
  std::vector<policy::DecodingOrder> winner, loser;
};
PairOrders draw_pair_orders(const PromptData& p, std::size_t n_orders, Rng& rng);

struct PairItem {
  const PromptData* prompt;
  const Sequence* winner;
  const Sequence* loser;
  double scale = 1.0;   // R(x) for reward scaling
  double offset = 0.0;  // constant added to the margin
};

// beta * (lp_theta(y) - lp_ref(y)) under the given order.
double implicit_reward(const policy::PolicyParams& theta, const policy::PolicyParams& ref,
                       const geometry::Structure& x, const Sequence& y,
                       const policy::DecodingOrder& order, double beta);

// Shared core of every pairwise loss. orders[i] belongs to items[i].
LossAndGrad pairwise_loss(const policy::PolicyParams& theta, const policy::PolicyParams& ref,
                          std::span<const PairItem> items, std::span<const PairOrders> orders,
                          double beta, std::size_t jobs = 1);

// Standard DPO. Orders are drawn from rng (winner then loser, per item).
LossAndGrad dpo_loss(const policy::PolicyParams& theta, const policy::PolicyParams& ref,
                     std::span<const PairItem> items, double beta, Rng& rng, std::size_t jobs = 1);

// Reward-scaled DPO; item.scale carries R(x), which must lie in (0, 1].
LossAndGrad scaled_dpo_loss(const policy::PolicyParams& theta, const policy::PolicyParams& ref,
                            std::span<const PairItem> items, double beta, Rng& rng,
                            std::size_t jobs = 1);

// Mean over cached snapshot samples of the Hamming fraction to y.
double diversity_penalty(std::span<const Sequence> tilde_samples, const Sequence& y);

// -log sigmoid(x), computed stably.
double neg_log_sigmoid(double x);

struct TrainState {
  policy::PolicyParams theta;
  policy::PolicyParams ref;    // frozen
  policy::PolicyParams tilde;  // snapshot used for penalties
  Adam optimizer;
  // Per prompt: M sequences sampled from tilde.
  std::vector<std::vector<Sequence>> tilde_samples;
  // Per prompt, per candidate: log tilde(y) under one random order.
  std::vector<std::vector<double>> tilde_logprobs;
  bool cache_valid = false;
  std::size_t epoch = 0;
  std::size_t cache_epoch = 0;
  std::vector<double> loss_history;

  TrainState(policy::PolicyParams initial, policy::PolicyParams reference);
  // True once K_refresh epochs have elapsed since the cache was filled.
  bool refresh_due(std::size_t K_refresh) const;
};

// tilde <- theta; resample M sequences per prompt at cfg.tilde_temperature
// and recompute snapshot log-probabilities of every candidate.
void refresh_tilde(TrainState& state, const std::vector<PromptData>& prompts,
                   const TrainConfig& cfg, std::uint64_t seed);

struct StepResult {
  double loss;
  double margin_mean;
};

// Build items for a batch of pairs with the margin offset for each variant.
std::vector<PairItem> make_items(const TrainState& state, const std::vector<PromptData>& prompts,
                                 std::span<const PairRef> batch, Variant variant,
                                 const TrainConfig& cfg);

// One Adam update on the diversity-regularized loss. Throws Error(State)
// if the snapshot cache is missing or due for refresh.
StepResult diversity_dpo_step(TrainState& state, const std::vector<PromptData>& prompts,
                              std::span<const PairRef> batch, const TrainConfig& cfg, Rng& rng);
// One Adam update on the entropy-regularized loss.
StepResult entropy_dpo_step(TrainState& state, const std::vector<PromptData>& prompts,
                            std::span<const PairRef> batch, const TrainConfig& cfg, Rng& rng);

// Mean negative log-likelihood of natives (one order per example) and its gradient.
LossAndGrad sft_loss(const policy::PolicyParams& params, std::span<const PromptData* const> batch,
                     std::span<const policy::DecodingOrder> orders, std::size_t jobs = 1);

struct EpochLog {
  std::size_t epoch;
  double loss;
  double margin_mean;
  double kl_estimate;
  double wallclock_s;
};

struct TrainResult {
  policy::PolicyParams params;
  std::vector<EpochLog> log;
  bool aborted = false;
  std::string abort_reason;
};

policy::PolicyParams sft(const policy::PolicyParams& params, const std::vector<PromptData>& data,
                         const TrainConfig& cfg, std::vector<EpochLog>* log = nullptr);

// Runs `cfg.epochs` epochs of the selected variant. For Sft, `data` supplies
// natives; otherwise every strict pair of every record is used. On a
// non-finite loss the run stops and returns the last finite parameters with
// aborted = true.
TrainResult train_loop(const policy::PolicyParams& initial, const policy::PolicyParams& reference,
                       const std::vector<PromptData>& data, const TrainConfig& cfg, Variant variant);

std::string metrics_csv(const std::vector<EpochLog>& log);

}  // namespace pepdpo::train
