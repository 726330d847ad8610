#include "pepdpo/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "pepdpo/analysis.hpp"
#include "pepdpo/error.hpp"
#include "pepdpo/kernels.hpp"
#include "pepdpo/parallel.hpp"

namespace pepdpo::train {
namespace {

using policy::DecodingOrder;
using policy::Gradient;
using policy::PolicyParams;

struct OrderedEval {
  double mean = 0.0;
};

double mean_logprob(const PolicyParams& p, const policy::Features& f, const policy::Encoding& enc,
                    const Sequence& y, const std::vector<DecodingOrder>& orders) {
  double s = 0.0;
  for (const auto& o : orders) s += policy::logprob(p, f, enc, y, o).total;
  return s / static_cast<double>(orders.size());
}

void require_finite(double v, const char* what) {
  if (!std::isfinite(v)) fail(ErrorKind::Numeric, std::string(what) + " is not finite");
}

// Sums per-item gradients in index order.
void reduce_into(Gradient& out, const std::vector<Gradient>& parts) {
  const auto& k = simd::active_kernels();
  for (const auto& g : parts) k.axpy(1.0, g.values().data(), out.values().data(), out.size());
}

StepResult apply_step(TrainState& state, const LossAndGrad& lg, const TrainConfig& cfg) {
  require_finite(lg.loss, "training loss");
  if (!lg.grad.all_finite()) fail(ErrorKind::Numeric, "training gradient is not finite");
  state.optimizer.step(state.theta, lg.grad, cfg);
  state.loss_history.push_back(lg.loss);
  return {lg.loss, lg.margin_mean};
}

void require_fresh_cache(const TrainState& state, const TrainConfig& cfg) {
  if (!state.cache_valid) fail(ErrorKind::State, "snapshot cache is empty; call refresh_tilde first");
  if (state.refresh_due(cfg.K_refresh))
    fail(ErrorKind::State, "snapshot cache is stale (refresh required at epoch " +
                               std::to_string(state.cache_epoch + cfg.K_refresh) + ")");
}

std::vector<PairOrders> draw_orders(std::span<const PairItem> items, std::size_t n_orders, Rng& rng) {
  std::vector<PairOrders> orders;
  orders.reserve(items.size());
  for (const auto& it : items) orders.push_back(draw_pair_orders(*it.prompt, n_orders, rng));
  return orders;
}

StepResult dpo_step(TrainState& state, const std::vector<PromptData>& prompts, std::span<const PairRef> batch,
                    const TrainConfig& cfg, Variant variant, Rng& rng) {
  const auto items = make_items(state, prompts, batch, variant, cfg);
  const auto orders = draw_orders(items, cfg.n_orders, rng);
  return apply_step(state, pairwise_loss(state.theta, state.ref, items, orders, cfg.beta, cfg.jobs), cfg);
}

}  // namespace

std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::Sft: return "sft";
    case Variant::Dpo: return "dpo";
    case Variant::DpoScaled: return "dpo_scaled";
    case Variant::DpoDiversity: return "dpo_diversity";
    case Variant::DpoEntropy: return "dpo_entropy";
    case Variant::DpoScaledDiversity: return "dpo_scaled_diversity";
  }
  return "unknown";
}

Variant parse_variant(std::string_view name) {
  for (Variant v : {Variant::Sft, Variant::Dpo, Variant::DpoScaled, Variant::DpoDiversity, Variant::DpoEntropy,
                    Variant::DpoScaledDiversity})
    if (variant_name(v) == name) return v;
  fail(ErrorKind::Config, "unknown variant '" + std::string(name) +
                              "' (expected sft, dpo, dpo_scaled, dpo_diversity, dpo_entropy, dpo_scaled_diversity)");
}

bool uses_diversity(Variant v) { return v == Variant::DpoDiversity || v == Variant::DpoScaledDiversity; }
bool uses_entropy(Variant v) { return v == Variant::DpoEntropy; }
bool uses_scaling(Variant v) { return v == Variant::DpoScaled || v == Variant::DpoScaledDiversity; }

void TrainConfig::validate(Variant v) const {
  auto bad = [](const std::string& why) { fail(ErrorKind::Config, why); };
  if (!(beta > 0.0)) bad("beta must be > 0");
  if (!(alpha >= 0.0)) bad("alpha must be >= 0");
  if (K_refresh < 1) bad("K_refresh must be >= 1");
  if (batch_size < 1) bad("batch_size must be >= 1");
  if (n_orders < 1) bad("n_orders must be >= 1");
  if (!(learning_rate >= 0.0)) bad("learning_rate must be >= 0");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0))
    bad("Adam moments must lie in [0, 1)");
  if (!(adam_eps > 0.0)) bad("adam_eps must be > 0");
  if (!(tilde_temperature >= 0.0)) bad("tilde_temperature must be >= 0");
  if (uses_diversity(v) && alpha > 0.0 && M < 1) bad("M must be >= 1 when alpha > 0");
  if ((v == Variant::Dpo || v == Variant::DpoScaled || v == Variant::Sft) && alpha != 0.0)
    bad("alpha = " + std::to_string(alpha) + " is incompatible with variant " + std::string(variant_name(v)));
}

double preset_beta(Variant v, double alpha) {
  return (v == Variant::Dpo && alpha == 0.0) ? kBetaStandardDpo : kBetaRegularized;
}

Adam::Adam(const policy::PolicyConfig& shape) : m_(PolicyParams(shape)), v_(PolicyParams(shape)) {}

void Adam::step(PolicyParams& params, const Gradient& grad, const TrainConfig& cfg) {
  if (!m_) {
    m_.emplace(params.config());
    v_.emplace(params.config());
  }
  if (!grad.compatible_with(params) || !m_->compatible_with(params))
    fail(ErrorKind::Dimension, "Adam: parameter shapes differ");
  ++t_;
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  auto p = params.values();
  auto m = m_->values();
  auto v = v_->values();
  const auto g = grad.values();
  for (std::size_t i = 0; i < p.size(); ++i) {
    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
    p[i] -= cfg.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.adam_eps);
  }
}

PromptData make_prompt_data(const dataset::Prompt& p, const policy::PolicyConfig& config) {
  return {p, policy::featurize(p.structure, config), {}, {}, 1.0};
}

std::vector<PromptData> make_prompt_data(const std::vector<dataset::PreferenceRecord>& records,
                                         const policy::PolicyConfig& config) {
  std::vector<PromptData> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    PromptData d = make_prompt_data(dataset::prompt_from_record(r), config);
    d.candidates = r.candidates;
    d.pairs = r.pairs;
    d.mean_reward = r.mean_reward;
    out.push_back(std::move(d));
  }
  return out;
}

std::vector<PairRef> flatten_pairs(const std::vector<PromptData>& data) {
  std::vector<PairRef> out;
  for (std::size_t i = 0; i < data.size(); ++i)
    for (const auto& [w, l] : data[i].pairs) out.push_back({i, w, l});
  return out;
}

PairOrders draw_pair_orders(const PromptData& p, std::size_t n_orders, Rng& rng) {
  PairOrders o;
  for (std::size_t k = 0; k < n_orders; ++k) o.winner.push_back(policy::sample_order(p.features.length, rng));
  for (std::size_t k = 0; k < n_orders; ++k) o.loser.push_back(policy::sample_order(p.features.length, rng));
  return o;
}

double implicit_reward(const PolicyParams& theta, const PolicyParams& ref, const geometry::Structure& x,
                       const Sequence& y, const DecodingOrder& order, double beta) {
  if (!theta.compatible_with(ref)) fail(ErrorKind::Dimension, "implicit_reward: incompatible policies");
  return beta * (policy::logprob(theta, x, y, order).total - policy::logprob(ref, x, y, order).total);
}

double neg_log_sigmoid(double x) {
  return x >= 0.0 ? std::log1p(std::exp(-x)) : -x + std::log1p(std::exp(x));
}

LossAndGrad pairwise_loss(const PolicyParams& theta, const PolicyParams& ref, std::span<const PairItem> items,
                          std::span<const PairOrders> orders, double beta, std::size_t jobs) {
  if (items.size() != orders.size()) fail(ErrorKind::Dimension, "pairwise_loss: one order set per item");
  if (items.empty()) fail(ErrorKind::InvalidInput, "pairwise_loss: empty batch");
  if (!theta.compatible_with(ref)) fail(ErrorKind::Dimension, "pairwise_loss: incompatible policies");

  const double inv_b = 1.0 / static_cast<double>(items.size());
  std::vector<double> losses(items.size()), margins(items.size());
  std::vector<Gradient> grads(items.size(), Gradient(theta.config()));

  parallel_for(items.size(), jobs, [&](std::size_t i) {
    const PairItem& it = items[i];
    const auto& f = it.prompt->features;
    const auto enc_t = policy::encode(theta, f);
    const auto enc_r = policy::encode(ref, f);
    const auto& ow = orders[i].winner;
    const auto& ol = orders[i].loser;
    const double tw = mean_logprob(theta, f, enc_t, *it.winner, ow);
    const double rw = mean_logprob(ref, f, enc_r, *it.winner, ow);
    const double tl = mean_logprob(theta, f, enc_t, *it.loser, ol);
    const double rl = mean_logprob(ref, f, enc_r, *it.loser, ol);
    const double reward_w = beta * (tw - it.scale * rw);
    const double reward_l = beta * (tl - it.scale * rl);
    const double margin = reward_w - reward_l + it.offset;
    losses[i] = neg_log_sigmoid(margin);
    margins[i] = reward_w - reward_l;

    // d/dmargin of -log sigmoid(margin) = -sigmoid(-margin)
    const double dmargin = -1.0 / (1.0 + std::exp(margin));
    const double cw = dmargin * beta * inv_b / static_cast<double>(ow.size());
    const double cl = -dmargin * beta * inv_b / static_cast<double>(ol.size());
    std::vector<policy::GradTerm> terms;
    for (const auto& o : ow) terms.push_back({it.winner, &o, cw});
    for (const auto& o : ol) terms.push_back({it.loser, &o, cl});
    policy::accumulate_grad(theta, f, enc_t, terms, grads[i]);
  });

  LossAndGrad out{0.0, 0.0, Gradient(theta.config())};
  for (std::size_t i = 0; i < items.size(); ++i) {
    out.loss += losses[i];
    out.margin_mean += margins[i];
  }
  out.loss *= inv_b;
  out.margin_mean *= inv_b;
  reduce_into(out.grad, grads);
  return out;
}

LossAndGrad dpo_loss(const PolicyParams& theta, const PolicyParams& ref, std::span<const PairItem> items,
                     double beta, Rng& rng, std::size_t jobs) {
  std::vector<PairItem> plain(items.begin(), items.end());
  for (auto& it : plain) {
    it.scale = 1.0;
    it.offset = 0.0;
  }
  const auto orders = draw_orders(plain, 1, rng);
  return pairwise_loss(theta, ref, plain, orders, beta, jobs);
}

LossAndGrad scaled_dpo_loss(const PolicyParams& theta, const PolicyParams& ref, std::span<const PairItem> items,
                            double beta, Rng& rng, std::size_t jobs) {
  std::vector<PairItem> scaled(items.begin(), items.end());
  for (auto& it : scaled) {
    if (!(it.scale > 0.0 && it.scale <= 1.0))
      fail(ErrorKind::InvalidInput, "scaled_dpo_loss: R(x) = " + std::to_string(it.scale) + " outside (0, 1]");
    it.offset = 0.0;
  }
  const auto orders = draw_orders(scaled, 1, rng);
  return pairwise_loss(theta, ref, scaled, orders, beta, jobs);
}

double diversity_penalty(std::span<const Sequence> tilde_samples, const Sequence& y) {
  if (tilde_samples.empty()) fail(ErrorKind::Config, "diversity_penalty: no snapshot samples cached");
  double s = 0.0;
  for (const auto& t : tilde_samples) s += hamming_fraction(y, t);
  return s / static_cast<double>(tilde_samples.size());
}

TrainState::TrainState(PolicyParams initial, PolicyParams reference)
    : theta(std::move(initial)), ref(std::move(reference)), tilde(ref), optimizer(theta.config()) {
  if (!theta.compatible_with(ref)) fail(ErrorKind::Dimension, "TrainState: policy and reference differ in shape");
}

bool TrainState::refresh_due(std::size_t K_refresh) const { return epoch >= cache_epoch + K_refresh; }

void refresh_tilde(TrainState& state, const std::vector<PromptData>& prompts, const TrainConfig& cfg,
                   std::uint64_t seed) {
  if (state.epoch % cfg.K_refresh != 0)
    fail(ErrorKind::State, "refresh_tilde: epoch " + std::to_string(state.epoch) + " is not a multiple of K_refresh");
  PolicyParams snapshot = state.theta;
  std::vector<std::vector<Sequence>> samples(prompts.size());
  std::vector<std::vector<double>> logprobs(prompts.size());
  parallel_for(prompts.size(), cfg.jobs, [&](std::size_t p) {
    Rng rng(derive_seed(seed, p));
    const auto& f = prompts[p].features;
    const auto enc = policy::encode(snapshot, f);
    for (std::size_t m = 0; m < cfg.M; ++m)
      samples[p].push_back(policy::sample(snapshot, f, enc, cfg.tilde_temperature, rng, false).sequence);
    for (const auto& c : prompts[p].candidates) {
      std::vector<DecodingOrder> orders;
      for (std::size_t k = 0; k < cfg.n_orders; ++k) orders.push_back(policy::sample_order(f.length, rng));
      logprobs[p].push_back(mean_logprob(snapshot, f, enc, c.sequence, orders));
    }
  });
  // Swap everything in at once so no step sees a half-updated cache.
  state.tilde = std::move(snapshot);
  state.tilde_samples = std::move(samples);
  state.tilde_logprobs = std::move(logprobs);
  state.cache_valid = true;
  state.cache_epoch = state.epoch;
}

std::vector<PairItem> make_items(const TrainState& state, const std::vector<PromptData>& prompts,
                                 std::span<const PairRef> batch, Variant variant, const TrainConfig& cfg) {
  const bool flipped = cfg.penalty_sign == PenaltySign::Flipped;
  const bool scaled = uses_scaling(variant) || cfg.reward_scaled;
  std::vector<PairItem> items;
  items.reserve(batch.size());
  for (const PairRef& ref : batch) {
    const PromptData& p = prompts.at(ref.prompt);
    PairItem it{&p, &p.candidates.at(ref.winner).sequence, &p.candidates.at(ref.loser).sequence, 1.0, 0.0};
    if (scaled) {
      if (!(p.mean_reward > 0.0 && p.mean_reward <= 1.0))
        fail(ErrorKind::InvalidInput, "reward scaling: R(x) outside (0, 1] for " + p.prompt.id());
      it.scale = p.mean_reward;
    }
    if (uses_diversity(variant)) {
      const double dw = diversity_penalty(state.tilde_samples.at(ref.prompt), *it.winner);
      const double dl = diversity_penalty(state.tilde_samples.at(ref.prompt), *it.loser);
      it.offset = flipped ? cfg.alpha * dw - cfg.alpha * dl : cfg.alpha * dl - cfg.alpha * dw;
    } else if (uses_entropy(variant)) {
      const double lw = state.tilde_logprobs.at(ref.prompt).at(ref.winner);
      const double ll = state.tilde_logprobs.at(ref.prompt).at(ref.loser);
      it.offset = flipped ? cfg.alpha * ll - cfg.alpha * lw : cfg.alpha * lw - cfg.alpha * ll;
    }
    items.push_back(it);
  }
  return items;
}

StepResult diversity_dpo_step(TrainState& state, const std::vector<PromptData>& prompts,
                              std::span<const PairRef> batch, const TrainConfig& cfg, Rng& rng) {
  require_fresh_cache(state, cfg);
  return dpo_step(state, prompts, batch, cfg,
                  cfg.reward_scaled ? Variant::DpoScaledDiversity : Variant::DpoDiversity, rng);
}

StepResult entropy_dpo_step(TrainState& state, const std::vector<PromptData>& prompts,
                            std::span<const PairRef> batch, const TrainConfig& cfg, Rng& rng) {
  require_fresh_cache(state, cfg);
  return dpo_step(state, prompts, batch, cfg, Variant::DpoEntropy, rng);
}

LossAndGrad sft_loss(const PolicyParams& params, std::span<const PromptData* const> batch,
                     std::span<const DecodingOrder> orders, std::size_t jobs) {
  if (batch.size() != orders.size()) fail(ErrorKind::Dimension, "sft_loss: one order per example");
  if (batch.empty()) fail(ErrorKind::InvalidInput, "sft_loss: empty batch");
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  std::vector<double> losses(batch.size());
  std::vector<Gradient> grads(batch.size(), Gradient(params.config()));
  parallel_for(batch.size(), jobs, [&](std::size_t i) {
    const auto& d = *batch[i];
    const auto enc = policy::encode(params, d.features);
    losses[i] = -policy::logprob(params, d.features, enc, d.prompt.native, orders[i]).total;
    const policy::GradTerm term{&d.prompt.native, &orders[i], -inv_b};
    policy::accumulate_grad(params, d.features, enc, std::span(&term, 1), grads[i]);
  });
  LossAndGrad out{0.0, 0.0, Gradient(params.config())};
  for (double l : losses) out.loss += l;
  out.loss *= inv_b;
  reduce_into(out.grad, grads);
  return out;
}

PolicyParams sft(const PolicyParams& params, const std::vector<PromptData>& data, const TrainConfig& cfg,
                 std::vector<EpochLog>* log) {
  if (data.empty()) fail(ErrorKind::InvalidInput, "sft: empty dataset");
  TrainResult r = train_loop(params, params, data, cfg, Variant::Sft);
  if (log) *log = r.log;
  if (r.aborted) fail(ErrorKind::Numeric, "sft aborted: " + r.abort_reason);
  return std::move(r.params);
}

TrainResult train_loop(const PolicyParams& initial, const PolicyParams& reference,
                       const std::vector<PromptData>& data, const TrainConfig& cfg, Variant variant) {
  cfg.validate(variant);
  TrainState state(initial, variant == Variant::Sft ? initial : reference);
  TrainResult result{initial, {}, false, {}};

  const auto pairs = variant == Variant::Sft ? std::vector<PairRef>{} : flatten_pairs(data);
  const std::size_t n_items = variant == Variant::Sft ? data.size() : pairs.size();
  if (cfg.epochs > 0 && n_items == 0) fail(ErrorKind::Data, "train_loop: no training examples");
  const bool needs_tilde = uses_diversity(variant) || uses_entropy(variant);

  std::vector<policy::Features> kl_features;
  for (std::size_t i = 0; i < std::min(cfg.kl_prompts, data.size()); ++i) kl_features.push_back(data[i].features);

  const auto start = std::chrono::steady_clock::now();
  std::vector<std::size_t> index(n_items);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    state.epoch = epoch;
    if (needs_tilde && epoch % cfg.K_refresh == 0)
      refresh_tilde(state, data, cfg, derive_seed(derive_seed(cfg.seed, "tilde"), epoch));

    std::iota(index.begin(), index.end(), std::size_t{0});
    Rng shuffle_rng(derive_seed(derive_seed(cfg.seed, "shuffle"), epoch));
    shuffle_rng.shuffle(index.begin(), index.end());

    double loss_sum = 0.0, margin_sum = 0.0;
    const std::uint64_t epoch_seed = derive_seed(derive_seed(cfg.seed, "batch"), epoch);
    for (std::size_t b = 0, batch_no = 0; b < n_items; b += cfg.batch_size, ++batch_no) {
      const std::size_t e = std::min(n_items, b + cfg.batch_size);
      Rng rng(derive_seed(epoch_seed, batch_no));
      PolicyParams last_good = state.theta;
      try {
        StepResult step{};
        if (variant == Variant::Sft) {
          std::vector<const PromptData*> batch;
          std::vector<DecodingOrder> orders;
          for (std::size_t k = b; k < e; ++k) {
            batch.push_back(&data[index[k]]);
            orders.push_back(policy::sample_order(data[index[k]].features.length, rng));
          }
          const auto lg = sft_loss(state.theta, batch, orders, cfg.jobs);
          step = apply_step(state, lg, cfg);
        } else {
          std::vector<PairRef> batch;
          for (std::size_t k = b; k < e; ++k) batch.push_back(pairs[index[k]]);
          if (uses_diversity(variant)) {
            require_fresh_cache(state, cfg);
            step = dpo_step(state, data, batch, cfg, variant, rng);
          } else if (uses_entropy(variant)) {
            step = entropy_dpo_step(state, data, batch, cfg, rng);
          } else {
            step = dpo_step(state, data, batch, cfg, variant, rng);
          }
        }
        if (!state.theta.all_finite()) fail(ErrorKind::Numeric, "parameters became non-finite");
        loss_sum += step.loss * static_cast<double>(e - b);
        margin_sum += step.margin_mean * static_cast<double>(e - b);
      } catch (const Error& err) {
        if (err.kind() != ErrorKind::Numeric) throw;
        result.params = std::move(last_good);
        result.aborted = true;
        result.abort_reason = "epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch_no) + ": " +
                              err.what();
        return result;
      }
    }

    double kl = 0.0;
    if (variant != Variant::Sft && !kl_features.empty() && cfg.kl_samples > 0)
      kl = analysis::kl_estimate(state.theta, state.ref, kl_features, cfg.kl_samples,
                                 derive_seed(derive_seed(cfg.seed, "kl"), epoch))
               .mean;
    const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.log.push_back({epoch, loss_sum / static_cast<double>(n_items), margin_sum / static_cast<double>(n_items),
                          kl, elapsed});
  }
  result.params = std::move(state.theta);
  return result;
}

std::string metrics_csv(const std::vector<EpochLog>& log) {
  std::string s = "epoch,loss,margin_mean,kl_estimate,wallclock_s\n";
  for (const auto& e : log) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%zu,%.9f,%.9f,%.9f,%.3f\n", e.epoch, e.loss, e.margin_mean, e.kl_estimate,
                  e.wallclock_s);
    s += buf;
  }
  return s;
}

}  // namespace pepdpo::train
