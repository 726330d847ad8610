#include "pepdpo/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <json.hpp>
#include <limits>
#include <map>
#include <numeric>

#include "pepdpo/error.hpp"
#include "pepdpo/geometry.hpp"
#include "pepdpo/parallel.hpp"
#include "pepdpo/rng.hpp"

namespace pepdpo::analysis {
namespace {

// psi(k) for integer k >= 1.
double digamma_int(std::size_t k) {
  double s = -0.57721566490153286061;
  for (std::size_t j = 1; j < k; ++j) s += 1.0 / static_cast<double>(j);
  return s;
}

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> rank(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[idx[k]] = r;
    i = j + 1;
  }
  return rank;
}

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9f", v);
  return buf;
}

}  // namespace

double diversity(std::span<const Sequence> samples) {
  if (samples.size() < 2) fail(ErrorKind::InvalidInput, "diversity: needs at least two samples");
  double sum = 0.0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < samples.size(); ++a)
    for (std::size_t b = a + 1; b < samples.size(); ++b, ++pairs) sum += hamming_fraction(samples[a], samples[b]);
  return sum / static_cast<double>(pairs);
}

double recovery(const Sequence& native, const Sequence& sample) {
  return 1.0 - hamming_fraction(native, sample);
}

double best_of_n_recovery(const Sequence& native, std::span<const Sequence> samples) {
  if (samples.empty()) fail(ErrorKind::InvalidInput, "best_of_n_recovery: no samples");
  double best = 0.0;
  for (const auto& s : samples) best = std::max(best, recovery(native, s));
  return best;
}

MeanWithError mean_with_error(std::span<const double> values) {
  MeanWithError out;
  out.n = values.size();
  if (values.empty()) return out;
  // Shifted by the first value so identical inputs give exactly zero spread.
  const double v0 = values[0];
  double s = 0.0;
  for (double v : values) s += v - v0;
  const double shift = s / static_cast<double>(values.size());
  out.mean = v0 + shift;
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - v0 - shift) * (v - v0 - shift);
    out.stderr_ = std::sqrt(ss / static_cast<double>(values.size() - 1)) /
                  std::sqrt(static_cast<double>(values.size()));
  }
  return out;
}

MeanWithError kl_estimate(const policy::PolicyParams& theta, const policy::PolicyParams& ref,
                          std::span<const policy::Features> prompts, std::size_t n_samples,
                          std::uint64_t seed) {
  if (n_samples == 0) fail(ErrorKind::InvalidInput, "kl_estimate: n_samples must be >= 1");
  std::vector<double> terms;
  terms.reserve(prompts.size() * n_samples);
  for (std::size_t p = 0; p < prompts.size(); ++p) {
    Rng rng(derive_seed(seed, p));
    const auto enc_t = policy::encode(theta, prompts[p]);
    const auto enc_r = policy::encode(ref, prompts[p]);
    for (std::size_t s = 0; s < n_samples; ++s) {
      auto smp = policy::sample(theta, prompts[p], enc_t, 1.0, rng, false);
      const auto lr = policy::logprob(ref, prompts[p], enc_r, smp.sequence, smp.logprob.order);
      terms.push_back(smp.logprob.total - lr.total);
    }
  }
  return mean_with_error(terms);
}

std::size_t vasicek_window(std::size_t n) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n)))));
}

EntropyEstimate vasicek_entropy(std::span<const double> samples) {
  std::vector<double> x(samples.begin(), samples.end());
  std::sort(x.begin(), x.end());
  const std::size_t n = x.size();
  if (n < 2 || x.front() == x.back())
    return {-std::numeric_limits<double>::infinity(), true};
  const std::size_t m = std::min(vasicek_window(n), n - 1);

  // Zero-width windows (heavy ties) are widened to the narrowest nonzero one.
  std::vector<double> width(n);
  double min_pos = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    const double hi = x[std::min(i + m, n - 1)];
    const double lo = x[i >= m ? i - m : 0];
    width[i] = hi - lo;
    if (width[i] > 0.0) min_pos = std::min(min_pos, width[i]);
  }
  const double nd = static_cast<double>(n), md = static_cast<double>(m);
  double h = 0.0;
  for (double w : width) h += std::log(nd / (2.0 * md) * (w > 0.0 ? w : min_pos));
  h /= nd;

  double tail = 0.0;
  for (std::size_t i = 1; i <= m; ++i) tail += digamma_int(i + m - 1);
  h += -std::log(nd) + std::log(2.0 * md) - (1.0 - 2.0 * md / nd) * digamma_int(2 * m) +
       digamma_int(n + 1) - 2.0 / nd * tail;
  return {h, false};
}

std::vector<double> logprob_over_orders(const policy::PolicyParams& pi, const policy::Features& f,
                                        const Sequence& y, std::size_t n_orders, Rng& rng,
                                        bool fixed_order) {
  const auto enc = policy::encode(pi, f);
  std::vector<double> out;
  out.reserve(n_orders);
  for (std::size_t k = 0; k < n_orders; ++k) {
    const auto order = fixed_order ? policy::DecodingOrder::identity(f.length)
                                   : policy::sample_order(f.length, rng);
    out.push_back(policy::logprob(pi, f, enc, y, order).total);
  }
  return out;
}

EntropyEstimate diff_entropy(const policy::PolicyParams& pi, const policy::Features& f,
                             const Sequence& y, std::size_t n_orders, Rng& rng, bool fixed_order) {
  if (n_orders < 8) fail(ErrorKind::InvalidInput, "diff_entropy: n_orders must be >= 8");
  const auto s = logprob_over_orders(pi, f, y, n_orders, rng, fixed_order);
  return vasicek_entropy(s);
}

MeanWithError token_entropy(const policy::PolicyParams& pi, std::span<const policy::Features> prompts,
                            std::size_t samples_per_prompt, std::uint64_t seed) {
  if (prompts.empty()) fail(ErrorKind::InvalidInput, "token_entropy: no prompts");
  std::vector<double> per_token;
  for (std::size_t p = 0; p < prompts.size(); ++p) {
    Rng rng(derive_seed(seed, p));
    const auto enc = policy::encode(pi, prompts[p]);
    for (std::size_t s = 0; s < samples_per_prompt; ++s) {
      const auto smp = policy::sample(pi, prompts[p], enc, 1.0, rng, false);
      per_token.push_back(-smp.logprob.total / static_cast<double>(prompts[p].length));
    }
  }
  return mean_with_error(per_token);
}

TokenDistribution token_frequencies(std::span<const Sequence> seqs) {
  TokenDistribution d{};
  double total = 0.0;
  for (const auto& s : seqs)
    for (Token t : s.tokens()) {
      d[t] += 1.0;
      total += 1.0;
    }
  if (total > 0.0)
    for (double& v : d) v /= total;
  return d;
}

double token_freq_kl(const TokenDistribution& p, const TokenDistribution& q) {
  constexpr double kSmooth = 1e-6;
  auto smooth = [](const TokenDistribution& d, const char* name) {
    TokenDistribution s;
    double total = 0.0;
    for (std::size_t i = 0; i < kNumTokens; ++i) {
      if (!(d[i] >= 0.0)) fail(ErrorKind::InvalidInput, std::string("token_freq_kl: negative entry in ") + name);
      s[i] = d[i] + kSmooth;
      total += s[i];
    }
    for (double& v : s) v /= total;
    return s;
  };
  const auto ps = smooth(p, "p"), qs = smooth(q, "q");
  double kl = 0.0;
  for (std::size_t i = 0; i < kNumTokens; ++i) kl += ps[i] * std::log(ps[i] / qs[i]);
  return std::max(0.0, kl);
}

std::optional<double> rank_correlation(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) fail(ErrorKind::Dimension, "rank_correlation: inputs differ in length");
  if (a.size() < 2) fail(ErrorKind::InvalidInput, "rank_correlation: needs at least two values");
  const auto ra = average_ranks(a), rb = average_ranks(b);
  const double mean = 0.5 * static_cast<double>(a.size() + 1);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (ra[i] - mean) * (rb[i] - mean);
    saa += (ra[i] - mean) * (ra[i] - mean);
    sbb += (rb[i] - mean) * (rb[i] - mean);
  }
  if (saa == 0.0 || sbb == 0.0) return std::nullopt;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

void aggregate(EvalReport& report) {
  std::vector<double> tm, div, rec;
  for (const auto& r : report.rows) {
    tm.push_back(r.mean_tm);
    div.push_back(r.diversity);
    rec.push_back(r.recovery);
  }
  report.tm = mean_with_error(tm);
  report.diversity = mean_with_error(div);
  report.recovery = mean_with_error(rec);
  report.best_of_n_mean.clear();
  if (report.rows.empty()) return;
  const std::size_t n = report.rows.front().best_of_n.size();
  report.best_of_n_mean.assign(n, 0.0);
  for (const auto& r : report.rows)
    for (std::size_t k = 0; k < n; ++k) report.best_of_n_mean[k] += r.best_of_n[k];
  for (double& v : report.best_of_n_mean) v /= static_cast<double>(report.rows.size());
}

EvalReport evaluate(const policy::PolicyParams& pi, const std::vector<dataset::Prompt>& prompts,
                    const EvalOptions& opt) {
  if (prompts.empty()) fail(ErrorKind::InvalidInput, "evaluate: no prompts");
  if (opt.n_samples < 2) fail(ErrorKind::InvalidInput, "evaluate: n_samples must be >= 2 for diversity");
  EvalReport report;
  report.rows.resize(prompts.size());
  parallel_for(prompts.size(), opt.jobs, [&](std::size_t i) {
    const auto& p = prompts[i];
    Rng rng(derive_seed(opt.seed, p.id()));
    const auto f = policy::featurize(p.structure, pi.config());
    const auto enc = policy::encode(pi, f);
    PromptRow row;
    row.structure_id = p.id();
    double tm = 0.0, rec = 0.0;
    for (std::size_t s = 0; s < opt.n_samples; ++s) {
      auto smp = policy::sample(pi, f, enc, opt.temperature, rng, opt.fixed_order);
      tm += geometry::reward(p.structure, smp.sequence);
      rec += recovery(p.native, smp.sequence);
      row.samples.push_back(std::move(smp.sequence));
      row.best_of_n.push_back(best_of_n_recovery(p.native, row.samples));
    }
    row.mean_tm = tm / static_cast<double>(opt.n_samples);
    row.recovery = rec / static_cast<double>(opt.n_samples);
    row.diversity = diversity(row.samples);
    report.rows[i] = std::move(row);
  });
  aggregate(report);
  return report;
}

void mark_pareto(std::vector<SweepPoint>& points) {
  for (auto& p : points) {
    p.pareto = true;
    for (const auto& q : points) {
      const bool geq = q.mean_reward >= p.mean_reward && q.mean_diversity >= p.mean_diversity;
      const bool gt = q.mean_reward > p.mean_reward || q.mean_diversity > p.mean_diversity;
      if (geq && gt) {
        p.pareto = false;
        break;
      }
    }
  }
}

std::vector<SweepPoint> sweep(std::span<const NamedPolicy> policies, std::span<const double> temperatures,
                              const std::vector<dataset::Prompt>& prompts, const EvalOptions& base) {
  if (temperatures.empty()) fail(ErrorKind::InvalidInput, "sweep: no temperatures");
  std::vector<SweepPoint> points;
  for (const auto& pol : policies)
    for (double t : temperatures) {
      if (!(t >= 0.0 && t <= 1.0)) fail(ErrorKind::InvalidInput, "sweep: temperatures must lie in [0, 1]");
      EvalOptions opt = base;
      opt.temperature = t;
      const auto rep = evaluate(*pol.params, prompts, opt);
      points.push_back({t, pol.alpha, pol.variant, rep.tm.mean, rep.diversity.mean, rep.tm.stderr_,
                        rep.diversity.stderr_, false});
    }
  mark_pareto(points);
  return points;
}

std::vector<double> default_temperatures() {
  std::vector<double> t;
  for (int i = 0; i <= 10; ++i) t.push_back(static_cast<double>(i) / 10.0);
  return t;
}

std::vector<BucketDelta> bucket_tm_delta(const std::vector<dataset::PreferenceRecord>& records,
                                         const EvalReport& a, const EvalReport& b,
                                         std::span<const double> edges) {
  if (edges.size() < 2) fail(ErrorKind::InvalidInput, "bucket_tm_delta: need at least two edges");
  if (edges.front() > 0.0 || edges.back() < 1.0)
    fail(ErrorKind::InvalidInput, "bucket_tm_delta: buckets must cover [0, 1]");
  for (std::size_t i = 1; i < edges.size(); ++i)
    if (!(edges[i] > edges[i - 1])) fail(ErrorKind::InvalidInput, "bucket_tm_delta: edges must increase");
  if (a.rows.size() != b.rows.size()) fail(ErrorKind::Dimension, "bucket_tm_delta: reports differ in size");

  std::map<std::string, double> R;
  for (const auto& r : records) R[r.structure_id] = r.mean_reward;

  std::vector<BucketDelta> out;
  for (std::size_t k = 0; k + 1 < edges.size(); ++k) out.push_back({edges[k], edges[k + 1], 0, 0.0});
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    if (a.rows[i].structure_id != b.rows[i].structure_id)
      fail(ErrorKind::Dimension, "bucket_tm_delta: reports are not aligned by prompt");
    const auto it = R.find(a.rows[i].structure_id);
    if (it == R.end()) fail(ErrorKind::Data, "bucket_tm_delta: no record for " + a.rows[i].structure_id);
    for (std::size_t k = 0; k < out.size(); ++k) {
      const bool last = k + 1 == out.size();
      if (it->second >= out[k].lo && (it->second < out[k].hi || (last && it->second <= out[k].hi))) {
        out[k].count += 1;
        out[k].mean_delta += a.rows[i].mean_tm - b.rows[i].mean_tm;
        break;
      }
    }
  }
  for (auto& bkt : out)
    bkt.mean_delta = bkt.count ? bkt.mean_delta / static_cast<double>(bkt.count)
                               : std::numeric_limits<double>::quiet_NaN();
  return out;
}

std::string report_csv(const EvalReport& r) {
  std::string s = "structure_id,mean_tm,diversity,recovery,best_of_n_recovery,samples\n";
  for (const auto& row : r.rows) {
    std::string samples;
    for (std::size_t k = 0; k < row.samples.size(); ++k) samples += (k ? ";" : "") + row.samples[k].str();
    s += row.structure_id + "," + num(row.mean_tm) + "," + num(row.diversity) + "," + num(row.recovery) +
         "," + num(row.best_of_n.empty() ? 0.0 : row.best_of_n.back()) + "," + samples + "\n";
  }
  s += "aggregate," + num(r.tm.mean) + "," + num(r.diversity.mean) + "," + num(r.recovery.mean) + "," +
       num(r.best_of_n_mean.empty() ? 0.0 : r.best_of_n_mean.back()) + ",\n";
  return s;
}

std::string report_json(const EvalReport& r, const std::string& label) {
  nlohmann::ordered_json j;
  j["label"] = label;
  j["n_prompts"] = r.rows.size();
  auto stat = [](const MeanWithError& m) {
    return nlohmann::ordered_json{{"mean", m.mean}, {"stderr", m.stderr_}, {"n", m.n}};
  };
  j["tm"] = stat(r.tm);
  j["diversity"] = stat(r.diversity);
  j["recovery"] = stat(r.recovery);
  j["best_of_n_recovery"] = r.best_of_n_mean;
  auto rows = nlohmann::ordered_json::array();
  for (const auto& row : r.rows)
    rows.push_back({{"structure_id", row.structure_id}, {"mean_tm", row.mean_tm}});
  j["rows"] = rows;
  return j.dump(2) + "\n";
}

std::string sweep_csv(const std::vector<SweepPoint>& points) {
  std::string s = "variant,alpha,temperature,mean_tm,mean_diversity,pareto_flag\n";
  for (const auto& p : points) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%s,%.3f,%.2f,%.9f,%.9f,%d\n", p.variant.c_str(), p.alpha, p.temperature,
                  p.mean_reward, p.mean_diversity, p.pareto ? 1 : 0);
    s += buf;
  }
  return s;
}

}  // namespace pepdpo::analysis
