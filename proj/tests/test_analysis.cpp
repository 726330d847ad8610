#include <doctest.h>

#include <cmath>
#include <algorithm>
#include <limits>
#include <numbers>

#include "pepdpo/analysis.hpp"
#include "pepdpo/error.hpp"

using namespace pepdpo;
using namespace pepdpo::analysis;

namespace {

Sequence seq(const char* s) { return Sequence::from_string(s); }

policy::PolicyParams random_params(std::uint64_t seed, double sd) {
  Rng rng(seed);
  return policy::PolicyParams::init_random(policy::PolicyConfig{}, rng, sd);
}

// Exact next-token distribution of an L = 1 prompt.
std::array<double, kNumTokens> single_site_probs(const policy::PolicyParams& p, const policy::Features& f) {
  const auto enc = policy::encode(p, f);
  std::array<double, kNumTokens> out;
  for (std::size_t t = 0; t < kNumTokens; ++t)
    out[t] = std::exp(policy::logprob(p, f, enc, Sequence({static_cast<Token>(t)}), policy::DecodingOrder::identity(1)).total);
  return out;
}

}  // namespace

TEST_CASE("diversity and recovery") {
  const std::vector<Sequence> three{seq("AAAA"), seq("AAAC"), seq("AACC")};
  CHECK(diversity(three) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  const std::vector<Sequence> same(4, seq("ACDE"));
  CHECK(diversity(same) == 0.0);
  CHECK(diversity(std::vector<Sequence>{seq("AAAA"), seq("CCCC")}) == 1.0);
  std::vector<Sequence> shuffled{three[2], three[0], three[1]};
  CHECK(diversity(shuffled) == diversity(three));
  CHECK_THROWS_AS(diversity(std::vector<Sequence>{seq("A")}), Error);

  CHECK(recovery(seq("ACDE"), seq("ACDA")) == 0.75);
  CHECK(recovery(seq("ACDE"), seq("ACDE")) == 1.0);
  CHECK(recovery(seq("AAAA"), seq("CCCC")) == 0.0);
  CHECK_THROWS_AS(recovery(seq("ACDE"), seq("ACD")), Error);

  const std::vector<Sequence> s3{seq("ACDA"), seq("CCCC"), seq("ACCE")};
  // recoveries vs ACDE: 0.75, 0.25, 0.75
  CHECK(best_of_n_recovery(seq("ACDE"), s3) == 0.75);
  CHECK(best_of_n_recovery(seq("ACDE"), std::vector<Sequence>{seq("CCCC")}) == 0.25);
  CHECK(best_of_n_recovery(seq("ACDE"), std::vector<Sequence>{seq("CCCC"), seq("ACDE")}) == 1.0);
}

TEST_CASE("mean with standard error") {
  const std::vector<double> v{1, 2, 3, 4};
  const auto m = mean_with_error(v);
  CHECK(m.mean == 2.5);
  CHECK(m.stderr_ == doctest::Approx(std::sqrt(5.0 / 3.0) / 2.0));
  CHECK(m.n == 4);

  // 128 copies of a value whose running sum rounds.
  const std::vector<double> same(128, -33.436424411240125);
  const auto c = mean_with_error(same);
  CHECK(c.mean == same[0]);
  CHECK(c.stderr_ == 0.0);
}

TEST_CASE("Vasicek estimator on synthetic samples") {
  Rng rng(3);
  for (double w : {0.5, 1.0, 7.0}) {
    std::vector<double> u(128);
    for (auto& x : u) x = 10.0 + w * rng.uniform();
    const auto h = vasicek_entropy(u);
    CHECK_FALSE(h.collapsed);
    CHECK(std::abs(h.value - std::log(w)) < 0.15);
    // Translation invariance.
    for (auto& x : u) x += 123.456;
    CHECK(std::abs(vasicek_entropy(u).value - h.value) < 1e-9);
  }
  std::vector<double> g(4000);
  for (auto& x : g) x = 2.0 * rng.normal();
  CHECK(std::abs(vasicek_entropy(g).value - 0.5 * std::log(2 * std::numbers::pi * std::numbers::e * 4.0)) < 0.05);

  CHECK(vasicek_window(128) == 11);
  const std::vector<double> flat(20, -3.0);
  CHECK(vasicek_entropy(flat).collapsed);
  CHECK(vasicek_entropy(flat).value == -std::numeric_limits<double>::infinity());
  // Heavy ties stay finite.
  std::vector<double> ties(64, 0.0);
  for (std::size_t i = 0; i < 8; ++i) ties[i] = 1.0;
  CHECK(std::isfinite(vasicek_entropy(ties).value));
}

TEST_CASE("differential entropy over decoding orders") {
  const auto p = random_params(2, 0.5);
  const auto f = policy::featurize(geometry::fold(seq("ACDEFGHIKLMN")), p.config());
  Rng rng(4);
  const auto lp = logprob_over_orders(p, f, seq("ACDEFGHIKLMN"), 64, rng);
  CHECK(lp.size() == 64);
  CHECK(!diff_entropy(p, f, seq("ACDEFGHIKLMN"), 128, rng).collapsed);
  const auto fixed = logprob_over_orders(p, f, seq("ACDEFGHIKLMN"), 32, rng, true);
  for (double v : fixed) CHECK(v == fixed.front());
  CHECK(diff_entropy(p, f, seq("ACDEFGHIKLMN"), 128, rng, true).collapsed);
  CHECK_THROWS_AS(diff_entropy(p, f, seq("ACDEFGHIKLMN"), 4, rng), Error);
}

TEST_CASE("KL estimate: zero at theta == ref and closed form on one-residue prompts") {
  const auto ref = random_params(5, 0.1);
  std::vector<policy::Features> fs{policy::featurize(geometry::fold(seq("K")), ref.config())};
  std::vector<policy::Features> longer{policy::featurize(geometry::fold(seq("ACDEFGHIKL")), ref.config())};
  const auto same = kl_estimate(ref, ref, longer, 500, 1);
  CHECK(std::abs(same.mean) <= 3.0 * same.stderr_ + 1e-15);

  auto theta = ref;
  theta.slot(theta.layout().dec2_b)[7] += 1.5;
  const auto p = single_site_probs(theta, fs[0]), q = single_site_probs(ref, fs[0]);
  double exact = 0.0;
  for (std::size_t t = 0; t < kNumTokens; ++t) exact += p[t] * std::log(p[t] / q[t]);
  CHECK(exact > 0.05);
  const auto est = kl_estimate(theta, ref, fs, 400000, 9);
  CHECK(std::abs(est.mean - exact) < 1e-3);
  CHECK(std::abs(est.mean - exact) < 4.0 * est.stderr_);
  const auto again = kl_estimate(theta, ref, fs, 400000, 10);
  CHECK(std::abs(again.mean - est.mean) < 3.0 * std::hypot(est.stderr_, again.stderr_));
}

TEST_CASE("token entropy anchors") {
  const policy::PolicyParams zero{policy::PolicyConfig{}};
  std::vector<policy::Features> fs{policy::featurize(geometry::fold(seq("ACDEFGHIKL")), zero.config())};
  CHECK(token_entropy(zero, fs, 8, 1).mean == doctest::Approx(std::log(20.0)).epsilon(1e-12));

  const auto p = random_params(6, 0.1);
  std::vector<policy::Features> one{policy::featurize(geometry::fold(seq("M")), p.config())};
  const auto probs = single_site_probs(p, one[0]);
  double h = 0.0;
  for (double v : probs) h -= v * std::log(v);
  CHECK(h > 1.0);
  const auto est = token_entropy(p, one, 200000, 3);
  CHECK(std::abs(est.mean - h) < 4.0 * est.stderr_ + 1e-9);

  // Sharp policy: almost all mass on one token.
  auto sharp = p;
  sharp.slot(sharp.layout().dec2_b)[3] += 1000.0;
  CHECK(token_entropy(sharp, one, 100, 3).mean < 1e-9);
}

TEST_CASE("token frequency KL") {
  TokenDistribution u;
  u.fill(1.0 / 20.0);
  CHECK(token_freq_kl(u, u) == 0.0);
  TokenDistribution point{};
  point[0] = 1.0;
  // Smoothed point mass against uniform, by hand.
  const double total = 1.0 + 20e-6;
  const double a = (1.0 + 1e-6) / total, b = 1e-6 / total;
  const double expect = a * std::log(a / 0.05) + 19.0 * b * std::log(b / 0.05);
  CHECK(token_freq_kl(point, u) == doctest::Approx(expect).epsilon(1e-12));
  Rng rng(2);
  for (int k = 0; k < 200; ++k) {
    TokenDistribution p, q;
    double sp = 0, sq = 0;
    for (std::size_t i = 0; i < kNumTokens; ++i) {
      p[i] = rng.uniform();
      q[i] = rng.uniform();
      sp += p[i];
      sq += q[i];
    }
    for (std::size_t i = 0; i < kNumTokens; ++i) {
      p[i] /= sp;
      q[i] /= sq;
    }
    CHECK(token_freq_kl(p, q) >= 0.0);
  }
  TokenDistribution neg = u;
  neg[2] = -0.1;
  CHECK_THROWS_AS(token_freq_kl(neg, u), Error);
  const auto freq = token_frequencies(std::vector<Sequence>{seq("AAC"), seq("CD")});
  CHECK(freq[0] == 0.4);
  CHECK(freq[1] == 0.4);
  CHECK(freq[2] == 0.2);
}

TEST_CASE("Spearman rank correlation") {
  const std::vector<double> a{1, 2, 3, 4}, b{1, 3, 2, 4}, r{4, 3, 2, 1};
  CHECK(*rank_correlation(a, b) == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(*rank_correlation(a, a) == 1.0);
  CHECK(*rank_correlation(a, r) == -1.0);
  const std::vector<double> flat{2, 2, 2, 2};
  CHECK_FALSE(rank_correlation(a, flat).has_value());
  // Average ranks for ties: (1, 2.5, 2.5, 4) against (1, 2, 3, 4).
  const std::vector<double> tied{0.1, 0.5, 0.5, 0.9};
  CHECK(*rank_correlation(tied, a) == doctest::Approx(4.5 / std::sqrt(4.5 * 5.0)));
  CHECK_THROWS_AS(rank_correlation(std::vector<double>{1}, std::vector<double>{1}), Error);
}

TEST_CASE("Pareto marking") {
  std::vector<SweepPoint> pts{{0.0, 0, "a", 0.5, 0.1}, {0.1, 0, "a", 0.4, 0.2}, {0.2, 0, "a", 0.3, 0.15}};
  mark_pareto(pts);
  CHECK(pts[0].pareto);
  CHECK(pts[1].pareto);
  CHECK_FALSE(pts[2].pareto);

  Rng rng(8);
  std::vector<SweepPoint> many;
  for (int i = 0; i < 60; ++i) many.push_back({0.0, 0, "r", rng.uniform(), rng.uniform()});
  many.push_back(many[5]);  // exact duplicate: neither dominates the other
  mark_pareto(many);
  CHECK(many[5].pareto == many.back().pareto);
  for (const auto& p : many) {
    bool dominated = false;
    for (const auto& q : many)
      dominated |= q.mean_reward >= p.mean_reward && q.mean_diversity >= p.mean_diversity &&
                   (q.mean_reward > p.mean_reward || q.mean_diversity > p.mean_diversity);
    CHECK(p.pareto == !dominated);
  }
}

TEST_CASE("evaluate: native-reproducing policy, aggregation and fixed order") {
  const auto prompts = dataset::gen_prompts(4, 10, 14, 3);
  const auto p = random_params(7, 0.5);
  EvalOptions opt;
  opt.seed = 5;
  auto rep = evaluate(p, prompts, opt);
  REQUIRE(rep.rows.size() == 4);
  double tm = 0.0;
  for (const auto& r : rep.rows) {
    tm += r.mean_tm;
    CHECK(r.samples.size() == 4);
    CHECK(r.best_of_n.size() == 4);
    CHECK(r.best_of_n.back() >= r.best_of_n.front());
  }
  CHECK(std::abs(rep.tm.mean - tm / 4.0) <= 1e-12);

  opt.fixed_order = true;
  const auto fixed = evaluate(p, prompts, opt);
  for (const auto& r : fixed.rows) CHECK(r.diversity == 0.0);

  // Rows edited to the native: recovery 1, TM 1, diversity 0.
  for (std::size_t i = 0; i < rep.rows.size(); ++i) {
    auto& r = rep.rows[i];
    r.samples.assign(4, prompts[i].native);
    r.mean_tm = geometry::reward(prompts[i].structure, prompts[i].native);
    r.recovery = recovery(prompts[i].native, prompts[i].native);
    r.diversity = diversity(r.samples);
  }
  aggregate(rep);
  CHECK(rep.tm.mean == 1.0);
  CHECK(rep.recovery.mean == 1.0);
  CHECK(rep.diversity.mean == 0.0);

  const auto csv = report_csv(rep);
  CHECK(csv.rfind("structure_id,mean_tm,diversity,recovery,best_of_n_recovery,samples\n", 0) == 0);
  CHECK(csv.find("\naggregate,1.000000000,0.000000000,1.000000000,") != std::string::npos);
  CHECK(report_json(rep, "x").find("\"label\": \"x\"") != std::string::npos);
}

TEST_CASE("sweep emits one point per temperature and policy") {
  const auto prompts = dataset::gen_prompts(3, 10, 12, 9);
  const auto a = random_params(1, 0.5), b = random_params(2, 0.5);
  const std::vector<NamedPolicy> pols{{"dpo", 0.0, &a}, {"dpo_diversity", 0.1, &b}};
  EvalOptions opt;
  opt.seed = 1;
  const auto temps = default_temperatures();
  CHECK(temps.size() == 11);
  const auto pts = sweep(pols, temps, prompts, opt);
  CHECK(pts.size() == 22);
  const auto single = sweep(std::span(pols).first(1), std::vector<double>{0.0}, prompts, opt);
  REQUIRE(single.size() == 1);
  CHECK(single[0].mean_reward == evaluate(a, prompts, opt).tm.mean);
  const auto csv = sweep_csv(pts);
  CHECK(csv.rfind("variant,alpha,temperature,mean_tm,mean_diversity,pareto_flag\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 23);
  CHECK_THROWS_AS(sweep(pols, std::vector<double>{1.5}, prompts, opt), Error);
}

TEST_CASE("bucketed TM deltas") {
  auto row = [](const char* id, double tm) {
    PromptRow r;
    r.structure_id = id;
    r.mean_tm = tm;
    return r;
  };
  auto rec = [](const char* id, double R) {
    dataset::PreferenceRecord r;
    r.structure_id = id;
    r.mean_reward = R;
    return r;
  };
  const std::vector<dataset::PreferenceRecord> recs{rec("p1", 0.1), rec("p2", 0.15), rec("p3", 0.6), rec("p4", 1.0)};
  EvalReport a, b;
  a.rows = {row("p1", 0.5), row("p2", 0.3), row("p3", 0.9), row("p4", 0.7)};
  b.rows = {row("p1", 0.2), row("p2", 0.2), row("p3", 0.8), row("p4", 0.8)};
  const std::vector<double> edges{0.0, 0.5, 1.0};
  const auto d = bucket_tm_delta(recs, a, b, edges);
  REQUIRE(d.size() == 2);
  CHECK(d[0].count == 2);
  CHECK(d[0].mean_delta == doctest::Approx(0.2));  // (0.3 + 0.1) / 2
  CHECK(d[1].count == 2);
  CHECK(d[1].mean_delta == doctest::Approx(0.0));  // (0.1 - 0.1) / 2

  const std::vector<double> whole{0.0, 1.0};
  CHECK(bucket_tm_delta(recs, a, b, whole)[0].mean_delta == doctest::Approx(0.1));
  const auto self = bucket_tm_delta(recs, a, a, edges);
  for (const auto& bk : self) CHECK(bk.mean_delta == 0.0);
  const std::vector<double> three{0.0, 0.2, 0.4, 1.0};
  CHECK(bucket_tm_delta(recs, a, b, three)[1].count == 0);
  CHECK(std::isnan(bucket_tm_delta(recs, a, b, three)[1].mean_delta));
  CHECK_THROWS_AS(bucket_tm_delta(recs, a, b, std::vector<double>{0.1, 1.0}), Error);
}
