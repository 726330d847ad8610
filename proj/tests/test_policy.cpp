#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "pepdpo/error.hpp"
#include "pepdpo/policy.hpp"

using namespace pepdpo;
using namespace pepdpo::policy;

namespace {

Sequence seq(const char* s) { return Sequence::from_string(s); }

PolicyConfig small_config() {
  PolicyConfig c;
  c.hidden = 4;
  c.neighbors = 3;
  c.embed = 2;
  c.rbf = 4;
  return c;
}

// values[i] = 0.3 sin(0.7 i + 0.1): fixed, nonzero, no RNG involved.
PolicyParams sine_params(const PolicyConfig& c) {
  PolicyParams p(c);
  auto v = p.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.3 * std::sin(0.7 * static_cast<double>(i) + 0.1);
  return p;
}

PolicyParams random_params(const PolicyConfig& c, std::uint64_t seed, double sd) {
  Rng rng(seed);
  auto p = PolicyParams::init_random(c, rng, sd);
  for (double& v : p.values()) v += 0.1 * sd * rng.normal();  // nonzero biases too
  return p;
}

}  // namespace

TEST_CASE("rbf spacing and peaks") {
  CHECK(rbf(0.0, 0, 16) == 1.0);
  CHECK(rbf(20.0, 15, 16) == 1.0);
  CHECK(rbf(4.0, 3, 16) == doctest::Approx(std::exp(-std::pow((4.0 - 4.0) / (20.0 / 15), 2))));
  CHECK(rbf(20.0 / 15, 0, 16) == doctest::Approx(std::exp(-1.0)));
}

TEST_CASE("features of a folded 5-mer match the oracle") {
  const auto f = featurize(geometry::fold(seq("ACDEF")), PolicyConfig{});
  CHECK(f.length == 5);
  CHECK(f.dim == 128);
  CHECK_FALSE(f.self_only);
  CHECK(f.neighbors[0] == std::vector<std::uint16_t>{1, 2, 3, 4});
  // Residue 3 has two neighbours at 3.8 up to rounding; only the set is fixed.
  CHECK(std::set<std::uint16_t>(f.neighbors[3].begin(), f.neighbors[3].end()) == std::set<std::uint16_t>{0, 1, 2, 4});
  CHECK(f.neighbors[4] == std::vector<std::uint16_t>{3, 2, 1, 0});
  auto at = [&](std::size_t i, std::size_t c) { return f.values[i * f.dim + c]; };
  CHECK(at(0, 0) == doctest::Approx(2.967857677932107e-04).epsilon(1e-9));
  CHECK(at(0, 3) == doctest::Approx(9.777512371933363e-01).epsilon(1e-9));
  CHECK(at(2, 17) == doctest::Approx(3.263075599289602e-02).epsilon(1e-9));
  CHECK(at(4, 50) == doctest::Approx(1.213914637827747e-25).epsilon(1e-9));
  CHECK(at(1, 2) == doctest::Approx(4.855368951540795e-01).epsilon(1e-9));
  // Slots beyond the available neighbours stay zero.
  for (std::size_t c = 4 * 16; c < 128; ++c) CHECK(at(0, c) == 0.0);
}

TEST_CASE("single-residue structures get self-only features") {
  const auto f = featurize(geometry::fold(seq("A")), PolicyConfig{});
  CHECK(f.self_only);
  CHECK(f.values[0] == 1.0);
  CHECK(f.neighbors[0].empty());
  CHECK_THROWS_AS(featurize(geometry::Structure{}, PolicyConfig{}), Error);
}

TEST_CASE("logprob matches a direct forward-pass oracle") {
  const auto p = sine_params(small_config());
  const auto x = geometry::fold(seq("ACDEF"));
  const auto y = seq("ACDEF");
  const auto a = logprob(p, x, y, DecodingOrder::identity(5));
  const double expect_a[5] = {-3.252739864612472, -3.088623459014883, -2.883170021505843, -2.733007514044373,
                              -2.708759710243506};
  for (int i = 0; i < 5; ++i) CHECK(a.per_position[i] == doctest::Approx(expect_a[i]).epsilon(1e-10));
  CHECK(a.total == doctest::Approx(-14.666300569421075).epsilon(1e-10));

  const auto b = logprob(p, x, y, DecodingOrder{{3, 0, 4, 1, 2}});
  const double expect_b[5] = {-3.248026254359754, -3.088623459014883, -2.883170021505843, -2.733007514044373,
                              -2.711175023931904};
  for (int i = 0; i < 5; ++i) CHECK(b.per_position[i] == doctest::Approx(expect_b[i]).epsilon(1e-10));
  CHECK(b.total == doctest::Approx(-14.664002272856756).epsilon(1e-10));
}

TEST_CASE("sequence probabilities sum to one for L <= 2") {
  const auto p = random_params(PolicyConfig{}, 3, 0.5);
  for (const char* native : {"K", "KW"}) {
    const auto x = geometry::fold(seq(native));
    const auto f = featurize(x, p.config());
    const auto enc = encode(p, f);
    const std::size_t L = x.size();
    std::vector<DecodingOrder> orders{DecodingOrder::identity(L)};
    if (L == 2) orders.push_back(DecodingOrder{{1, 0}});
    for (const auto& order : orders) {
      double total = 0.0;
      std::vector<Token> t(L, 0);
      const std::size_t n = L == 1 ? 20 : 400;
      for (std::size_t k = 0; k < n; ++k) {
        t[0] = static_cast<Token>(k % 20);
        if (L == 2) t[1] = static_cast<Token>(k / 20);
        total += std::exp(logprob(p, f, enc, Sequence(t), order).total);
      }
      CHECK(std::abs(total - 1.0) < 1e-8);
    }
  }
}

TEST_CASE("sample_order is uniform over the six permutations of length 3") {
  Rng rng(2024);
  std::map<std::vector<std::uint16_t>, int> counts;
  const int n = 60000;
  for (int i = 0; i < n; ++i) ++counts[sample_order(3, rng).perm];
  REQUIRE(counts.size() == 6);
  double chi2 = 0.0;
  for (const auto& [perm, c] : counts) chi2 += std::pow(c - n / 6.0, 2) / (n / 6.0);
  CHECK(chi2 < 20.515);  // chi-square, 5 dof, p = 0.001
}

TEST_CASE("every order of a 4-mer is reachable and yields a valid log-probability") {
  Rng rng(8);
  std::set<std::vector<std::uint16_t>> seen;
  for (int i = 0; i < 2000; ++i) {
    const auto o = sample_order(4, rng);
    CHECK(o.is_permutation());
    seen.insert(o.perm);
  }
  CHECK(seen.size() == 24);

  const auto p = random_params(PolicyConfig{}, 4, 0.3);
  const auto x = geometry::fold(seq("ACDE"));
  const auto y = seq("WYKL");
  std::vector<std::uint16_t> perm{0, 1, 2, 3};
  std::set<double> totals;
  do {
    const auto r = logprob(p, x, y, DecodingOrder{perm});
    CHECK(r.total < 0.0);
    double s = 0.0;
    for (double v : r.per_position) s += v;
    CHECK(r.total == s);
    // The first decoded position sees no context, so it equals the
    // identity-order value whenever that position is also decoded first there.
    if (perm[0] == 0) CHECK(r.per_position[0] == logprob(p, x, y, DecodingOrder::identity(4)).per_position[0]);
    totals.insert(r.total);
  } while (std::next_permutation(perm.begin(), perm.end()));
  CHECK(totals.size() > 1);  // the order matters
}

TEST_CASE("very high temperature samples tokens uniformly") {
  const auto p = random_params(PolicyConfig{}, 6, 1.0);
  const auto f = featurize(geometry::fold(seq("M")), p.config());
  const auto enc = encode(p, f);
  Rng rng(77);
  std::array<int, 20> counts{};
  const int n = 20000;
  for (int i = 0; i < n; ++i) ++counts[sample(p, f, enc, 1e6, rng, false).sequence[0]];
  double chi2 = 0.0;
  for (int c : counts) chi2 += std::pow(c - n / 20.0, 2) / (n / 20.0);
  CHECK(chi2 < 43.82);  // chi-square, 19 dof, p = 0.001
}

TEST_CASE("temperature zero takes the argmax") {
  const auto p = random_params(PolicyConfig{}, 12, 1.0);
  const auto x = geometry::fold(seq("ACDEFGHIKLMN"));
  Rng r1(1), r2(2);
  const auto a = sample(p, x, 0.0, r1, true), b = sample(p, x, 0.0, r2, true);
  CHECK(a.sequence == b.sequence);
  CHECK(a.logprob.total == doctest::Approx(logprob(p, x, a.sequence, DecodingOrder::identity(12)).total));
  Rng r3(3);
  CHECK_THROWS_AS(sample(p, x, -1.0, r3, false), Error);
}

TEST_CASE("analytic gradient matches central differences") {
  const auto c = small_config();
  auto p = random_params(c, 21, 0.5);
  const auto x = geometry::fold(seq("ACDEFGHI"));
  const auto y = seq("KLMNPQRS");
  const DecodingOrder order{{5, 2, 7, 0, 1, 6, 3, 4}};
  const auto g = grad_logprob(p, x, y, order);
  const double h = 1e-4;
  double worst = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double v = p.values()[i];
    p.values()[i] = v + h;
    const double up = logprob(p, x, y, order).total;
    p.values()[i] = v - h;
    const double dn = logprob(p, x, y, order).total;
    p.values()[i] = v;
    const double fd = (up - dn) / (2 * h);
    worst = std::max(worst, std::abs(fd - g.values()[i]) / std::max(1e-3, std::abs(fd) + std::abs(g.values()[i])));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("accumulate_grad sums weighted terms") {
  const auto c = small_config();
  const auto p = random_params(c, 31, 0.5);
  const auto x = geometry::fold(seq("ACDEFG"));
  const auto f = featurize(x, c);
  const auto enc = encode(p, f);
  const auto y1 = seq("AAAAAA"), y2 = seq("CDCDCD");
  const DecodingOrder o1 = DecodingOrder::identity(6), o2{{5, 4, 3, 2, 1, 0}};
  const GradTerm terms[2] = {{&y1, &o1, 0.5}, {&y2, &o2, -2.0}};
  Gradient g(c);
  accumulate_grad(p, f, enc, terms, g);
  const auto g1 = grad_logprob(p, x, y1, o1), g2 = grad_logprob(p, x, y2, o2);
  for (std::size_t i = 0; i < g.size(); ++i)
    CHECK(g.values()[i] == doctest::Approx(0.5 * g1.values()[i] - 2.0 * g2.values()[i]).epsilon(1e-12).scale(1e-12));
  Gradient wrong(PolicyConfig{});
  CHECK_THROWS_AS(accumulate_grad(p, f, enc, terms, wrong), Error);
}

TEST_CASE("length mismatches are rejected") {
  const auto p = sine_params(small_config());
  const auto x = geometry::fold(seq("ACDEF"));
  CHECK_THROWS_AS(logprob(p, x, seq("ACDE"), DecodingOrder::identity(5)), Error);
  CHECK_THROWS_AS(logprob(p, x, seq("ACDEF"), DecodingOrder::identity(4)), Error);
}

TEST_CASE("checkpoint round trip stores float32 values") {
  const auto dir = std::filesystem::temp_directory_path() / "pepdpo_test_ckpt";
  std::filesystem::create_directories(dir);
  const auto path = dir / "p.ckpt";
  const auto p = random_params(PolicyConfig{}, 41, 0.2);
  save_checkpoint(p, path);
  CHECK(std::filesystem::file_size(path) == 28 + 4 * p.size());
  const auto q = load_checkpoint(path);
  CHECK(q.config() == p.config());
  for (std::size_t i = 0; i < p.size(); ++i) CHECK(q.values()[i] == static_cast<double>(static_cast<float>(p.values()[i])));
  save_checkpoint(q, dir / "q.ckpt");
  CHECK(load_checkpoint(dir / "q.ckpt") == q);

  {
    std::ofstream bad(dir / "bad.ckpt", std::ios::binary);
    bad << "nope";
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "bad.ckpt"), Error);
  std::filesystem::resize_file(path, 40);
  CHECK_THROWS_AS(load_checkpoint(path), Error);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), Error);
  std::filesystem::remove_all(dir);
}
