#include "pepdpo/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "pepdpo/error.hpp"

namespace pepdpo::config {
namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, const char* expected) {
  fail(ErrorKind::Config, "config key '" + std::string(key) + "': cannot parse '" + std::string(value) +
                              "' as " + expected);
}

double parse_double(std::string_view key, std::string_view v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size() || !std::isfinite(out)) bad_value(key, v, "a finite number");
  return out;
}

std::uint64_t parse_u64(std::string_view key, std::string_view v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) bad_value(key, v, "a non-negative integer");
  return out;
}

bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad_value(key, v, "true/false");
}

std::vector<double> parse_list(std::string_view key, std::string_view v) {
  std::vector<double> out;
  while (!v.empty()) {
    const auto comma = v.find(',');
    out.push_back(parse_double(key, trim(v.substr(0, comma))));
    if (comma == std::string_view::npos) break;
    v.remove_prefix(comma + 1);
  }
  if (out.empty()) bad_value(key, v, "a comma-separated list");
  return out;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_list(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + fmt(v[i]);
  return s;
}

struct Key {
  std::string_view name;
  std::function<void(RunConfig&, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define SIZE_KEY(name, field)                                                             \
  Key{name, [](RunConfig& c, std::string_view v) { c.field = parse_u64(name, v); },       \
      [](const RunConfig& c) { return std::to_string(c.field); }}
#define DOUBLE_KEY(name, field)                                                           \
  Key{name, [](RunConfig& c, std::string_view v) { c.field = parse_double(name, v); },    \
      [](const RunConfig& c) { return fmt(c.field); }}
#define BOOL_KEY(name, field)                                                             \
  Key{name, [](RunConfig& c, std::string_view v) { c.field = parse_bool(name, v); },      \
      [](const RunConfig& c) { return std::string(c.field ? "true" : "false"); }}

const std::vector<Key>& keys() {
  static const std::vector<Key> table = {
      SIZE_KEY("seed", seed),
      SIZE_KEY("n_prompts", n_prompts),
      DOUBLE_KEY("test_fraction", test_fraction),
      SIZE_KEY("min_length", min_length),
      SIZE_KEY("max_length", max_length),
      DOUBLE_KEY("identity_threshold", identity_threshold),
      SIZE_KEY("pretrain_prompts", pretrain_prompts),
      SIZE_KEY("pretrain_epochs", pretrain_epochs),
      DOUBLE_KEY("pretrain_learning_rate", pretrain_learning_rate),
      SIZE_KEY("K", K),
      DOUBLE_KEY("gen_temperature", gen_temperature),
      SIZE_KEY("sft_epochs", sft_epochs),
      DOUBLE_KEY("sft_learning_rate", sft_learning_rate),
      Key{"variant",
          [](RunConfig& c, std::string_view v) {
            train::parse_variant(v);
            c.variant = std::string(v);
          },
          [](const RunConfig& c) { return c.variant; }},
      Key{"beta", [](RunConfig& c, std::string_view v) { c.beta = parse_double("beta", v); },
          [](const RunConfig& c) { return c.beta ? fmt(*c.beta) : std::string("preset"); }},
      Key{"alpha", [](RunConfig& c, std::string_view v) { c.alpha = parse_double("alpha", v); },
          [](const RunConfig& c) { return c.alpha ? fmt(*c.alpha) : std::string("grid"); }},
      Key{"alpha_grid", [](RunConfig& c, std::string_view v) { c.alpha_grid = parse_list("alpha_grid", v); },
          [](const RunConfig& c) { return fmt_list(c.alpha_grid); }},
      BOOL_KEY("reward_scaled", train.reward_scaled),
      SIZE_KEY("M", train.M),
      SIZE_KEY("K_refresh", train.K_refresh),
      SIZE_KEY("epochs", train.epochs),
      SIZE_KEY("batch_size", train.batch_size),
      DOUBLE_KEY("learning_rate", train.learning_rate),
      DOUBLE_KEY("adam_beta1", train.adam_beta1),
      DOUBLE_KEY("adam_beta2", train.adam_beta2),
      DOUBLE_KEY("adam_eps", train.adam_eps),
      DOUBLE_KEY("tilde_temperature", train.tilde_temperature),
      Key{"penalty_sign",
          [](RunConfig& c, std::string_view v) {
            if (v == "standard") c.train.penalty_sign = train::PenaltySign::Standard;
            else if (v == "flipped") c.train.penalty_sign = train::PenaltySign::Flipped;
            else bad_value("penalty_sign", v, "standard/flipped");
          },
          [](const RunConfig& c) {
            return std::string(c.train.penalty_sign == train::PenaltySign::Standard ? "standard" : "flipped");
          }},
      SIZE_KEY("n_orders", train.n_orders),
      SIZE_KEY("kl_prompts", train.kl_prompts),
      SIZE_KEY("kl_samples", train.kl_samples),
      SIZE_KEY("eval_samples", eval_samples),
      DOUBLE_KEY("eval_temperature", eval_temperature),
      BOOL_KEY("fixed_order", fixed_order),
      SIZE_KEY("entropy_orders", entropy_orders),
      SIZE_KEY("token_entropy_samples", token_entropy_samples),
      Key{"bucket_edges",
          [](RunConfig& c, std::string_view v) { c.bucket_edges = parse_list("bucket_edges", v); },
          [](const RunConfig& c) { return fmt_list(c.bucket_edges); }},
      SIZE_KEY("jobs", jobs),
  };
  return table;
}

#undef SIZE_KEY
#undef DOUBLE_KEY
#undef BOOL_KEY

}  // namespace

std::vector<std::string_view> config_keys() {
  std::vector<std::string_view> out;
  for (const auto& k : keys()) out.push_back(k.name);
  return out;
}

void set_value(RunConfig& cfg, std::string_view key, std::string_view value) {
  for (const auto& k : keys())
    if (k.name == key) return k.set(cfg, trim(value));
  fail(ErrorKind::Config, "unknown config key '" + std::string(key) + "'");
}

RunConfig parse_config(std::string_view text) {
  RunConfig cfg;
  std::set<std::string, std::less<>> seen;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      fail(ErrorKind::Config, "config line " + std::to_string(line_no) + ": expected key = value");
    const auto key = trim(line.substr(0, eq));
    if (!seen.insert(std::string(key)).second)
      fail(ErrorKind::Config, "config line " + std::to_string(line_no) + ": duplicate key '" + std::string(key) + "'");
    try {
      set_value(cfg, key, line.substr(eq + 1));
    } catch (const Error& e) {
      fail(ErrorKind::Config, "config line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Config, "cannot open config file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string canonical_text(const RunConfig& cfg) {
  std::string s;
  for (const auto& k : keys()) s += std::string(k.name) + "=" + k.get(cfg) + "\n";
  return s;
}

train::TrainConfig train_config(const RunConfig& cfg, train::Variant v, double alpha) {
  train::TrainConfig t = cfg.train;
  t.alpha = alpha;
  t.beta = cfg.beta ? *cfg.beta : train::preset_beta(v, alpha);
  t.jobs = cfg.jobs;
  t.seed = cfg.seed;
  return t;
}

void validate(const RunConfig& cfg) {
  auto bad = [](const std::string& why) { fail(ErrorKind::Config, why); };
  if (cfg.n_prompts == 0) bad("n_prompts must be > 0");
  if (cfg.min_length < 1 || cfg.min_length > cfg.max_length) bad("need 1 <= min_length <= max_length");
  if (!(cfg.test_fraction > 0.0 && cfg.test_fraction < 1.0)) bad("test_fraction must lie in (0, 1)");
  if (!(cfg.identity_threshold > 0.0 && cfg.identity_threshold <= 1.0)) bad("identity_threshold must lie in (0, 1]");
  if (cfg.K < 2) bad("K must be >= 2");
  if (!(cfg.gen_temperature >= 0.0)) bad("gen_temperature must be >= 0");
  if (cfg.eval_samples < 2) bad("eval_samples must be >= 2");
  if (!(cfg.eval_temperature >= 0.0 && cfg.eval_temperature <= 1.0)) bad("eval_temperature must lie in [0, 1]");
  if (cfg.entropy_orders < 8) bad("entropy_orders must be >= 8");
  if (cfg.bucket_edges.size() < 2) bad("bucket_edges needs at least two edges");
  for (std::size_t i = 1; i < cfg.bucket_edges.size(); ++i)
    if (!(cfg.bucket_edges[i] > cfg.bucket_edges[i - 1])) bad("bucket_edges must be strictly increasing");
  for (double a : cfg.alpha_grid)
    if (!(a >= 0.0)) bad("alpha_grid entries must be >= 0");
  if (cfg.jobs == 0) bad("jobs must be >= 1");
  const auto v = train::parse_variant(cfg.variant);
  if (cfg.beta && !(*cfg.beta > 0.0)) bad("beta must be > 0");
  train_config(cfg, v, cfg.alpha.value_or(0.0)).validate(v);
}

}  // namespace pepdpo::config
