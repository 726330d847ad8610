#include "pepdpo/cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <optional>
#include <ostream>

#include "pepdpo/config.hpp"
#include "pepdpo/error.hpp"
#include "pepdpo/manifest.hpp"
#include "pepdpo/pipeline.hpp"

namespace pepdpo::cli {
namespace {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = "run";
  std::optional<std::string> variant;
  std::optional<double> alpha;
  std::optional<double> beta;
  std::optional<std::size_t> jobs;
  bool fixed_order = false;
};

struct Context {
  config::RunConfig cfg;
  fs::path dir;
  manifest::RunManifest manifest;
  Clock::time_point start = Clock::now();
  std::ostream& out;
};

config::RunConfig resolve_config(const Options& o) {
  config::RunConfig cfg = o.config_path.empty() ? config::RunConfig{} : config::load_config(o.config_path);
  if (o.seed) cfg.seed = *o.seed;
  if (o.variant) config::set_value(cfg, "variant", *o.variant);
  if (o.alpha) cfg.alpha = *o.alpha;
  if (o.beta) cfg.beta = *o.beta;
  if (o.jobs) cfg.jobs = *o.jobs;
  if (o.fixed_order) cfg.fixed_order = true;
  config::validate(cfg);
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f || !(f << text)) fail(ErrorKind::Data, "cannot write " + path.string());
}

fs::path require_file(const fs::path& path, const char* what) {
  if (!fs::is_regular_file(path))
    fail(ErrorKind::Data, std::string("missing ") + what + " '" + path.string() + "' (run the earlier stage first)");
  return path;
}

policy::PolicyParams load_policy(Context& ctx, const fs::path& path) {
  ctx.manifest.add_input(require_file(path, "checkpoint"), ctx.dir);
  auto params = policy::load_checkpoint(path);
  const auto& have = params.config();
  const auto& want = ctx.cfg.policy;
  if (!(have == want))
    fail(ErrorKind::Config, "checkpoint '" + path.string() + "' has hidden=" + std::to_string(have.hidden) +
                                " neighbors=" + std::to_string(have.neighbors) + " embed=" +
                                std::to_string(have.embed) + " rbf=" + std::to_string(have.rbf) +
                                "; configuration expects hidden=" + std::to_string(want.hidden) +
                                " neighbors=" + std::to_string(want.neighbors) + " embed=" +
                                std::to_string(want.embed) + " rbf=" + std::to_string(want.rbf));
  return params;
}

std::vector<dataset::PreferenceRecord> load_records(Context& ctx, const std::string& name) {
  const auto path = require_file(ctx.dir / name, "dataset");
  ctx.manifest.add_input(path, ctx.dir);
  return dataset::read_records(path);
}

std::vector<dataset::Prompt> prompts_of(const std::vector<dataset::PreferenceRecord>& records) {
  std::vector<dataset::Prompt> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(dataset::prompt_from_record(r));
  return out;
}

void emit(Context& ctx, const std::string& name, const std::string& text, bool volatile_content = false) {
  const auto path = ctx.dir / name;
  write_text(path, text);
  ctx.manifest.add_output(path, ctx.dir, volatile_content);
}

void emit_checkpoint(Context& ctx, const std::string& name, const policy::PolicyParams& params) {
  const auto path = ctx.dir / name;
  policy::save_checkpoint(params, path);
  ctx.manifest.add_output(path, ctx.dir);
}

void finish(Context& ctx, const std::string& manifest_name) {
  ctx.manifest.wallclock_s = std::chrono::duration<double>(Clock::now() - ctx.start).count();
  write_text(ctx.dir / manifest_name, manifest::to_json(ctx.manifest));
  ctx.out << "wrote " << (ctx.dir / manifest_name).string() << " (" << ctx.manifest.outputs.size()
          << " files)\n";
}

Context open_context(const Options& o, const std::string& command, std::ostream& out) {
  Context ctx{resolve_config(o), fs::path(o.out), {}, Clock::now(), out};
  fs::create_directories(ctx.dir);
  ctx.manifest.command = command;
  ctx.manifest.config_hash = manifest::git_blob_sha1(config::canonical_text(ctx.cfg));
  ctx.manifest.seeds = pipeline::stage_seeds(ctx.cfg.seed);
  if (!o.config_path.empty()) ctx.manifest.add_input(o.config_path, ctx.dir);
  return ctx;
}

std::size_t count_pairs(const std::vector<dataset::PreferenceRecord>& records) {
  std::size_t n = 0;
  for (const auto& r : records) n += r.pairs.size();
  return n;
}

void cmd_gen(const Options& o, std::ostream& out) {
  Context ctx = open_context(o, "gen", out);
  const auto& cfg = ctx.cfg;
  const auto bench = pipeline::make_benchmark(cfg);
  std::vector<train::EpochLog> log;
  const auto base = pipeline::make_base(cfg, &log);
  const auto train_records = pipeline::make_preferences(cfg, base, bench.train, "gen/train");
  const auto test_records = pipeline::make_preferences(cfg, base, bench.test, "gen/test");

  dataset::write_structures(bench.prompts, ctx.dir / "prompts.txt");
  ctx.manifest.add_output(ctx.dir / "prompts.txt", ctx.dir);
  nlohmann::ordered_json split;
  split["identity_threshold"] = bench.split.identity_threshold;
  split["train_ids"] = bench.split.train_ids;
  split["test_ids"] = bench.split.test_ids;
  emit(ctx, "split.json", split.dump(2) + "\n");
  emit_checkpoint(ctx, "base.ckpt", base);
  emit(ctx, "pretrain_metrics.csv", train::metrics_csv(log), true);
  dataset::write_records(train_records, ctx.dir / "train.jsonl");
  ctx.manifest.add_output(ctx.dir / "train.jsonl", ctx.dir);
  dataset::write_records(test_records, ctx.dir / "test.jsonl");
  ctx.manifest.add_output(ctx.dir / "test.jsonl", ctx.dir);

  ctx.manifest.counts = {{"n_prompts", bench.prompts.size()},
                         {"n_train", bench.train.size()},
                         {"n_test", bench.test.size()},
                         {"K", cfg.K},
                         {"n_pairs_train", count_pairs(train_records)},
                         {"n_pairs_test", count_pairs(test_records)}};
  out << "gen: " << bench.train.size() << " train / " << bench.test.size() << " test prompts, "
      << count_pairs(train_records) << " train pairs\n";
  finish(ctx, "gen_manifest.json");
}

int cmd_train(const Options& o, std::ostream& out, std::ostream& err) {
  Context ctx = open_context(o, "train", out);
  const auto& cfg = ctx.cfg;
  const auto variant = train::parse_variant(cfg.variant);
  const auto records = load_records(ctx, "train.jsonl");
  const std::string manifest_name = "train_" + std::string(train::variant_name(variant)) + "_manifest.json";

  if (variant == train::Variant::Sft) {
    const auto base = load_policy(ctx, ctx.dir / "base.ckpt");
    std::vector<train::EpochLog> log;
    const auto sft = pipeline::make_sft(cfg, base, prompts_of(records), &log);
    emit_checkpoint(ctx, "sft.ckpt", sft);
    emit(ctx, "sft_metrics.csv", train::metrics_csv(log), true);
    out << "train sft: " << log.size() << " epochs\n";
    finish(ctx, manifest_name);
    return kExitOk;
  }

  const auto sft = load_policy(ctx, ctx.dir / "sft.ckpt");
  const auto data = train::make_prompt_data(records, cfg.policy);
  const bool has_alpha = train::uses_diversity(variant) || train::uses_entropy(variant);
  std::vector<double> alphas;
  if (cfg.alpha) alphas = {*cfg.alpha};
  else if (has_alpha) alphas = cfg.alpha_grid;
  else alphas = {0.0};

  int status = kExitOk;
  for (double alpha : alphas) {
    const auto name = pipeline::checkpoint_name(variant, alpha);
    const auto result = pipeline::run_variant(cfg, sft, data, variant, alpha);
    emit_checkpoint(ctx, name + ".ckpt", result.params);
    emit(ctx, name + "_metrics.csv", train::metrics_csv(result.log), true);
    if (result.aborted) {
      err << "train " << name << ": numeric abort (" << result.abort_reason
          << "); last finite parameters saved\n";
      status = kExitNumeric;
      break;
    }
    const double loss = result.log.empty() ? 0.0 : result.log.back().loss;
    out << "train " << name << ": " << result.log.size() << " epochs, final loss " << loss << "\n";
  }
  finish(ctx, manifest_name);
  return status;
}

// Checkpoints in the run directory, optionally filtered by variant name.
std::vector<std::string> select_checkpoints(const Context& ctx, const std::optional<std::string>& variant) {
  std::vector<std::string> names;
  if (!fs::is_directory(ctx.dir)) fail(ErrorKind::Data, "run directory '" + ctx.dir.string() + "' does not exist");
  for (const auto& e : fs::directory_iterator(ctx.dir)) {
    if (!e.is_regular_file() || e.path().extension() != ".ckpt") continue;
    const auto stem = e.path().stem().string();
    if (variant && stem != *variant && !stem.starts_with(*variant + "_a")) continue;
    names.push_back(stem);
  }
  std::sort(names.begin(), names.end());
  if (names.empty()) fail(ErrorKind::Data, "no matching checkpoints in '" + ctx.dir.string() + "'");
  return names;
}

std::pair<std::string, double> split_name(const std::string& name) {
  const auto pos = name.rfind("_a");
  if (pos != std::string::npos) {
    try {
      std::size_t used = 0;
      const double a = std::stod(name.substr(pos + 2), &used);
      if (used == name.size() - pos - 2) return {name.substr(0, pos), a};
    } catch (const std::exception&) {
    }
  }
  return {name, 0.0};
}

std::string buckets_csv(const std::vector<analysis::BucketDelta>& buckets) {
  std::string s = "lo,hi,count,mean_delta_tm\n";
  for (const auto& b : buckets) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%.3f,%.3f,%zu,%.9f\n", b.lo, b.hi, b.count, b.mean_delta);
    s += buf;
  }
  return s;
}

void cmd_eval(const Options& o, std::ostream& out) {
  Context ctx = open_context(o, "eval", out);
  const auto records = load_records(ctx, "test.jsonl");
  const auto prompts = prompts_of(records);
  const auto names = select_checkpoints(ctx, o.variant);
  const auto opt = pipeline::eval_options(ctx.cfg);

  std::optional<analysis::EvalReport> sft_report;
  if (fs::is_regular_file(ctx.dir / "sft.ckpt"))
    sft_report = analysis::evaluate(load_policy(ctx, ctx.dir / "sft.ckpt"), prompts, opt);
  for (const auto& name : names) {
    const auto report = analysis::evaluate(load_policy(ctx, ctx.dir / (name + ".ckpt")), prompts, opt);
    emit(ctx, "eval_" + name + ".csv", analysis::report_csv(report));
    emit(ctx, "eval_" + name + ".json", analysis::report_json(report, name));
    if (sft_report && name != "sft")
      emit(ctx, "buckets_" + name + ".csv",
           buckets_csv(analysis::bucket_tm_delta(records, report, *sft_report, ctx.cfg.bucket_edges)));
    out << "eval " << name << ": tm " << report.tm.mean << " diversity " << report.diversity.mean
        << " recovery " << report.recovery.mean << "\n";
  }
  finish(ctx, "eval_manifest.json");
}

void cmd_sweep(const Options& o, std::ostream& out) {
  Context ctx = open_context(o, "sweep", out);
  const auto prompts = prompts_of(load_records(ctx, "test.jsonl"));
  const auto names = select_checkpoints(ctx, o.variant);
  std::vector<policy::PolicyParams> params;
  params.reserve(names.size());
  for (const auto& n : names) params.push_back(load_policy(ctx, ctx.dir / (n + ".ckpt")));
  std::vector<analysis::NamedPolicy> policies;
  for (std::size_t i = 0; i < names.size(); ++i) {
    const auto [variant, alpha] = split_name(names[i]);
    policies.push_back({variant, alpha, &params[i]});
  }
  const auto temps = analysis::default_temperatures();
  const auto points = analysis::sweep(policies, temps, prompts, pipeline::eval_options(ctx.cfg));
  emit(ctx, "sweep.csv", analysis::sweep_csv(points));
  out << "sweep: " << points.size() << " points\n";
  finish(ctx, "sweep_manifest.json");
}

void cmd_entropy(const Options& o, std::ostream& out) {
  Context ctx = open_context(o, "entropy", out);
  const auto prompts = prompts_of(load_records(ctx, "test.jsonl"));
  const auto names = select_checkpoints(ctx, o.variant);
  std::vector<std::pair<std::string, std::vector<pipeline::EntropyRow>>> tables;
  std::string summary = "checkpoint,mean_diff_entropy,collapsed_rows,token_entropy,token_entropy_stderr\n";
  for (const auto& name : names) {
    const auto pi = load_policy(ctx, ctx.dir / (name + ".ckpt"));
    auto rows = pipeline::entropy_table(ctx.cfg, pi, prompts);
    const auto tok = pipeline::token_entropy(ctx.cfg, pi, prompts);
    const auto collapsed = std::count_if(rows.begin(), rows.end(), [](const auto& r) { return r.collapsed; });
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s,%.9f,%zu,%.9f,%.9f\n", name.c_str(), pipeline::mean_entropy(rows),
                  static_cast<std::size_t>(collapsed), tok.mean, tok.stderr_);
    summary += buf;
    out << "entropy " << name << ": mean diff entropy " << pipeline::mean_entropy(rows) << ", " << collapsed
        << " collapsed, token entropy " << tok.mean << "\n";
    tables.emplace_back(name, std::move(rows));
  }
  emit(ctx, "entropy.csv", pipeline::entropy_csv(tables));
  emit(ctx, "entropy_summary.csv", summary);
  finish(ctx, "entropy_manifest.json");
}

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::Config: return kExitConfig;
    case ErrorKind::Data: return kExitData;
    case ErrorKind::Numeric: return kExitNumeric;
    default: return kExitOther;
  }
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Preference optimization for a random-order sequence decoder on a synthetic folding benchmark"};
  app.require_subcommand(1);
  Options o;

  auto add_common = [&o](CLI::App* sub) {
    sub->add_option("--config", o.config_path, "key=value configuration file")->check(CLI::ExistingFile);
    sub->add_option("--seed", o.seed, "master seed");
    sub->add_option("--out", o.out, "run directory")->capture_default_str();
    sub->add_option("--variant", o.variant, "sft, dpo, dpo_scaled, dpo_diversity, dpo_entropy, dpo_scaled_diversity");
    sub->add_option("--alpha", o.alpha, "penalty weight (default: the configured alpha grid)");
    sub->add_option("--beta", o.beta, "KL weight (default: variant preset)");
    sub->add_option("--jobs", o.jobs, "worker threads")->check(CLI::PositiveNumber);
    sub->add_flag("--fixed-order", o.fixed_order, "decode left to right instead of in a random order");
  };
  auto* gen = app.add_subcommand("gen", "generate prompts, split, base policy and preference data");
  auto* trn = app.add_subcommand("train", "run SFT or a preference-optimization variant");
  auto* evl = app.add_subcommand("eval", "evaluate checkpoints on the held-out prompts");
  auto* swp = app.add_subcommand("sweep", "temperature sweep with Pareto flags");
  auto* ent = app.add_subcommand("entropy", "differential and per-token entropy");
  for (auto* s : {gen, trn, evl, swp, ent}) add_common(s);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }

  try {
    if (gen->parsed()) cmd_gen(o, out);
    else if (trn->parsed()) return cmd_train(o, out, err);
    else if (evl->parsed()) cmd_eval(o, out);
    else if (swp->parsed()) cmd_sweep(o, out);
    else if (ent->parsed()) cmd_entropy(o, out);
    return kExitOk;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitOther;
  }
}

}  // namespace pepdpo::cli
