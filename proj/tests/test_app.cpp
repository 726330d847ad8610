#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "pepdpo/cli.hpp"
#include "pepdpo/config.hpp"
#include "pepdpo/error.hpp"
#include "pepdpo/manifest.hpp"

using namespace pepdpo;
namespace fs = std::filesystem;

namespace {

std::string config_error(const std::string& text) {
  try {
    config::parse_config(text);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Config);
    return e.what();
  }
  FAIL("expected a config error");
  return {};
}

struct CliResult {
  int code;
  std::string out, err;
};

CliResult run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "pepdpo");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

fs::path scratch_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("pepdpo_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

const char* kTinyConfig =
    "# tiny end-to-end run\n"
    "n_prompts = 20\n"
    "min_length = 6\n"
    "max_length = 9\n"
    "identity_threshold = 1\n"
    "pretrain_prompts = 20\n"
    "pretrain_epochs = 1\n"
    "sft_epochs = 1\n"
    "epochs = 2\n"
    "M = 2\n"
    "K_refresh = 1\n"
    "kl_prompts = 2\n"
    "kl_samples = 2\n"
    "eval_samples = 2\n"
    "entropy_orders = 8\n"
    "token_entropy_samples = 2\n"
    "alpha_grid = 0,0.1\n";

}  // namespace

TEST_CASE("config parses comments, whitespace and lists") {
  const auto cfg = config::parse_config("# header\n  seed = 9  # trailing\n\nalpha_grid = 0, 0.25 ,1\nvariant=dpo_entropy\n");
  CHECK(cfg.seed == 9);
  CHECK(cfg.alpha_grid == std::vector<double>{0.0, 0.25, 1.0});
  CHECK(cfg.variant == "dpo_entropy");
  CHECK(cfg.K == 4);
  CHECK(cfg.gen_temperature == 0.1);
  CHECK(cfg.sft_epochs == 2);
  CHECK(cfg.train.epochs == 20);
}

TEST_CASE("config errors name the key and the line") {
  CHECK(config_error("seed = 1\nbogus = 2\n").find("line 2") != std::string::npos);
  CHECK(config_error("seed = 1\nbogus = 2\n").find("bogus") != std::string::npos);
  CHECK(config_error("K = 4\n\nK = 5\n").find("line 3: duplicate key 'K'") != std::string::npos);
  CHECK(config_error("learning_rate = fast\n").find("learning_rate") != std::string::npos);
  CHECK(config_error("epochs = -1\n").find("epochs") != std::string::npos);
  CHECK(config_error("just words\n").find("line 1") != std::string::npos);
  CHECK(config_error("variant = ppo\n").find("line 1") != std::string::npos);
  CHECK(config_error("penalty_sign = sideways\n").find("penalty_sign") != std::string::npos);
  CHECK(config_error("fixed_order = maybe\n").find("fixed_order") != std::string::npos);
  CHECK(config_error("gen_temperature = nan\n").find("gen_temperature") != std::string::npos);
}

TEST_CASE("config canonical text ignores comments and key order") {
  const auto a = config::parse_config("seed = 3\nepochs = 5\n");
  const auto b = config::parse_config("# other\nepochs=5\n\nseed=3\n");
  CHECK(config::canonical_text(a) == config::canonical_text(b));
  CHECK(config::canonical_text(a) != config::canonical_text(config::RunConfig{}));
  const auto text = config::canonical_text(a);
  std::size_t lines = 0;
  for (char c : text) lines += c == '\n';
  CHECK(lines == config::config_keys().size());
  // The canonical form parses back to the same configuration.
  std::string reparsable;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);)
    if (!line.starts_with("beta=") && !line.starts_with("alpha=")) reparsable += line + "\n";
  CHECK(config::canonical_text(config::parse_config(reparsable)) == text);
}

TEST_CASE("config train presets and validation") {
  config::RunConfig cfg;
  CHECK(config::train_config(cfg, train::Variant::Dpo, 0.0).beta == 0.5);
  CHECK(config::train_config(cfg, train::Variant::DpoDiversity, 0.1).beta == 0.1);
  CHECK(config::train_config(cfg, train::Variant::DpoEntropy, 0.1).alpha == 0.1);
  cfg.beta = 0.3;
  cfg.jobs = 3;
  const auto t = config::train_config(cfg, train::Variant::Dpo, 0.0);
  CHECK(t.beta == 0.3);
  CHECK(t.jobs == 3);
  CHECK_NOTHROW(config::validate(config::RunConfig{}));

  auto expect_invalid = [](const std::string& text) {
    const auto c = config::parse_config(text);
    CHECK_THROWS_AS(config::validate(c), Error);
  };
  expect_invalid("K = 1\n");
  expect_invalid("test_fraction = 1\n");
  expect_invalid("min_length = 12\nmax_length = 11\n");
  expect_invalid("eval_temperature = 1.5\n");
  expect_invalid("bucket_edges = 0,0.5,0.5\n");
  expect_invalid("alpha_grid = 0,-0.1\n");
  expect_invalid("jobs = 0\n");
  expect_invalid("beta = 0\n");
}

TEST_CASE("manifest checksums match git blob hashes") {
  CHECK(manifest::git_blob_sha1("") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
  CHECK(manifest::git_blob_sha1("hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a");
  CHECK(manifest::git_blob_sha1("what is up, doc?") == "bd9dbf5aae1a3862dd1526723246b20206e5fc37");
  const auto dir = scratch_dir("manifest");
  std::ofstream(dir / "h.txt", std::ios::binary) << "hello\n";
  CHECK(manifest::file_checksum(dir / "h.txt") == "ce013625030ba8dba906f756967f9e9ca394464a");
}

TEST_CASE("manifest JSON round trip") {
  const auto dir = scratch_dir("manifest_rt");
  std::ofstream(dir / "a.txt", std::ios::binary) << "abc";
  std::ofstream(dir / "m.csv", std::ios::binary) << "epoch,loss\n";
  manifest::RunManifest m;
  m.command = "train";
  m.config_hash = manifest::git_blob_sha1("seed=1\n");
  m.seeds = {{"split", 11}, {"train", 18446744073709551615ull}};
  m.add_input(dir / "a.txt", dir);
  m.add_output(dir / "m.csv", dir, true);
  m.counts = {{"n_pairs_train", 960}};
  m.wallclock_s = 1.25;
  CHECK(m.inputs.at(0).path == "a.txt");
  CHECK(m.inputs.at(0).bytes == 3);
  CHECK(m.outputs.at(0).volatile_content);

  const auto text = manifest::to_json(m);
  const auto back = manifest::from_json(text);
  CHECK(back.command == m.command);
  CHECK(back.config_hash == m.config_hash);
  CHECK(back.seeds == m.seeds);
  CHECK(back.counts == m.counts);
  CHECK(back.wallclock_s == m.wallclock_s);
  REQUIRE(back.outputs.size() == 1);
  CHECK(back.outputs[0].sha1 == m.outputs[0].sha1);
  CHECK(back.outputs[0].volatile_content);
  CHECK_FALSE(back.inputs.at(0).volatile_content);
  CHECK(manifest::to_json(back) == text);

  try {
    manifest::from_json("{\"command\": \"gen\"}");
    FAIL("expected a data error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Data);
  }
}

TEST_CASE("cli help and usage errors") {
  const auto help = run_cli({"--help"});
  CHECK(help.code == cli::kExitOk);
  CHECK(help.out.find("gen") != std::string::npos);
  CHECK(run_cli({}).code == cli::kExitConfig);
  CHECK(run_cli({"frobnicate"}).code == cli::kExitConfig);
  CHECK(run_cli({"gen", "--jobs", "0"}).code == cli::kExitConfig);
  CHECK(run_cli({"gen", "--config", "/nonexistent/cfg.txt"}).code == cli::kExitConfig);
}

TEST_CASE("cli config and data errors") {
  const auto dir = scratch_dir("cli_err");
  std::ofstream(dir / "bad.cfg") << "seed = 1\nmystery = 4\n";
  const auto bad = run_cli({"gen", "--config", (dir / "bad.cfg").string(), "--out", (dir / "run").string()});
  CHECK(bad.code == cli::kExitConfig);
  CHECK(bad.err.find("mystery") != std::string::npos);
  CHECK(run_cli({"gen", "--variant", "ppo", "--out", (dir / "run").string()}).code == cli::kExitConfig);

  const auto missing = run_cli({"train", "--variant", "sft", "--out", (dir / "empty").string()});
  CHECK(missing.code == cli::kExitData);
  CHECK(missing.err.find("train.jsonl") != std::string::npos);
  CHECK(run_cli({"eval", "--out", (dir / "empty").string()}).code == cli::kExitData);
}

TEST_CASE("cli end-to-end on a tiny run") {
  const auto dir = scratch_dir("cli_e2e");
  const auto cfg = (dir / "tiny.cfg").string();
  std::ofstream(cfg) << kTinyConfig;
  const auto run = (dir / "run").string();
  auto step = [&](std::vector<std::string> args) {
    args.insert(args.end(), {"--config", cfg, "--out", run});
    const auto r = run_cli(args);
    INFO(r.err);
    REQUIRE(r.code == cli::kExitOk);
    return r;
  };

  step({"gen"});
  for (const char* f : {"prompts.txt", "split.json", "base.ckpt", "train.jsonl", "test.jsonl", "gen_manifest.json"})
    CHECK(fs::is_regular_file(fs::path(run) / f));
  const auto gen_manifest = manifest::from_json(slurp(fs::path(run) / "gen_manifest.json"));
  CHECK(gen_manifest.command == "gen");
  for (const auto& f : gen_manifest.outputs)
    if (!f.volatile_content) CHECK(manifest::file_checksum(fs::path(run) / f.path) == f.sha1);

  // Regeneration into a second directory reproduces every non-volatile output.
  const auto again = run_cli({"gen", "--config", cfg, "--out", (dir / "again").string()});
  REQUIRE(again.code == cli::kExitOk);
  for (const auto& f : gen_manifest.outputs)
    if (!f.volatile_content)
      CHECK(slurp(fs::path(run) / f.path) == slurp(dir / "again" / f.path));

  step({"train", "--variant", "sft"});
  CHECK(fs::is_regular_file(fs::path(run) / "sft.ckpt"));
  step({"train", "--variant", "dpo"});
  step({"train", "--variant", "dpo_diversity"});
  CHECK(fs::is_regular_file(fs::path(run) / "dpo_diversity_a0.1.ckpt"));
  const auto metrics = slurp(fs::path(run) / "dpo_metrics.csv");
  CHECK(metrics.starts_with("epoch,"));

  const auto ev = step({"eval"});
  CHECK(ev.out.find("eval dpo:") != std::string::npos);
  CHECK(fs::is_regular_file(fs::path(run) / "eval_dpo.csv"));
  CHECK(fs::is_regular_file(fs::path(run) / "buckets_dpo.csv"));
  const auto report = nlohmann::json::parse(slurp(fs::path(run) / "eval_dpo.json"));
  CHECK(report.is_object());

  step({"sweep", "--variant", "dpo"});
  const auto sweep = slurp(fs::path(run) / "sweep.csv");
  CHECK(sweep.starts_with("variant,alpha,temperature,mean_tm,mean_diversity,pareto_flag\n"));
  std::size_t rows = 0;
  for (char c : sweep) rows += c == '\n';
  CHECK(rows == 1 + 11);

  step({"entropy", "--variant", "sft"});
  CHECK(slurp(fs::path(run) / "entropy_summary.csv").find("sft,") != std::string::npos);

  // A checkpoint with a different architecture is a configuration mismatch.
  policy::save_checkpoint(policy::PolicyParams(policy::PolicyConfig{4, 3, 2, 4}), fs::path(run) / "sft.ckpt");
  CHECK(run_cli({"train", "--variant", "dpo", "--config", cfg, "--out", run}).code == cli::kExitConfig);
}
