#include "pepdpo/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <map>

#include "pepdpo/error.hpp"
#include "pepdpo/parallel.hpp"
#include "pepdpo/rng.hpp"

namespace pepdpo::dataset {
namespace {

using nlohmann::json;

std::string fmt_fixed9(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9f", v);
  return buf;
}

std::string fmt_exact(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

[[noreturn]] void bad_field(const std::string& field, const std::string& why) {
  fail(ErrorKind::Data, "field '" + field + "': " + why);
}

Sequence parse_sequence(const json& j, const std::string& field) {
  if (!j.is_string()) bad_field(field, "expected an amino-acid string");
  try {
    return Sequence::from_string(j.get<std::string>());
  } catch (const Error& e) {
    bad_field(field, e.what());
  }
}

double parse_number(const json& j, const std::string& field) {
  if (!j.is_number()) bad_field(field, "expected a number");
  const double v = j.get<double>();
  if (!std::isfinite(v)) bad_field(field, "not finite");
  return v;
}

}  // namespace

std::string prompt_id(std::size_t index) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "p%05zu", index);
  return buf;
}

std::vector<Prompt> gen_prompts(std::size_t n, std::size_t min_length, std::size_t max_length,
                                std::uint64_t seed) {
  if (min_length < 2 || max_length > geometry::kMaxResidues || min_length > max_length)
    fail(ErrorKind::Config, "gen_prompts: length range must satisfy 2 <= min <= max <= 50");
  std::vector<Prompt> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, i));
    const std::size_t len = min_length + rng.below(max_length - min_length + 1);
    std::vector<Token> tokens(len);
    for (Token& t : tokens) t = static_cast<Token>(rng.below(kNumTokens));
    Sequence native(std::move(tokens));
    out.push_back({geometry::fold(native, prompt_id(i)), std::move(native)});
  }
  return out;
}

Identity seq_identity(const Sequence& a, const Sequence& b) {
  if (a.empty() || b.empty()) fail(ErrorKind::InvalidInput, "seq_identity: empty sequence");
  const std::size_t n = std::min(a.size(), b.size());
  std::size_t same = 0;
  for (std::size_t i = 0; i < n; ++i) same += a[i] == b[i];
  return {static_cast<double>(same) / static_cast<double>(n), a.size() != b.size()};
}

SplitManifest assign_split(const std::vector<Prompt>& prompts,
                           const std::vector<std::size_t>& test_candidates, double threshold) {
  if (prompts.empty()) fail(ErrorKind::InvalidInput, "make_split: no prompts");
  std::vector<bool> is_candidate(prompts.size(), false);
  for (std::size_t i : test_candidates) {
    if (i >= prompts.size()) fail(ErrorKind::InvalidInput, "make_split: candidate index out of range");
    is_candidate[i] = true;
  }
  SplitManifest m{{}, {}, threshold};
  for (std::size_t i = 0; i < prompts.size(); ++i)
    if (!is_candidate[i]) m.train_ids.push_back(prompts[i].id());
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    if (!is_candidate[i]) continue;
    bool clean = true;
    for (std::size_t j = 0; j < prompts.size() && clean; ++j)
      if (!is_candidate[j] && seq_identity(prompts[i].native, prompts[j].native).value >= threshold)
        clean = false;
    if (clean) m.test_ids.push_back(prompts[i].id());
  }
  if (m.test_ids.empty())
    fail(ErrorKind::Data, "make_split: test set is empty after identity filtering; generate more prompts");
  return m;
}

SplitManifest make_split(const std::vector<Prompt>& prompts, double threshold, double test_fraction,
                         std::uint64_t seed) {
  if (prompts.empty()) fail(ErrorKind::InvalidInput, "make_split: no prompts");
  if (!(test_fraction > 0.0 && test_fraction < 1.0))
    fail(ErrorKind::Config, "make_split: test_fraction must be in (0, 1)");
  std::vector<std::size_t> idx(prompts.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(seed);
  rng.shuffle(idx.begin(), idx.end());
  const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(idx.size())));
  idx.resize(std::max<std::size_t>(1, n_test));
  std::sort(idx.begin(), idx.end());
  return assign_split(prompts, idx, threshold);
}

double round9(double v) { return std::round(v * 1e9) / 1e9; }

std::vector<std::pair<std::uint32_t, std::uint32_t>> build_pairs(const std::vector<Candidate>& c) {
  std::vector<std::pair<std::uint32_t, std::uint32_t>> pairs;
  for (std::uint32_t a = 0; a < c.size(); ++a)
    for (std::uint32_t b = a + 1; b < c.size(); ++b) {
      if (c[a].reward > c[b].reward) pairs.emplace_back(a, b);
      else if (c[b].reward > c[a].reward) pairs.emplace_back(b, a);
    }
  return pairs;
}

PreferenceRecord make_record(const Prompt& prompt, std::vector<Candidate> candidates) {
  PreferenceRecord r;
  r.structure_id = prompt.id();
  r.native = prompt.native;
  r.candidates = std::move(candidates);
  double sum = 0.0;
  for (const auto& c : r.candidates) sum += c.reward;
  r.mean_reward = r.candidates.empty() ? 0.0 : sum / static_cast<double>(r.candidates.size());
  r.pairs = build_pairs(r.candidates);
  return r;
}

std::vector<PreferenceRecord> gen_preferences(const policy::PolicyParams& policy,
                                              const std::vector<Prompt>& prompts, std::size_t K,
                                              double temperature, std::uint64_t seed,
                                              std::size_t jobs) {
  if (K < 2) fail(ErrorKind::Config, "gen_preferences: K must be >= 2");
  std::vector<PreferenceRecord> out(prompts.size());
  parallel_for(prompts.size(), jobs, [&](std::size_t i) {
    const Prompt& p = prompts[i];
    Rng rng(derive_seed(seed, p.id()));
    const auto features = policy::featurize(p.structure, policy.config());
    const auto enc = policy::encode(policy, features);
    std::vector<Candidate> cands;
    cands.reserve(K);
    for (std::size_t k = 0; k < K; ++k) {
      auto s = policy::sample(policy, features, enc, temperature, rng, false);
      const double r = round9(geometry::reward(p.structure, s.sequence));
      cands.push_back({std::move(s.sequence), r});
    }
    out[i] = make_record(p, std::move(cands));
  });
  std::sort(out.begin(), out.end(),
            [](const auto& a, const auto& b) { return a.structure_id < b.structure_id; });
  return out;
}

void validate_record(const PreferenceRecord& r) {
  const std::string where = "record '" + r.structure_id + "': ";
  if (r.structure_id.empty()) fail(ErrorKind::Data, "record with empty structure_id");
  if (r.native.empty() || r.native.size() > geometry::kMaxResidues)
    fail(ErrorKind::Data, where + "native length out of range");
  if (r.candidates.size() < 2) fail(ErrorKind::Data, where + "needs at least 2 candidates");
  double sum = 0.0;
  for (const auto& c : r.candidates) {
    if (c.sequence.size() != r.native.size())
      fail(ErrorKind::Data, where + "candidate length differs from native");
    if (!(c.reward > 0.0 && c.reward <= 1.0)) fail(ErrorKind::Data, where + "field 'reward' outside (0, 1]");
    sum += c.reward;
  }
  if (std::abs(sum / static_cast<double>(r.candidates.size()) - r.mean_reward) > 1e-12)
    fail(ErrorKind::Data, where + "field 'mean_reward' is not the mean of candidate rewards");
  const auto expected = build_pairs(r.candidates);
  for (const auto& [w, l] : r.pairs) {
    if (w >= r.candidates.size() || l >= r.candidates.size())
      fail(ErrorKind::Data, where + "field 'pairs' has an index out of range");
    if (!(r.candidates[w].reward > r.candidates[l].reward))
      fail(ErrorKind::Data, where + "field 'pairs' has a winner not strictly better than its loser");
  }
  auto listed = r.pairs;
  auto wanted = expected;
  std::sort(listed.begin(), listed.end());
  std::sort(wanted.begin(), wanted.end());
  if (listed != wanted)
    fail(ErrorKind::Data, where + "field 'pairs' does not list every strict preference exactly once");
}

std::string record_to_json(const PreferenceRecord& r) {
  std::string s = "{\"structure_id\":" + json(r.structure_id).dump() + ",\"native\":\"" + r.native.str() +
                  "\",\"candidates\":[";
  for (std::size_t k = 0; k < r.candidates.size(); ++k) {
    if (k) s += ',';
    s += "{\"sequence\":\"" + r.candidates[k].sequence.str() + "\",\"reward\":" +
         fmt_fixed9(r.candidates[k].reward) + "}";
  }
  s += "],\"mean_reward\":" + fmt_exact(r.mean_reward) + ",\"pairs\":[";
  for (std::size_t k = 0; k < r.pairs.size(); ++k) {
    if (k) s += ',';
    s += "[" + std::to_string(r.pairs[k].first) + "," + std::to_string(r.pairs[k].second) + "]";
  }
  s += "]}";
  return s;
}

PreferenceRecord record_from_json(const std::string& line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    fail(ErrorKind::Data, std::string("malformed JSON: ") + e.what());
  }
  if (!j.is_object()) fail(ErrorKind::Data, "record is not a JSON object");
  for (const char* key : {"structure_id", "native", "candidates", "mean_reward", "pairs"})
    if (!j.contains(key)) bad_field(key, "missing");

  PreferenceRecord r;
  if (!j["structure_id"].is_string()) bad_field("structure_id", "expected a string");
  r.structure_id = j["structure_id"].get<std::string>();
  r.native = parse_sequence(j["native"], "native");
  if (!j["candidates"].is_array()) bad_field("candidates", "expected an array");
  for (const auto& c : j["candidates"]) {
    if (!c.is_object() || !c.contains("sequence") || !c.contains("reward"))
      bad_field("candidates", "entries need 'sequence' and 'reward'");
    r.candidates.push_back({parse_sequence(c["sequence"], "sequence"), parse_number(c["reward"], "reward")});
  }
  r.mean_reward = parse_number(j["mean_reward"], "mean_reward");
  if (!j["pairs"].is_array()) bad_field("pairs", "expected an array");
  for (const auto& p : j["pairs"]) {
    if (!p.is_array() || p.size() != 2 || !p[0].is_number_unsigned() || !p[1].is_number_unsigned())
      bad_field("pairs", "entries must be [winner, loser] index pairs");
    r.pairs.emplace_back(p[0].get<std::uint32_t>(), p[1].get<std::uint32_t>());
  }
  validate_record(r);
  return r;
}

void write_records(const std::vector<PreferenceRecord>& records, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::Data, "cannot write " + path.string());
  for (const auto& r : records) out << record_to_json(r) << '\n';
}

std::vector<PreferenceRecord> read_records(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Data, "cannot open dataset " + path.string());
  std::vector<PreferenceRecord> out;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (line.empty()) continue;
    try {
      out.push_back(record_from_json(line));
    } catch (const Error& e) {
      fail(ErrorKind::Data, path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void write_structures(const std::vector<Prompt>& prompts, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::Data, "cannot write " + path.string());
  for (const auto& p : prompts) out << geometry::to_record(p.structure);
}

std::vector<geometry::Structure> read_structures(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Data, "cannot open structures " + path.string());
  std::vector<geometry::Structure> out;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (line.empty()) continue;
    try {
      out.push_back(geometry::from_record(line));
    } catch (const Error& e) {
      fail(ErrorKind::Data, path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

Prompt prompt_from_record(const PreferenceRecord& r) {
  return {geometry::fold(r.native, r.structure_id), r.native};
}

}  // namespace pepdpo::dataset
