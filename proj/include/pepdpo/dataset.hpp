#pragma once

// Synthetic benchmark and preference-pair construction.

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "pepdpo/geometry.hpp"
#include "pepdpo/policy.hpp"
#include "pepdpo/sequence.hpp"

namespace pepdpo::dataset {

struct Prompt {
  geometry::Structure structure;  // fold(native); structure.id names the prompt
  Sequence native;

  const std::string& id() const { return structure.id; }
};

std::string prompt_id(std::size_t index);  // "p00042"

// Random natives with lengths uniform in [min_length, max_length]; prompt i
// draws from its own stream derive_seed(seed, i).
std::vector<Prompt> gen_prompts(std::size_t n, std::size_t min_length, std::size_t max_length,
                                std::uint64_t seed);

struct Identity {
  double value;
  bool length_mismatch;  // compared over the shorter prefix
};
Identity seq_identity(const Sequence& a, const Sequence& b);

struct SplitManifest {
  std::vector<std::string> train_ids;
  std::vector<std::string> test_ids;
  double identity_threshold;
};

// Deterministic core: `test_candidates` (indices into prompts) go to test
// unless they reach the identity threshold against some train native, in
// which case they are discarded. Everything else is train.
SplitManifest assign_split(const std::vector<Prompt>& prompts,
                           const std::vector<std::size_t>& test_candidates, double threshold);

// Shuffles, takes round(test_fraction * n) candidates, then assign_split.
SplitManifest make_split(const std::vector<Prompt>& prompts, double threshold, double test_fraction,
                         std::uint64_t seed);

struct Candidate {
  Sequence sequence;
  double reward;  // TM-score, rounded to 9 decimals
  friend bool operator==(const Candidate&, const Candidate&) = default;
};

struct PreferenceRecord {
  std::string structure_id;
  Sequence native;
  std::vector<Candidate> candidates;
  double mean_reward = 0.0;                                 // R(x)
  std::vector<std::pair<std::uint32_t, std::uint32_t>> pairs;  // (winner, loser)

  friend bool operator==(const PreferenceRecord&, const PreferenceRecord&) = default;
};

double round9(double v);

// Strict-preference pairs over candidate rewards, ties dropped. Pairs are
// listed for index pairs (a < b) in lexicographic order.
std::vector<std::pair<std::uint32_t, std::uint32_t>> build_pairs(const std::vector<Candidate>& c);

PreferenceRecord make_record(const Prompt& prompt, std::vector<Candidate> candidates);

// K samples per prompt at temperature T with random decoding orders, each
// scored by geometry::reward. Prompt streams derive from (seed, structure id);
// output is sorted by structure id.
std::vector<PreferenceRecord> gen_preferences(const policy::PolicyParams& policy,
                                              const std::vector<Prompt>& prompts, std::size_t K,
                                              double temperature, std::uint64_t seed,
                                              std::size_t jobs = 1);

// Throws Error(Data) describing the first violated invariant.
void validate_record(const PreferenceRecord& r);

std::string record_to_json(const PreferenceRecord& r);
PreferenceRecord record_from_json(const std::string& line);

void write_records(const std::vector<PreferenceRecord>& records, const std::filesystem::path& path);
// Errors name the 1-based line number and offending field.
std::vector<PreferenceRecord> read_records(const std::filesystem::path& path);

void write_structures(const std::vector<Prompt>& prompts, const std::filesystem::path& path);
std::vector<geometry::Structure> read_structures(const std::filesystem::path& path);

// Prompt reconstructed from a record: the structure is fold(native).
Prompt prompt_from_record(const PreferenceRecord& r);

}  // namespace pepdpo::dataset
