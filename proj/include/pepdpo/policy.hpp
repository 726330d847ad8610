#pragma once

// Conditional sequence decoder with random decoding order.
//
// Architecture (sizes from PolicyConfig):
//   features  f_i : RBF encodings of distances to the k nearest residues
//   encoder   h_i = relu(W_enc f_i + b_enc)                       (H)
//   context   c_i = mean of embed[y_j] over already-decoded j in knn(i)   (E)
//   decoder   u_i = relu(W_d1 [h_i ; c_i] + b_d1)                 (H)
//             logits_i = W_d2 u_i + b_d2                           (20)
//
// Positions are decoded in the order of a permutation; the log-probability
// of a sequence therefore depends on the order through the contexts c_i.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "pepdpo/geometry.hpp"
#include "pepdpo/rng.hpp"
#include "pepdpo/sequence.hpp"

namespace pepdpo::policy {

struct PolicyConfig {
  std::uint32_t hidden = 64;
  std::uint32_t neighbors = 8;
  std::uint32_t embed = 16;
  std::uint32_t rbf = 16;

  std::size_t feature_dim() const { return std::size_t{neighbors} * rbf; }
  friend bool operator==(const PolicyConfig&, const PolicyConfig&) = default;
};

inline constexpr double kRbfMaxDistance = 20.0;

// Offsets of each tensor inside the flat parameter vector, in declaration order.
struct ParamLayout {
  struct Slot {
    std::size_t offset, rows, cols;
    std::size_t size() const { return rows * cols; }
  };
  Slot enc_w, enc_b, dec1_w, dec1_b, dec2_w, dec2_b, embed;
  std::size_t total;

  explicit ParamLayout(const PolicyConfig& c);
};

// All learnable tensors stored contiguously as doubles. Also used for
// gradients and optimizer moments, which share the layout.
class PolicyParams {
 public:
  PolicyParams() : PolicyParams(PolicyConfig{}) {}
  explicit PolicyParams(const PolicyConfig& config);  // all zeros

  // N(0, std^2) weights and embeddings, zero biases.
  static PolicyParams init_random(const PolicyConfig& config, Rng& rng, double stddev = 0.02);

  const PolicyConfig& config() const { return config_; }
  const ParamLayout& layout() const { return layout_; }
  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  std::size_t size() const { return values_.size(); }

  std::span<double> slot(const ParamLayout::Slot& s) { return values().subspan(s.offset, s.size()); }
  std::span<const double> slot(const ParamLayout::Slot& s) const {
    return values().subspan(s.offset, s.size());
  }

  bool all_finite() const;
  bool compatible_with(const PolicyParams& other) const { return config_ == other.config_; }
  friend bool operator==(const PolicyParams& a, const PolicyParams& b) {
    return a.config_ == b.config_ && a.values_ == b.values_;
  }

 private:
  PolicyConfig config_;
  ParamLayout layout_;
  std::vector<double> values_;
};

using Gradient = PolicyParams;

struct DecodingOrder {
  std::vector<std::uint16_t> perm;  // perm[t] = position decoded at step t

  std::size_t size() const { return perm.size(); }
  static DecodingOrder identity(std::size_t length);
  bool is_permutation() const;
  friend bool operator==(const DecodingOrder&, const DecodingOrder&) = default;
};

DecodingOrder sample_order(std::size_t length, Rng& rng);

struct LogProbResult {
  double total = 0.0;                // sum of per_position, in position order
  std::vector<double> per_position;  // indexed by residue position
  DecodingOrder order;
};

// Structure-only inputs: RBF features and the kNN lists used for context.
struct Features {
  std::size_t length = 0;
  std::size_t dim = 0;
  std::vector<double> values;                           // length x dim
  std::vector<std::vector<std::uint16_t>> neighbors;    // ascending distance
  bool self_only = false;                               // L < 2

  std::span<const double> row(std::size_t i) const { return {values.data() + i * dim, dim}; }
};

Features featurize(const geometry::Structure& x, const PolicyConfig& config);

double rbf(double distance, std::size_t center, std::size_t count);

// Encoder activations h (length x hidden); depends on params and features only.
struct Encoding {
  std::size_t length = 0;
  std::size_t hidden = 0;
  std::vector<double> h;
};

Encoding encode(const PolicyParams& params, const Features& features);

LogProbResult logprob(const PolicyParams& params, const Features& features, const Encoding& enc,
                      const Sequence& y, const DecodingOrder& order);
LogProbResult logprob(const PolicyParams& params, const geometry::Structure& x,
                      const Sequence& y, const DecodingOrder& order);

// One weighted log-probability term for gradient accumulation.
struct GradTerm {
  const Sequence* sequence;
  const DecodingOrder* order;
  double weight;
};

// out += sum_k weight_k * d(logprob_k.total)/d(params). All terms share the
// structure, so the encoder backward pass runs once.
void accumulate_grad(const PolicyParams& params, const Features& features, const Encoding& enc,
                     std::span<const GradTerm> terms, Gradient& out);

Gradient grad_logprob(const PolicyParams& params, const geometry::Structure& x, const Sequence& y,
                      const DecodingOrder& order);

struct SampleResult {
  Sequence sequence;
  LogProbResult logprob;  // at T = 1 under the realized order
};

// temperature == 0 takes the argmax (lowest index on ties). fixed_order
// decodes left to right instead of drawing a random permutation.
SampleResult sample(const PolicyParams& params, const Features& features, const Encoding& enc,
                    double temperature, Rng& rng, bool fixed_order);
SampleResult sample(const PolicyParams& params, const geometry::Structure& x, double temperature,
                    Rng& rng, bool fixed_order);

// Checkpoint layout (little-endian):
//   u32 magic 'PDPO' (0x4f504450), u32 version (1),
//   u32 hidden, u32 neighbors, u32 embed, u32 rbf, u32 vocab (20),
//   then every tensor in ParamLayout order as f32, row-major.
void save_checkpoint(const PolicyParams& params, const std::filesystem::path& path);
PolicyParams load_checkpoint(const std::filesystem::path& path);

}  // namespace pepdpo::policy
