#include "pepdpo/policy.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>

#include "pepdpo/error.hpp"
#include "pepdpo/kernels.hpp"

namespace pepdpo::policy {
namespace {

constexpr std::uint32_t kMagic = 0x4f504450;  // "PDPO"
constexpr std::uint32_t kVersion = 1;

void require_lengths(const Features& f, const Sequence& y, const DecodingOrder& order) {
  if (y.size() != f.length || order.size() != f.length)
    fail(ErrorKind::Dimension, "logprob: structure length " + std::to_string(f.length) +
                                   ", sequence length " + std::to_string(y.size()) +
                                   ", order length " + std::to_string(order.size()));
}

// rank[pos] = decoding step of pos
std::vector<std::uint16_t> ranks_of(const DecodingOrder& order) {
  std::vector<std::uint16_t> rank(order.size());
  for (std::size_t t = 0; t < order.size(); ++t) rank[order.perm[t]] = static_cast<std::uint16_t>(t);
  return rank;
}

// Scratch and forward pass for one decoding step.
struct StepBuffers {
  std::vector<double> z, a1, u, logits;
  std::vector<std::uint16_t> ctx;

  explicit StepBuffers(const PolicyConfig& c)
      : z(c.hidden + c.embed), a1(c.hidden), u(c.hidden), logits(kNumTokens) {}
};

// Fills z = [h_i ; mean embed of decoded neighbours] and runs the decoder MLP.
// `decoded(j)` says whether neighbour j is already decoded; `token(j)` its token.
template <class Decoded, class TokenOf>
void decoder_forward(const PolicyParams& p, const Features& f, const Encoding& enc, std::size_t i,
                     Decoded decoded, TokenOf token, StepBuffers& buf) {
  const auto& c = p.config();
  const auto& L = p.layout();
  const auto& k = simd::active_kernels();
  const std::size_t H = c.hidden, E = c.embed;

  std::copy_n(enc.h.data() + i * H, H, buf.z.data());
  std::fill(buf.z.begin() + static_cast<std::ptrdiff_t>(H), buf.z.end(), 0.0);
  buf.ctx.clear();
  for (std::uint16_t j : f.neighbors[i])
    if (decoded(j)) buf.ctx.push_back(j);
  if (!buf.ctx.empty()) {
    const double inv = 1.0 / static_cast<double>(buf.ctx.size());
    const double* emb = p.values().data() + L.embed.offset;
    for (std::uint16_t j : buf.ctx) k.axpy(inv, emb + std::size_t{token(j)} * E, buf.z.data() + H, E);
  }

  const double* v = p.values().data();
  k.gemv(v + L.dec1_w.offset, H, H + E, buf.z.data(), v + L.dec1_b.offset, buf.a1.data());
  for (std::size_t r = 0; r < H; ++r) buf.u[r] = buf.a1[r] > 0.0 ? buf.a1[r] : 0.0;
  k.gemv(v + L.dec2_w.offset, kNumTokens, H, buf.u.data(), v + L.dec2_b.offset, buf.logits.data());
}

double log_sum_exp(std::span<const double> x) {
  const double m = *std::max_element(x.begin(), x.end());
  double s = 0.0;
  for (double v : x) s += std::exp(v - m);
  return m + std::log(s);
}

void write_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& in, const std::string& what) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) fail(ErrorKind::Data, "checkpoint truncated reading " + what);
  return std::uint32_t{b[0]} | std::uint32_t{b[1]} << 8 | std::uint32_t{b[2]} << 16 |
         std::uint32_t{b[3]} << 24;
}

}  // namespace

ParamLayout::ParamLayout(const PolicyConfig& c) {
  std::size_t off = 0;
  auto take = [&off](std::size_t rows, std::size_t cols) {
    Slot s{off, rows, cols};
    off += rows * cols;
    return s;
  };
  const std::size_t H = c.hidden, E = c.embed;
  enc_w = take(H, c.feature_dim());
  enc_b = take(H, 1);
  dec1_w = take(H, H + E);
  dec1_b = take(H, 1);
  dec2_w = take(kNumTokens, H);
  dec2_b = take(kNumTokens, 1);
  embed = take(kNumTokens, E);
  total = off;
}

PolicyParams::PolicyParams(const PolicyConfig& config)
    : config_(config), layout_(config), values_(layout_.total, 0.0) {
  if (config.hidden == 0 || config.embed == 0 || config.rbf < 2 || config.neighbors == 0)
    fail(ErrorKind::Config, "policy: hidden, embed, neighbors must be positive and rbf >= 2");
}

PolicyParams PolicyParams::init_random(const PolicyConfig& config, Rng& rng, double stddev) {
  PolicyParams p(config);
  const auto& L = p.layout();
  for (const auto* s : {&L.enc_w, &L.dec1_w, &L.dec2_w, &L.embed})
    for (double& v : p.slot(*s)) v = stddev * rng.normal();
  return p;
}

bool PolicyParams::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

DecodingOrder DecodingOrder::identity(std::size_t length) {
  DecodingOrder o;
  o.perm.resize(length);
  std::iota(o.perm.begin(), o.perm.end(), std::uint16_t{0});
  return o;
}

bool DecodingOrder::is_permutation() const {
  std::vector<bool> seen(perm.size(), false);
  for (auto p : perm) {
    if (p >= perm.size() || seen[p]) return false;
    seen[p] = true;
  }
  return true;
}

DecodingOrder sample_order(std::size_t length, Rng& rng) {
  if (length == 0) fail(ErrorKind::InvalidInput, "sample_order: length must be >= 1");
  DecodingOrder o = DecodingOrder::identity(length);
  rng.shuffle(o.perm.begin(), o.perm.end());
  return o;
}

double rbf(double distance, std::size_t center, std::size_t count) {
  const double spacing = kRbfMaxDistance / static_cast<double>(count - 1);
  const double q = (distance - spacing * static_cast<double>(center)) / spacing;
  return std::exp(-q * q);
}

Features featurize(const geometry::Structure& x, const PolicyConfig& config) {
  Features f;
  f.length = x.size();
  f.dim = config.feature_dim();
  f.values.assign(f.length * f.dim, 0.0);
  f.neighbors.resize(f.length);
  if (f.length == 0) fail(ErrorKind::InvalidInput, "featurize: empty structure");
  if (f.length < 2) {
    f.self_only = true;
    for (std::size_t c = 0; c < config.rbf; ++c) f.values[c] = rbf(0.0, c, config.rbf);
    return f;
  }

  std::vector<std::pair<double, std::uint16_t>> d;
  for (std::size_t i = 0; i < f.length; ++i) {
    d.clear();
    for (std::size_t j = 0; j < f.length; ++j)
      if (j != i) d.emplace_back((x.coords[i] - x.coords[j]).norm(), static_cast<std::uint16_t>(j));
    std::sort(d.begin(), d.end());
    const std::size_t kk = std::min<std::size_t>(config.neighbors, d.size());
    double* row = f.values.data() + i * f.dim;
    for (std::size_t s = 0; s < kk; ++s) {
      f.neighbors[i].push_back(d[s].second);
      for (std::size_t c = 0; c < config.rbf; ++c) row[s * config.rbf + c] = rbf(d[s].first, c, config.rbf);
    }
  }
  return f;
}

Encoding encode(const PolicyParams& params, const Features& features) {
  const auto& c = params.config();
  if (features.dim != c.feature_dim())
    fail(ErrorKind::Dimension, "encode: feature width does not match policy configuration");
  const auto& L = params.layout();
  const auto& k = simd::active_kernels();
  Encoding enc{features.length, c.hidden, std::vector<double>(features.length * c.hidden)};
  const double* v = params.values().data();
  for (std::size_t i = 0; i < features.length; ++i) {
    double* h = enc.h.data() + i * c.hidden;
    k.gemv(v + L.enc_w.offset, c.hidden, features.dim, features.row(i).data(), v + L.enc_b.offset, h);
    for (std::size_t r = 0; r < c.hidden; ++r) h[r] = h[r] > 0.0 ? h[r] : 0.0;
  }
  return enc;
}

LogProbResult logprob(const PolicyParams& params, const Features& features, const Encoding& enc,
                      const Sequence& y, const DecodingOrder& order) {
  require_lengths(features, y, order);
  const auto rank = ranks_of(order);
  StepBuffers buf(params.config());
  LogProbResult out;
  out.order = order;
  out.per_position.resize(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    decoder_forward(
        params, features, enc, i, [&](std::uint16_t j) { return rank[j] < rank[i]; },
        [&](std::uint16_t j) { return y[j]; }, buf);
    out.per_position[i] = buf.logits[y[i]] - log_sum_exp(buf.logits);
  }
  for (double v : out.per_position) out.total += v;
  return out;
}

LogProbResult logprob(const PolicyParams& params, const geometry::Structure& x, const Sequence& y,
                      const DecodingOrder& order) {
  const Features f = featurize(x, params.config());
  return logprob(params, f, encode(params, f), y, order);
}

void accumulate_grad(const PolicyParams& params, const Features& features, const Encoding& enc,
                     std::span<const GradTerm> terms, Gradient& out) {
  if (!out.compatible_with(params)) fail(ErrorKind::Dimension, "accumulate_grad: gradient shape mismatch");
  const auto& c = params.config();
  const auto& L = params.layout();
  const auto& k = simd::active_kernels();
  const std::size_t H = c.hidden, E = c.embed, n = features.length;
  const double* v = params.values().data();
  double* g = out.values().data();

  std::vector<double> dh(n * H, 0.0);
  std::vector<double> dlogits(kNumTokens), du(H), da1(H), dz(H + E);
  StepBuffers buf(c);

  for (const GradTerm& term : terms) {
    const Sequence& y = *term.sequence;
    require_lengths(features, y, *term.order);
    if (term.weight == 0.0) continue;
    const auto rank = ranks_of(*term.order);
    for (std::size_t i = 0; i < n; ++i) {
      decoder_forward(
          params, features, enc, i, [&](std::uint16_t j) { return rank[j] < rank[i]; },
          [&](std::uint16_t j) { return y[j]; }, buf);
      const double lse = log_sum_exp(buf.logits);
      // d log p_y / d logits = onehot(y) - softmax
      for (std::size_t t = 0; t < kNumTokens; ++t)
        dlogits[t] = -term.weight * std::exp(buf.logits[t] - lse);
      dlogits[y[i]] += term.weight;

      k.ger_acc(g + L.dec2_w.offset, kNumTokens, H, dlogits.data(), buf.u.data());
      k.axpy(1.0, dlogits.data(), g + L.dec2_b.offset, kNumTokens);
      std::fill(du.begin(), du.end(), 0.0);
      k.gemv_t_acc(v + L.dec2_w.offset, kNumTokens, H, dlogits.data(), du.data());
      for (std::size_t r = 0; r < H; ++r) da1[r] = buf.a1[r] > 0.0 ? du[r] : 0.0;

      k.ger_acc(g + L.dec1_w.offset, H, H + E, da1.data(), buf.z.data());
      k.axpy(1.0, da1.data(), g + L.dec1_b.offset, H);
      std::fill(dz.begin(), dz.end(), 0.0);
      k.gemv_t_acc(v + L.dec1_w.offset, H, H + E, da1.data(), dz.data());
      k.axpy(1.0, dz.data(), dh.data() + i * H, H);
      if (!buf.ctx.empty()) {
        const double inv = 1.0 / static_cast<double>(buf.ctx.size());
        for (std::uint16_t j : buf.ctx)
          k.axpy(inv, dz.data() + H, g + L.embed.offset + std::size_t{y[j]} * E, E);
      }
    }
  }

  std::vector<double> dpre(H);
  for (std::size_t i = 0; i < n; ++i) {
    const double* h = enc.h.data() + i * H;
    bool any = false;
    for (std::size_t r = 0; r < H; ++r) {
      dpre[r] = h[r] > 0.0 ? dh[i * H + r] : 0.0;
      any = any || dpre[r] != 0.0;
    }
    if (!any) continue;
    k.ger_acc(g + L.enc_w.offset, H, features.dim, dpre.data(), features.row(i).data());
    k.axpy(1.0, dpre.data(), g + L.enc_b.offset, H);
  }
}

Gradient grad_logprob(const PolicyParams& params, const geometry::Structure& x, const Sequence& y,
                      const DecodingOrder& order) {
  const Features f = featurize(x, params.config());
  const Encoding enc = encode(params, f);
  Gradient g(params.config());
  const GradTerm term{&y, &order, 1.0};
  accumulate_grad(params, f, enc, std::span(&term, 1), g);
  return g;
}

SampleResult sample(const PolicyParams& params, const Features& features, const Encoding& enc,
                    double temperature, Rng& rng, bool fixed_order) {
  if (!(temperature >= 0.0)) fail(ErrorKind::InvalidInput, "sample: temperature must be >= 0");
  const std::size_t n = features.length;
  DecodingOrder order = fixed_order ? DecodingOrder::identity(n) : sample_order(n, rng);
  std::vector<Token> tokens(n, 0);
  std::vector<bool> done(n, false);
  std::vector<double> per_position(n), weights(kNumTokens);
  StepBuffers buf(params.config());

  for (std::size_t t = 0; t < n; ++t) {
    const std::size_t i = order.perm[t];
    decoder_forward(
        params, features, enc, i, [&](std::uint16_t j) { return static_cast<bool>(done[j]); },
        [&](std::uint16_t j) { return tokens[j]; }, buf);
    Token chosen = 0;
    if (temperature == 0.0) {
      chosen = static_cast<Token>(std::max_element(buf.logits.begin(), buf.logits.end()) - buf.logits.begin());
    } else {
      const double m = *std::max_element(buf.logits.begin(), buf.logits.end());
      for (std::size_t a = 0; a < kNumTokens; ++a) weights[a] = std::exp((buf.logits[a] - m) / temperature);
      chosen = static_cast<Token>(rng.categorical(weights));
    }
    tokens[i] = chosen;
    done[i] = true;
    per_position[i] = buf.logits[chosen] - log_sum_exp(buf.logits);
  }

  SampleResult out{Sequence(std::move(tokens)), {}};
  out.logprob.per_position = std::move(per_position);
  for (double v : out.logprob.per_position) out.logprob.total += v;
  out.logprob.order = std::move(order);
  return out;
}

SampleResult sample(const PolicyParams& params, const geometry::Structure& x, double temperature,
                    Rng& rng, bool fixed_order) {
  const Features f = featurize(x, params.config());
  return sample(params, f, encode(params, f), temperature, rng, fixed_order);
}

void save_checkpoint(const PolicyParams& params, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::Data, "cannot write checkpoint " + path.string());
  const auto& c = params.config();
  for (std::uint32_t v : {kMagic, kVersion, c.hidden, c.neighbors, c.embed, c.rbf,
                          static_cast<std::uint32_t>(kNumTokens)})
    write_u32(out, v);
  for (double v : params.values()) write_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  if (!out) fail(ErrorKind::Data, "failed writing checkpoint " + path.string());
}

PolicyParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Data, "cannot open checkpoint " + path.string());
  if (read_u32(in, "magic") != kMagic) fail(ErrorKind::Data, path.string() + " is not a policy checkpoint");
  if (const auto ver = read_u32(in, "version"); ver != kVersion)
    fail(ErrorKind::Data, "unsupported checkpoint version " + std::to_string(ver));
  PolicyConfig c;
  c.hidden = read_u32(in, "hidden");
  c.neighbors = read_u32(in, "neighbors");
  c.embed = read_u32(in, "embed");
  c.rbf = read_u32(in, "rbf");
  if (read_u32(in, "vocab") != kNumTokens) fail(ErrorKind::Data, "checkpoint vocabulary size mismatch");
  if (c.hidden > 4096 || c.embed > 4096 || c.neighbors > 64 || c.rbf > 256)
    fail(ErrorKind::Data, "checkpoint hyperparameters out of range");
  PolicyParams p(c);
  for (double& v : p.values()) v = static_cast<double>(std::bit_cast<float>(read_u32(in, "tensor data")));
  if (in.peek() != std::char_traits<char>::eof()) fail(ErrorKind::Data, "checkpoint has trailing bytes");
  if (!p.all_finite()) fail(ErrorKind::Data, "checkpoint contains non-finite values");
  return p;
}

}  // namespace pepdpo::policy
