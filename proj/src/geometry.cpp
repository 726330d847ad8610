#include "pepdpo/geometry.hpp"

#include <algorithm>
#include <Eigen/Geometry>
#include <Eigen/LU>
#include <Eigen/SVD>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <sstream>

#include "pepdpo/error.hpp"

namespace pepdpo::geometry {
namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

// Places d so that |cd| = bond, angle(b, c, d) = angle, dihedral(a, b, c, d) = torsion.
Vec3 nerf_place(const Vec3& a, const Vec3& b, const Vec3& c, double bond, double angle,
                double torsion) {
  const Vec3 bc = (c - b).normalized();
  const Vec3 n = (b - a).cross(bc).normalized();
  const Vec3 m = n.cross(bc);
  const Vec3 local(-bond * std::cos(angle), bond * std::sin(angle) * std::cos(torsion),
                   bond * std::sin(angle) * std::sin(torsion));
  return c + bc * local.x() + m * local.y() + n * local.z();
}

void require_same_length(const Structure& a, const Structure& b, const char* op) {
  if (a.size() != b.size())
    fail(ErrorKind::Dimension, std::string(op) + ": structure lengths " + std::to_string(a.size()) +
                                   " and " + std::to_string(b.size()) + " differ");
  if (a.size() == 0) fail(ErrorKind::InvalidInput, std::string(op) + ": empty structure");
}

double tm_sum(const std::vector<Vec3>& ref, const std::vector<Vec3>& mov, const Mat3& R,
              const Vec3& t, double d0, std::vector<double>* dist) {
  double s = 0.0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const double d = (R * mov[i] + t - ref[i]).norm();
    if (dist) (*dist)[i] = d;
    const double q = d / d0;
    s += 1.0 / (1.0 + q * q);
  }
  return s;
}

}  // namespace

double torsion_deg(Token t) { return -180.0 + 18.0 * static_cast<double>(t); }

Structure fold(const Sequence& seq, std::string id) {
  if (seq.empty()) fail(ErrorKind::InvalidInput, "fold: empty sequence");
  const double angle = kBondAngleDeg * kDeg;
  Structure s{std::move(id), {}};
  s.coords.reserve(seq.size());
  s.coords.emplace_back(0.0, 0.0, 0.0);
  if (seq.size() > 1) s.coords.emplace_back(kBondLength, 0.0, 0.0);
  if (seq.size() > 2)
    s.coords.push_back(s.coords[1] +
                       Vec3(-kBondLength * std::cos(angle), kBondLength * std::sin(angle), 0.0));
  for (std::size_t i = 3; i < seq.size(); ++i)
    s.coords.push_back(nerf_place(s.coords[i - 3], s.coords[i - 2], s.coords[i - 1], kBondLength,
                                  angle, torsion_deg(seq[i]) * kDeg));
  return s;
}

double dihedral(const Vec3& a, const Vec3& b, const Vec3& c, const Vec3& d) {
  const Vec3 b0 = a - b;
  const Vec3 b1 = (c - b).normalized();
  const Vec3 b2 = d - c;
  const Vec3 v = b0 - b0.dot(b1) * b1;
  const Vec3 w = b2 - b2.dot(b1) * b1;
  return std::atan2(b1.cross(v).dot(w), v.dot(w));
}

Superposition kabsch_weighted(const std::vector<Vec3>& a, const std::vector<Vec3>& b,
                              const std::vector<double>& weights) {
  if (a.size() != b.size() || a.size() != weights.size())
    fail(ErrorKind::Dimension, "kabsch: point sets differ in length");
  double wsum = 0.0;
  Vec3 ca = Vec3::Zero(), cb = Vec3::Zero();
  for (std::size_t i = 0; i < a.size(); ++i) {
    wsum += weights[i];
    ca += weights[i] * a[i];
    cb += weights[i] * b[i];
  }
  if (!(wsum > 0.0)) fail(ErrorKind::InvalidInput, "kabsch: weights sum to zero");
  ca /= wsum;
  cb /= wsum;

  Mat3 H = Mat3::Zero();
  double spread_a = 0.0, spread_b = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const Vec3 pa = a[i] - ca, pb = b[i] - cb;
    H += weights[i] * pb * pa.transpose();
    spread_a += weights[i] * pa.squaredNorm();
    spread_b += weights[i] * pb.squaredNorm();
  }

  Superposition out;
  constexpr double kTiny = 1e-24;
  if (spread_a <= kTiny || spread_b <= kTiny) {
    out.degenerate = true;
    out.rotation = Mat3::Identity();
  } else {
    Eigen::JacobiSVD<Mat3> svd(H, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const Mat3 U = svd.matrixU(), V = svd.matrixV();
    const double sign = (V * U.transpose()).determinant() < 0.0 ? -1.0 : 1.0;
    Mat3 D = Mat3::Identity();
    D(2, 2) = sign;
    out.rotation = V * D * U.transpose();
  }
  out.translation = ca - out.rotation * cb;

  double sq = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    sq += weights[i] * (out.rotation * b[i] + out.translation - a[i]).squaredNorm();
  out.rmsd = std::sqrt(sq / wsum);
  return out;
}

Superposition kabsch(const Structure& a, const Structure& b) {
  require_same_length(a, b, "kabsch");
  if (a.size() < 2) fail(ErrorKind::Dimension, "kabsch: need at least 2 points");
  return kabsch_weighted(a.coords, b.coords, std::vector<double>(a.size(), 1.0));
}

double tm_d0(std::size_t length) {
  if (length < 22) return 0.5;
  return 1.24 * std::cbrt(static_cast<double>(length) - 15.0) - 1.8;
}

double tm_score_under(const Structure& reference, const Structure& model, const Mat3& rotation,
                      const Vec3& translation) {
  require_same_length(reference, model, "tm_score");
  const double d0 = tm_d0(reference.size());
  return tm_sum(reference.coords, model.coords, rotation, translation, d0, nullptr) /
         static_cast<double>(reference.size());
}

namespace {

// Weighted Kabsch refinement from one seed weighting; returns the best TM sum seen.
// Weights (1 + (d/d0)^2)^-2 make fixed points stationary points of the TM sum.
double refine_tm(const std::vector<Vec3>& ref, const std::vector<Vec3>& mov, std::vector<double> w, double d0) {
  const std::size_t n = ref.size();
  std::vector<double> dist(n);
  Superposition sup = kabsch_weighted(ref, mov, w);
  double best = tm_sum(ref, mov, sup.rotation, sup.translation, d0, &dist);
  double last = best;
  for (int iter = 0; iter < 50; ++iter) {
    for (std::size_t i = 0; i < n; ++i) {
      const double q = dist[i] / d0;
      const double s = 1.0 / (1.0 + q * q);
      w[i] = s * s;
    }
    sup = kabsch_weighted(ref, mov, w);
    const double cur = tm_sum(ref, mov, sup.rotation, sup.translation, d0, &dist);
    if (cur > best) best = cur;
    if (cur - last < 1e-7 * static_cast<double>(n)) break;
    last = cur;
  }
  return best;
}

}  // namespace

double tm_score(const Structure& reference, const Structure& model) {
  require_same_length(reference, model, "tm_score");
  const std::size_t n = reference.size();
  // A single point always coincides with the reference after translation.
  if (n == 1) return 1.0;

  const double d0 = tm_d0(n);
  const auto& ref = reference.coords;
  const auto& mov = model.coords;

  double best = refine_tm(ref, mov, std::vector<double>(n, 1.0), d0);
  // Fragment seeds: windows of n/2, n/4, ... (>= 4) at half-window steps,
  // then every window of 4. The full-chain fit alone settles in whichever
  // local optimum the global fit happens to favor.
  auto seed_window = [&](std::size_t start, std::size_t len) {
    std::vector<double> w(n, 0.0);
    std::fill(w.begin() + static_cast<std::ptrdiff_t>(start), w.begin() + static_cast<std::ptrdiff_t>(start + len), 1.0);
    best = std::max(best, refine_tm(ref, mov, std::move(w), d0));
  };
  for (std::size_t len = n / 2; len > 4; len /= 2)
    for (std::size_t start = 0; start + len <= n; start += len / 2) seed_window(start, len);
  if (n > 4)
    for (std::size_t start = 0; start + 4 <= n; ++start) seed_window(start, 4);
  return best / static_cast<double>(n);
}

double reward(const Structure& x, const Sequence& y) {
  if (x.size() != y.size())
    fail(ErrorKind::Dimension, "reward: structure has " + std::to_string(x.size()) +
                                   " residues, sequence has " + std::to_string(y.size()));
  return tm_score(x, fold(y));
}

Structure apply_rigid(const Structure& s, const Mat3& rotation, const Vec3& translation) {
  Structure out{s.id, {}};
  out.coords.reserve(s.size());
  for (const Vec3& p : s.coords) out.coords.push_back(rotation * p + translation);
  return out;
}

std::string to_record(const Structure& s) {
  std::string line = s.id + " " + std::to_string(s.size());
  char buf[48];
  for (const Vec3& p : s.coords) {
    for (int k = 0; k < 3; ++k) {
      std::snprintf(buf, sizeof buf, " %.9f", p[k]);
      line += buf;
    }
  }
  line += '\n';
  return line;
}

Structure from_record(const std::string& line) {
  std::istringstream in(line);
  Structure s;
  long long n = -1;
  if (!(in >> s.id >> n) || n < 1 || n > static_cast<long long>(kMaxResidues))
    fail(ErrorKind::Data, "structure record: bad id/length header");
  s.coords.resize(static_cast<std::size_t>(n));
  for (auto& p : s.coords) {
    for (int k = 0; k < 3; ++k) {
      std::string tok;
      if (!(in >> tok)) fail(ErrorKind::Data, "structure record '" + s.id + "': too few coordinates");
      char* end = nullptr;
      p[k] = std::strtod(tok.c_str(), &end);
      if (*end != '\0' || !std::isfinite(p[k]))
        fail(ErrorKind::Data, "structure record '" + s.id + "': bad coordinate '" + tok + "'");
    }
  }
  std::string extra;
  if (in >> extra) fail(ErrorKind::Data, "structure record '" + s.id + "': trailing data");
  return s;
}

}  // namespace pepdpo::geometry
