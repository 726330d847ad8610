#pragma once

// Toy fold oracle and structural similarity.
//
// A structure is a C-alpha trace: one point per residue. `fold` turns a
// sequence into a trace with fixed virtual bond length and angle and a
// per-token dihedral; `tm_score` compares two equal-length traces with
// positional correspondence.

#include <Eigen/Core>
#include <array>
#include <iosfwd>
#include <string>
#include <vector>

#include "pepdpo/sequence.hpp"

namespace pepdpo::geometry {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

inline constexpr double kBondLength = 3.8;
inline constexpr double kBondAngleDeg = 120.0;
inline constexpr std::size_t kMaxResidues = 50;

// Dihedral (degrees) assigned to each token: -180 + 18 * alphabet index.
double torsion_deg(Token t);

struct Structure {
  std::string id;
  std::vector<Vec3> coords;

  std::size_t size() const { return coords.size(); }
};

// Residue 0 sits at the origin, residue 1 on +x, residue 2 in the xy plane.
// Residue i >= 3 is placed from residues i-3, i-2, i-1 with the dihedral of
// token i. Tokens 0..2 therefore do not influence the trace.
Structure fold(const Sequence& seq, std::string id = {});

// Signed dihedral angle (radians) of the four points, IUPAC convention.
double dihedral(const Vec3& a, const Vec3& b, const Vec3& c, const Vec3& d);

struct Superposition {
  double rmsd = 0.0;
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();
  bool degenerate = false;
};

// Least-RMSD proper rigid motion mapping `b` onto `a` (a ~ R b + t).
Superposition kabsch(const Structure& a, const Structure& b);

// Weighted variant; weights must be nonnegative with positive sum.
Superposition kabsch_weighted(const std::vector<Vec3>& a, const std::vector<Vec3>& b,
                              const std::vector<double>& weights);

double tm_d0(std::size_t length);

// Positional TM-score of `model` against `reference`. The superposition is
// refined iteratively from the full-chain Kabsch fit and from fragment
// seeds; the best score seen is returned.
double tm_score(const Structure& reference, const Structure& model);

// TM-score of a fixed superposition (no search). Exposed for oracles.
double tm_score_under(const Structure& reference, const Structure& model, const Mat3& rotation,
                      const Vec3& translation);

// tm_score(x, fold(y)).
double reward(const Structure& x, const Sequence& y);

Structure apply_rigid(const Structure& s, const Mat3& rotation, const Vec3& translation);

// Line-oriented text record:
//   <id> <L> x0 y0 z0 x1 y1 z1 ...
// coordinates printed with 9 decimals, single spaces, '\n' terminated.
std::string to_record(const Structure& s);
Structure from_record(const std::string& line);

}  // namespace pepdpo::geometry
