#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace equiquant {

using Vec3 = std::array<double, 3>;

inline Vec3 operator+(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 operator-(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 operator*(double s, const Vec3& a) { return {s * a[0], s * a[1], s * a[2]}; }
inline double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }

/// Degenerate or otherwise unusable molecular geometry.
class GeometryError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Proper rotation stored as a row-major 3x3 matrix.
struct Rotation {
  std::array<std::array<double, 3>, 3> m{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};

  static Rotation identity() { return {}; }

  Vec3 apply(const Vec3& v) const {
    return {m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2], m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2]};
  }

  Rotation transposed() const {
    Rotation t;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) t.m[i][j] = m[j][i];
    return t;
  }

  Rotation operator*(const Rotation& o) const {
    Rotation r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) r.m[i][j] = m[i][0] * o.m[0][j] + m[i][1] * o.m[1][j] + m[i][2] * o.m[2][j];
    return r;
  }

  double determinant() const {
    return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
           m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
  }

  /// max |R^T R - I| entry.
  double orthogonality_error() const {
    const Rotation p = transposed() * *this;
    double e = 0.0;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) e = std::max(e, std::fabs(p.m[i][j] - (i == j ? 1.0 : 0.0)));
    return e;
  }

  static Rotation about_axis(Vec3 axis, double angle) {
    const double n = norm(axis);
    axis = (1.0 / n) * axis;
    const double c = std::cos(angle), s = std::sin(angle), t = 1.0 - c;
    const double x = axis[0], y = axis[1], z = axis[2];
    Rotation r;
    r.m = {{{t * x * x + c, t * x * y - s * z, t * x * z + s * y},
            {t * x * y + s * z, t * y * y + c, t * y * z - s * x},
            {t * x * z - s * y, t * y * z + s * x, t * z * z + c}}};
    return r;
  }

  static Rotation from_quaternion(double w, double x, double y, double z) {
    const double n = std::sqrt(w * w + x * x + y * y + z * z);
    w /= n;
    x /= n;
    y /= n;
    z /= n;
    Rotation r;
    r.m = {{{1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)},
            {2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)},
            {2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)}}};
    return r;
  }
};

/// Haar-uniform rotation from a normalised Gaussian quaternion.
inline Rotation random_rotation(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  double q[4];
  double n2 = 0.0;
  do {
    for (double& v : q) v = normal(rng);
    n2 = q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3];
  } while (n2 < 1e-12);
  return Rotation::from_quaternion(q[0], q[1], q[2], q[3]);
}

struct MolGraph {
  std::vector<int> species;            // atomic numbers
  std::vector<Vec3> positions;         // Angstrom
  std::vector<std::vector<int>> neighbors;
  double cutoff = 0.0;
  std::optional<double> energy;        // eV
  std::optional<std::vector<Vec3>> forces;  // eV/Angstrom

  std::size_t size() const noexcept { return species.size(); }
  bool has_references() const noexcept { return energy.has_value() && forces.has_value(); }
};

inline constexpr double kDuplicateDistance = 1e-8;

/// Neighbor lists over all pairs with distance <= cutoff (O(n^2) scan).
inline std::vector<std::vector<int>> neighbor_lists(const std::vector<Vec3>& positions, double cutoff) {
  const std::size_t n = positions.size();
  std::vector<std::vector<int>> nbrs(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double d = norm(positions[j] - positions[i]);
      if (d < kDuplicateDistance) {
        throw GeometryError("build_graph: atoms " + std::to_string(i) + " and " + std::to_string(j) +
                            " coincide (distance " + std::to_string(d) + " A)");
      }
      if (d <= cutoff) {
        nbrs[i].push_back(static_cast<int>(j));
        nbrs[j].push_back(static_cast<int>(i));
      }
    }
  }
  for (auto& l : nbrs) std::sort(l.begin(), l.end());
  return nbrs;
}

inline MolGraph build_graph(std::vector<int> species, std::vector<Vec3> positions, double cutoff) {
  if (species.empty()) throw GeometryError("build_graph: no atoms");
  if (species.size() != positions.size()) throw GeometryError("build_graph: species/positions length mismatch");
  if (!(cutoff > 0.0) || !std::isfinite(cutoff)) throw GeometryError("build_graph: cutoff must be positive");
  for (const Vec3& p : positions)
    for (double c : p)
      if (!std::isfinite(c)) throw GeometryError("build_graph: non-finite position");
  MolGraph g;
  g.neighbors = neighbor_lists(positions, cutoff);
  g.species = std::move(species);
  g.positions = std::move(positions);
  g.cutoff = cutoff;
  return g;
}

/// Positions and reference forces are rotated; topology, species and energy are kept.
inline MolGraph rotate_graph(const MolGraph& g, const Rotation& r) {
  MolGraph out = g;
  for (Vec3& p : out.positions) p = r.apply(p);
  if (out.forces)
    for (Vec3& f : *out.forces) f = r.apply(f);
  return out;
}

inline MolGraph translate_graph(const MolGraph& g, const Vec3& offset) {
  MolGraph out = g;
  for (Vec3& p : out.positions) p = p + offset;
  return out;
}

/// Gaussian radial basis with centres evenly spaced on (0, cutoff], width equal
/// to the spacing, times the cosine envelope 0.5 (cos(pi d / cutoff) + 1).
inline std::vector<double> rbf_expand(double distance, std::size_t n_basis, double cutoff) {
  if (!(distance > 0.0)) throw GeometryError("rbf_expand: distance must be positive");
  if (distance > cutoff) throw GeometryError("rbf_expand: distance beyond cutoff");
  if (n_basis == 0) throw GeometryError("rbf_expand: n_basis must be positive");
  const double spacing = cutoff / static_cast<double>(n_basis);
  const double envelope = 0.5 * (std::cos(std::numbers::pi * distance / cutoff) + 1.0);
  std::vector<double> out(n_basis);
  for (std::size_t k = 0; k < n_basis; ++k) {
    const double centre = spacing * static_cast<double>(k + 1);
    const double z = (distance - centre) / spacing;
    out[k] = envelope * std::exp(-0.5 * z * z);
  }
  return out;
}

inline double rbf_centre(std::size_t k, std::size_t n_basis, double cutoff) {
  return cutoff / static_cast<double>(n_basis) * static_cast<double>(k + 1);
}

}  // namespace equiquant
