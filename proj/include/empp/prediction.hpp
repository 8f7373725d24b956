#pragma once

// Position-prediction targets and geometry: discretized radius distributions,
// sphere-grid direction distributions, KL divergence, masked molecules, and
// the point-estimate reconstruction used for evaluation.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <optional>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "empp/data.hpp"
#include "empp/sphere_grid.hpp"

namespace empp {

// --- Radius distributions ---------------------------------------------------

struct RadiusBinning {
  int bins = 128;
  double r_min = 0.9;
  double r_max = 5.0;

  double width() const { return (r_max - r_min) / bins; }
  double center(int b) const { return r_min + (b + 0.5) * width(); }
};

struct RadiusDistribution {
  RadiusBinning binning;
  std::vector<double> p;
  bool truncated = false;  // label mass was clipped at the interval ends

  int peak_bin() const {
    int best = 0;
    for (std::size_t b = 1; b < p.size(); ++b)
      if (p[b] > p[static_cast<std::size_t>(best)]) best = static_cast<int>(b);
    return best;
  }
  double peak_center() const { return binning.center(peak_bin()); }
};

// Gaussian density evaluated at the bin centers, renormalized to sum 1.
// Exponents are max-subtracted so tiny sigmas degrade to an exact one-hot
// instead of underflowing.
inline RadiusDistribution radius_label(double distance,
                                       const RadiusBinning& binning = {},
                                       double sigma = 0.5) {
  if (!(distance > 0.0))
    throw std::invalid_argument("radius_label: distance must be positive");
  if (!(sigma > 0.0)) throw std::invalid_argument("radius_label: sigma must be positive");
  RadiusDistribution q;
  q.binning = binning;
  q.p.resize(static_cast<std::size_t>(binning.bins));
  double best = -std::numeric_limits<double>::infinity();
  std::vector<double> e(q.p.size());
  for (int b = 0; b < binning.bins; ++b) {
    const double d = binning.center(b) - distance;
    e[static_cast<std::size_t>(b)] = -d * d / (2.0 * sigma * sigma);
    best = std::max(best, e[static_cast<std::size_t>(b)]);
  }
  double sum = 0.0;
  for (std::size_t b = 0; b < q.p.size(); ++b) {
    q.p[b] = std::exp(e[b] - best);
    sum += q.p[b];
  }
  for (double& v : q.p) v /= sum;
  q.truncated = distance > binning.r_max + 3.0 * sigma ||
                distance < binning.r_min - 3.0 * sigma;
  return q;
}

inline void write_radius_csv(std::ostream& os, const RadiusDistribution& q) {
  os << "bin_center,probability\n";
  char buf[80];
  for (std::size_t b = 0; b < q.p.size(); ++b) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g\n",
                  q.binning.center(static_cast<int>(b)), q.p[b]);
    os << buf;
  }
}

inline void write_radius_csv(const std::string& path, const RadiusDistribution& q) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  write_radius_csv(f, q);
}

// --- Direction label --------------------------------------------------------

// Soft label: node mass proportional to quadrature weight times
// exp(sum_{l<=l_max} Y(r_hat) . Y(node)), normalized to sum 1.
inline DirectionDistribution direction_label(const Direction& dir,
                                             const SphereGrid& grid, int l_max = 2) {
  if (l_max < 0 || l_max > grid.l_max_support)
    throw std::invalid_argument(
        "direction_label: band limit exceeds what the grid resolves");
  const std::vector<double> coeff = sh_components(dir, l_max);
  const std::size_t dim = coeff.size();
  const std::size_t stride = static_cast<std::size_t>(grid.sh_dim());
  DirectionDistribution out;
  out.grid = &grid;
  out.p.resize(static_cast<std::size_t>(grid.size()));
  std::vector<double> z(out.p.size());
  double zmax = -std::numeric_limits<double>::infinity();
  for (std::size_t s = 0; s < out.p.size(); ++s) {
    double e = 0.0;
    const double* row = grid.sh.data() + s * stride;
    for (std::size_t k = 0; k < dim; ++k) e += coeff[k] * row[k];
    z[s] = e;
    zmax = std::max(zmax, e);
  }
  double sum = 0.0;
  for (std::size_t s = 0; s < out.p.size(); ++s) {
    out.p[s] = grid.weights[s] * std::exp(z[s] - zmax);
    sum += out.p[s];
  }
  for (double& v : out.p) v /= sum;
  return out;
}

// --- KL divergence ----------------------------------------------------------

// sum q log(q/p) with p floored at 1e-12 and 0 log 0 := 0.
inline double kl_div(const std::vector<double>& q, const std::vector<double>& p) {
  if (q.size() != p.size())
    throw std::invalid_argument("kl_div: distributions must share support");
  double s = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i)
    if (q[i] > 0.0) s += q[i] * (std::log(q[i]) - std::log(std::max(p[i], 1e-12)));
  return s;
}

// --- Masked molecules -------------------------------------------------------

struct IsolatedMaskError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A molecule with one atom's position held out. The backbone sees only the
// remaining atoms; the masked atom's attributes are kept for injection, and
// its true position defines the neighbor set and labels.
struct MaskedMolecule {
  const Molecule* base = nullptr;
  int masked_index = -1;
  int masked_z = 0;
  std::vector<int> kept;      // original indices of the surviving atoms
  Molecule sub;               // the surviving atoms
  NeighborList nl;            // edges among the surviving atoms
  std::vector<int> neighbors; // sub-indices within the cutoff of the true position
  std::vector<Vec3> r_label;  // per neighbor: true position minus neighbor position
};

inline MaskedMolecule make_masked(const Molecule& mol, int index, double cutoff) {
  if (index < 0 || static_cast<std::size_t>(index) >= mol.size())
    throw std::invalid_argument("make_masked: index out of range");
  MaskedMolecule mm;
  mm.base = &mol;
  mm.masked_index = index;
  mm.masked_z = mol.z[static_cast<std::size_t>(index)];
  for (std::size_t a = 0; a < mol.size(); ++a) {
    if (static_cast<int>(a) == index) continue;
    mm.kept.push_back(static_cast<int>(a));
    mm.sub.z.push_back(mol.z[a]);
    mm.sub.pos.push_back(mol.pos[a]);
  }
  mm.nl = neighbor_list(mm.sub, cutoff);
  const Vec3 truth = mol.pos[static_cast<std::size_t>(index)];
  for (std::size_t k = 0; k < mm.sub.size(); ++k) {
    const Vec3 r = truth - mm.sub.pos[k];
    const double d = r.norm();
    if (d < 1e-12)
      throw std::invalid_argument("make_masked: masked atom coincides with a neighbor");
    if (d <= cutoff) {
      mm.neighbors.push_back(static_cast<int>(k));
      mm.r_label.push_back(r);
    }
  }
  if (mm.neighbors.empty())
    throw IsolatedMaskError("make_masked: masked atom has no neighbors within cutoff");
  return mm;
}

// n distinct mask candidates, uniform without replacement over the atoms that
// have at least one in-cutoff partner.
inline std::vector<int> sample_mask_indices(const Molecule& mol, int n, double cutoff,
                                            std::mt19937_64& rng) {
  std::vector<int> eligible;
  for (std::size_t a = 0; a < mol.size(); ++a) {
    bool has = false;
    for (std::size_t b = 0; b < mol.size() && !has; ++b) {
      if (a == b) continue;
      const double d = (mol.pos[a] - mol.pos[b]).norm();
      if (d > 0.0 && d <= cutoff) has = true;
    }
    if (has) eligible.push_back(static_cast<int>(a));
  }
  if (n < 1 || static_cast<std::size_t>(n) > eligible.size())
    throw std::invalid_argument("sample_mask_indices: need 1 <= n <= eligible atoms");
  std::shuffle(eligible.begin(), eligible.end(), rng);
  eligible.resize(static_cast<std::size_t>(n));
  return eligible;
}

// --- Labels and point estimates ---------------------------------------------

struct NeighborLabels {
  RadiusDistribution radius;
  DirectionDistribution direction;
};

inline std::vector<NeighborLabels> position_labels(const MaskedMolecule& mm,
                                                   const SphereGrid& grid,
                                                   const RadiusBinning& binning,
                                                   double sigma, int l_max) {
  std::vector<NeighborLabels> out;
  out.reserve(mm.neighbors.size());
  for (const Vec3& r : mm.r_label) {
    NeighborLabels nl;
    nl.radius = radius_label(r.norm(), binning, sigma);
    nl.direction = direction_label(Direction(r), grid, l_max);
    out.push_back(std::move(nl));
  }
  return out;
}

struct PositionEstimate {
  Vec3 aggregate;
  std::vector<Vec3> per_neighbor;
  double spread = 0.0;  // mean distance of per-neighbor estimates from the mean
};

// Per neighbor: neighbor position + peak radius along the peak direction;
// the aggregate is the coordinate-wise mean.
inline PositionEstimate predicted_position(
    const std::vector<RadiusDistribution>& radii,
    const std::vector<DirectionDistribution>& directions,
    const std::vector<Vec3>& neighbor_positions) {
  const std::size_t n = radii.size();
  if (n == 0 || directions.size() != n || neighbor_positions.size() != n)
    throw std::invalid_argument("predicted_position: need matching nonempty inputs");
  PositionEstimate est;
  for (std::size_t k = 0; k < n; ++k) {
    const double r = radii[k].peak_center();
    const Vec3 d = directions[k].peak_direction().unit();
    est.per_neighbor.push_back(neighbor_positions[k] + d * r);
    est.aggregate = est.aggregate + est.per_neighbor.back();
  }
  est.aggregate = est.aggregate * (1.0 / static_cast<double>(n));
  for (const Vec3& p : est.per_neighbor)
    est.spread += (p - est.aggregate).norm();
  est.spread /= static_cast<double>(n);
  return est;
}

}  // namespace empp
