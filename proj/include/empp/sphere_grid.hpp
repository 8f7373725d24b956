#pragma once

// S^2 sampling grids, Fourier synthesis of steerable coefficients onto grid
// nodes, quadrature analysis back to coefficients, and the grid softmax.
//
// Node order is theta-major: s = i * n_phi + j. A grid caches the spherical
// harmonic values it was built to support, so synthesis/analysis are matrix
// passes over contiguous storage.

#include <cmath>
#include <cstdio>
#include <ostream>
#include <stdexcept>
#include <vector>

#include "empp/so3.hpp"

namespace empp {

enum class GridKind { gauss_legendre_theta, equiangular };

struct SphereGrid {
  GridKind kind = GridKind::gauss_legendre_theta;
  int n_theta = 0, n_phi = 0;
  int l_max_support = 0;
  std::vector<double> thetas;   // ascending, size n_theta
  std::vector<double> phis;     // uniform midpoints, size n_phi
  std::vector<double> weights;  // steradians, node order, size S
  std::vector<Vec3> units;      // node unit vectors
  std::vector<double> sh;       // S x (l_max_support+1)^2, node-major

  int size() const { return n_theta * n_phi; }
  int sh_dim() const { return (l_max_support + 1) * (l_max_support + 1); }

  bool same_shape(const SphereGrid& o) const {
    return kind == o.kind && n_theta == o.n_theta && n_phi == o.n_phi &&
           l_max_support == o.l_max_support;
  }
};

// Builds a grid validated for band limit l_max. Gauss-Legendre in theta is
// exact for band-limited integrands; equiangular uses sin(theta)-scaled
// trapezoid weights rescaled so the total solid angle is exactly 4*pi.
inline SphereGrid make_grid(int n_theta, int n_phi, GridKind kind, int l_max) {
  if (l_max < 0 || l_max > kMaxDegree)
    throw std::invalid_argument("make_grid: unsupported l_max");
  if (n_theta < 1 || n_phi < 1)
    throw std::invalid_argument("make_grid: grid dimensions must be positive");
  if (n_theta < 2 * l_max || n_phi < 2 * l_max)
    throw std::invalid_argument(
        "make_grid: Nyquist violation, need n_theta and n_phi >= 2*l_max");
  if (kind == GridKind::equiangular && n_theta < 2)
    throw std::invalid_argument("make_grid: equiangular grids need n_theta >= 2");

  SphereGrid g;
  g.kind = kind;
  g.n_theta = n_theta;
  g.n_phi = n_phi;
  g.l_max_support = l_max;
  g.phis.resize(static_cast<std::size_t>(n_phi));
  for (int j = 0; j < n_phi; ++j) g.phis[j] = 2.0 * M_PI * (j + 0.5) / n_phi;

  std::vector<double> theta_w(static_cast<std::size_t>(n_theta));
  g.thetas.resize(static_cast<std::size_t>(n_theta));
  if (kind == GridKind::gauss_legendre_theta) {
    std::vector<double> x, w;
    detail::gauss_legendre(n_theta, x, w);
    // x ascends in cos(theta); reverse so theta ascends.
    for (int i = 0; i < n_theta; ++i) {
      g.thetas[i] = std::acos(std::clamp(x[n_theta - 1 - i], -1.0, 1.0));
      theta_w[i] = w[n_theta - 1 - i];
    }
  } else {
    const double h = M_PI / (n_theta - 1);
    double sum = 0.0;
    for (int i = 0; i < n_theta; ++i) {
      g.thetas[i] = h * i;
      const double trap = (i == 0 || i == n_theta - 1) ? 0.5 : 1.0;
      theta_w[i] = std::sin(g.thetas[i]) * trap * h;
      sum += theta_w[i];
    }
    // Rescale so the theta weights integrate sin(theta) to exactly 2.
    for (double& w : theta_w) w *= 2.0 / sum;
  }

  const double phi_w = 2.0 * M_PI / n_phi;
  g.weights.resize(static_cast<std::size_t>(g.size()));
  g.units.resize(static_cast<std::size_t>(g.size()));
  g.sh.resize(static_cast<std::size_t>(g.size()) * g.sh_dim());
  for (int i = 0; i < n_theta; ++i) {
    const double st = std::sin(g.thetas[i]), ct = std::cos(g.thetas[i]);
    for (int j = 0; j < n_phi; ++j) {
      const int s = i * n_phi + j;
      g.weights[s] = theta_w[i] * phi_w;
      g.units[s] = Vec3{st * std::cos(g.phis[j]), st * std::sin(g.phis[j]), ct};
      detail::sh_all(l_max, g.units[s], g.sh.data() + static_cast<std::size_t>(s) * g.sh_dim());
    }
  }
  return g;
}

struct GridSignal {
  const SphereGrid* grid = nullptr;
  int channels = 1;
  std::vector<double> values;  // point-major: values[s*channels + c]
};

namespace detail {

// Channel count shared by all blocks; synthesis needs one channel per copy.
inline int uniform_multiplicity(const IrrepsLayout& layout) {
  int mult = -1;
  for (const auto& b : layout.blocks) {
    if (mult == -1) mult = b.mult;
    if (b.mult != mult)
      throw std::invalid_argument(
          "to_grid: all degree blocks must share one multiplicity");
  }
  return mult < 0 ? 1 : mult;
}

}  // namespace detail

// Synthesis: value(s, c) = sum_{l,m} f^{l,m}_c Y^l_m(node s).
inline GridSignal to_grid(const SteerableTensor& coeffs, const SphereGrid& grid) {
  if (coeffs.layout.max_degree() > grid.l_max_support)
    throw std::invalid_argument("to_grid: coefficient degree exceeds grid support");
  const int channels = detail::uniform_multiplicity(coeffs.layout);
  GridSignal out;
  out.grid = &grid;
  out.channels = channels;
  out.values.assign(static_cast<std::size_t>(grid.size()) * channels, 0.0);
  const int shd = grid.sh_dim();
  for (int s = 0; s < grid.size(); ++s) {
    const double* y = grid.sh.data() + static_cast<std::size_t>(s) * shd;
    double* dst = out.values.data() + static_cast<std::size_t>(s) * channels;
    for (std::size_t bi = 0; bi < coeffs.layout.blocks.size(); ++bi) {
      const auto& b = coeffs.layout.blocks[bi];
      const int d = 2 * b.degree + 1;
      const double* yb = y + b.degree * b.degree;
      const double* src = coeffs.values.data() + coeffs.layout.block_offset(bi);
      for (int c = 0; c < channels; ++c) {
        double acc = 0.0;
        for (int m = 0; m < d; ++m) acc += src[c * d + m] * yb[m];
        dst[c] += acc;
      }
    }
  }
  return out;
}

// Analysis: f^{l,m} = sum_s w_s signal_s Y^l_m(node s); exact on the
// Gauss-Legendre kind for band-limited signals.
inline SteerableTensor from_grid(const GridSignal& signal, const SphereGrid& grid,
                                 int l_max) {
  if (signal.grid == nullptr || !signal.grid->same_shape(grid))
    throw std::invalid_argument("from_grid: signal does not belong to this grid");
  if (signal.channels != 1)
    throw std::invalid_argument("from_grid: analysis expects a single channel");
  if (l_max > grid.l_max_support)
    throw std::invalid_argument("from_grid: l_max exceeds the grid's Nyquist bound");
  std::vector<IrrepsLayout::Block> blocks;
  for (int l = 0; l <= l_max; ++l) blocks.push_back({1, l});
  SteerableTensor out = zeros_like(IrrepsLayout::of(std::move(blocks)));
  const int shd = grid.sh_dim();
  const int nc = (l_max + 1) * (l_max + 1);
  for (int s = 0; s < grid.size(); ++s) {
    const double ws = grid.weights[s] * signal.values[s];
    if (ws == 0.0) continue;
    const double* y = grid.sh.data() + static_cast<std::size_t>(s) * shd;
    for (int k = 0; k < nc; ++k) out.values[k] += ws * y[k];
  }
  return out;
}

struct DirectionDistribution {
  const SphereGrid* grid = nullptr;
  std::vector<double> p;  // cell masses, sum 1
  // Whether the masses carry the node quadrature weights. Labels are built as
  // density x cell weight, so the density mode is recovered by dividing the
  // weights back out. A softmax of a rotation-covariant field is different:
  // it cannot express the grid-fixed weight factor at all (that factor does
  // not rotate with the input), so its trained optimum is the density pattern
  // itself and its raw argmax already locates the mode — dividing by the
  // weights there would drag the peak into the tiny polar cells.
  bool weighted = true;

  // Peak direction = node of maximum probability density.
  int peak_index() const {
    int best = -1;
    double best_density = -1.0;
    for (std::size_t s = 0; s < p.size(); ++s) {
      double d = p[s];
      if (weighted) {
        const double w = grid->weights[s];
        if (w <= 0.0) continue;
        d /= w;
      }
      if (d > best_density) {
        best_density = d;
        best = static_cast<int>(s);
      }
    }
    return best;
  }

  Direction peak_direction() const { return Direction(grid->units[peak_index()]); }
};

// Plain max-subtracted softmax over grid nodes (no quadrature weighting).
inline DirectionDistribution grid_softmax(const GridSignal& logits, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("grid_softmax: tau must be positive");
  if (logits.channels != 1)
    throw std::invalid_argument("grid_softmax: expects a single channel");
  DirectionDistribution out;
  out.grid = logits.grid;
  out.weighted = false;
  out.p.resize(logits.values.size());
  double mx = logits.values[0];
  for (double v : logits.values) mx = std::max(mx, v);
  double sum = 0.0;
  for (std::size_t s = 0; s < logits.values.size(); ++s) {
    out.p[s] = std::exp((logits.values[s] - mx) / tau);
    sum += out.p[s];
  }
  const double inv = 1.0 / sum;
  for (double& v : out.p) v *= inv;
  return out;
}

// CSV layout (theta, phi, weight, value): radians, node order, 17 significant
// digits so a reader recovers the doubles exactly.
inline void write_grid_csv(std::ostream& os, const SphereGrid& grid,
                           const std::vector<double>& values) {
  if (values.size() != static_cast<std::size_t>(grid.size()))
    throw std::invalid_argument("write_grid_csv: one value per node required");
  os << "theta,phi,weight,value\n";
  char buf[128];
  for (int s = 0; s < grid.size(); ++s) {
    const int i = s / grid.n_phi, j = s % grid.n_phi;
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g\n", grid.thetas[i],
                  grid.phis[j], grid.weights[s], values[s]);
    os << buf;
  }
}

}  // namespace empp
