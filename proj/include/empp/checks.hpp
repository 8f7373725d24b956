#pragma once

// Verification suite shared by the CLI's check subcommand and the acceptance
// harness: quadrature orthonormality, rotation steerability, coupling
// equivariance, grid transform round-trip, distribution equivariance of the
// full model, and gradient fidelity. Each check reports a measured error
// against a fixed threshold; results emit as one JSON line per check.

#include <cmath>
#include <cstdio>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "empp/autodiff.hpp"
#include "empp/data.hpp"
#include "empp/model.hpp"
#include "empp/prediction.hpp"
#include "empp/so3.hpp"
#include "empp/sphere_grid.hpp"

namespace empp {

struct CheckResult {
  std::string name;
  double error = 0.0;
  double threshold = 0.0;
  bool pass = false;
};

namespace detail {

inline CheckResult make_result(std::string name, double error, double threshold) {
  CheckResult r;
  r.name = std::move(name);
  r.error = error;
  r.threshold = threshold;
  r.pass = error < threshold;
  return r;
}

inline Direction random_direction(std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  while (true) {
    const Vec3 v{g(rng), g(rng), g(rng)};
    if (v.norm() > 1e-6) return Direction(v);
  }
}

}  // namespace detail

// max |sum_s w_s Y_i(s) Y_j(s) - delta_ij| over all pairs of harmonics with
// l <= l_max on a quadrature-exact grid.
inline CheckResult check_sh_orthonormality(int l_max = 3, int n_theta = 100,
                                           int n_phi = 100) {
  const SphereGrid grid =
      make_grid(n_theta, n_phi, GridKind::gauss_legendre_theta, l_max);
  const int dim = (l_max + 1) * (l_max + 1);
  double err = 0.0;
  for (int i = 0; i < dim; ++i)
    for (int j = i; j < dim; ++j) {
      double acc = 0.0;
      for (int s = 0; s < grid.size(); ++s)
        acc += grid.weights[static_cast<std::size_t>(s)] *
               grid.sh[static_cast<std::size_t>(s) * static_cast<std::size_t>(grid.sh_dim()) +
                       static_cast<std::size_t>(i)] *
               grid.sh[static_cast<std::size_t>(s) * static_cast<std::size_t>(grid.sh_dim()) +
                       static_cast<std::size_t>(j)];
      err = std::max(err, std::abs(acc - (i == j ? 1.0 : 0.0)));
    }
  return detail::make_result("sh_orthonormality", err, 1e-9);
}

// max |Y(R r) - D(R) Y(r)| over random rotations and directions, l <= l_max.
inline CheckResult check_sh_steerability(int samples = 100, int l_max = 3,
                                         std::uint64_t seed = 12345) {
  std::mt19937_64 rng(seed);
  double err = 0.0;
  for (int k = 0; k < samples; ++k) {
    const Rotation rot = Rotation::random(rng);
    const Direction dir = detail::random_direction(rng);
    const SteerableTensor lhs = sh_vector(Direction(rot.apply(dir.unit())), l_max);
    const SteerableTensor rhs = rotate_steerable(sh_vector(dir, l_max), rot);
    for (std::size_t i = 0; i < lhs.values.size(); ++i)
      err = std::max(err, std::abs(lhs.values[i] - rhs.values[i]));
  }
  return detail::make_result("sh_steerability", err, 1e-9);
}

// For every coupling (l1, l2) -> l_out with degrees <= l_max: contracting
// rotated inputs equals rotating the contraction. Routes through the cached
// coupling tables, so a poisoned table fails here.
inline CheckResult check_cg_equivariance(int inputs_per_path = 20, int l_max = 3,
                                         std::uint64_t seed = 54321) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  double err = 0.0;
  for (int l1 = 0; l1 <= l_max; ++l1)
    for (int l2 = 0; l2 <= l_max; ++l2)
      for (int l3 = std::abs(l1 - l2); l3 <= std::min(l_max, l1 + l2); ++l3) {
        const CgTable& table = real_cg(l1, l2, l3);
        const IrrepsLayout lay1 = IrrepsLayout::of({{1, l1}});
        const IrrepsLayout lay2 = IrrepsLayout::of({{1, l2}});
        const IrrepsLayout lay3 = IrrepsLayout::of({{1, l3}});
        for (int trial = 0; trial < inputs_per_path; ++trial) {
          SteerableTensor u, v;
          u.layout = lay1;
          v.layout = lay2;
          u.values.resize(static_cast<std::size_t>(2 * l1 + 1));
          v.values.resize(static_cast<std::size_t>(2 * l2 + 1));
          for (double& x : u.values) x = g(rng);
          for (double& x : v.values) x = g(rng);
          const Rotation rot = Rotation::random(rng);

          auto contract = [&](const SteerableTensor& a, const SteerableTensor& b) {
            SteerableTensor out;
            out.layout = lay3;
            out.values.assign(static_cast<std::size_t>(2 * l3 + 1), 0.0);
            for (int m1 = 0; m1 < 2 * l1 + 1; ++m1)
              for (int m2 = 0; m2 < 2 * l2 + 1; ++m2)
                for (int m3 = 0; m3 < 2 * l3 + 1; ++m3)
                  out.values[static_cast<std::size_t>(m3)] +=
                      table.coeff(m1, m2, m3) *
                      a.values[static_cast<std::size_t>(m1)] *
                      b.values[static_cast<std::size_t>(m2)];
            return out;
          };

          const SteerableTensor lhs =
              contract(rotate_steerable(u, rot), rotate_steerable(v, rot));
          const SteerableTensor rhs = rotate_steerable(contract(u, v), rot);
          for (std::size_t i = 0; i < lhs.values.size(); ++i)
            err = std::max(err, std::abs(lhs.values[i] - rhs.values[i]));
        }
      }
  return detail::make_result("cg_equivariance", err, 1e-9);
}

// Random band-limited coefficients -> grid samples -> coefficients.
inline CheckResult check_fourier_round_trip(int trials = 5, int l_max = 3,
                                            int n_theta = 100, int n_phi = 100,
                                            std::uint64_t seed = 2468) {
  const SphereGrid grid =
      make_grid(n_theta, n_phi, GridKind::gauss_legendre_theta, l_max);
  std::vector<IrrepsLayout::Block> blocks;
  for (int l = 0; l <= l_max; ++l) blocks.push_back({1, l});
  const IrrepsLayout layout = IrrepsLayout::of(std::move(blocks));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  double err = 0.0;
  for (int k = 0; k < trials; ++k) {
    SteerableTensor x;
    x.layout = layout;
    x.values.resize(static_cast<std::size_t>(layout.dim()));
    for (double& v : x.values) v = g(rng);
    const SteerableTensor back = from_grid(to_grid(x, grid), grid, l_max);
    for (std::size_t i = 0; i < x.values.size(); ++i)
      err = std::max(err, std::abs(back.values[i] - x.values[i]));
  }
  return detail::make_result("fourier_round_trip", err, 1e-9);
}

// Full-model distribution equivariance: rotating the molecule rotates each
// neighbor's direction distribution (compared through same-grid synthesis of
// rotated coefficients) and leaves each radius distribution unchanged.
// Returns {direction check, radius check}.
inline std::pair<CheckResult, CheckResult> check_distribution_equivariance(
    Model& m, int n_molecules = 5, int n_rotations = 3,
    std::uint64_t seed = 97531) {
  std::mt19937_64 geom_rng(seed);
  Dataset ds = gen_synthetic(SyntheticTemplate::kTetrahedral, n_molecules, 0.05,
                             geom_rng, m.cfg.cutoff);
  std::mt19937_64 rot_rng(seed ^ 0xABCDEFULL);
  double dir_err = 0.0, rad_err = 0.0;
  for (const Molecule& mol : ds.molecules) {
    const int mask = static_cast<int>(mol.size()) > 1 ? 1 : 0;
    const MaskedMolecule mm = make_masked(mol, mask, m.cfg.cutoff);
    const MaskPrediction base = predict_masked(m, mm);
    for (int r = 0; r < n_rotations; ++r) {
      const Rotation rot = Rotation::random(rot_rng);
      Molecule turned = mol;
      for (Vec3& p : turned.pos) p = rot.apply(p);
      const MaskPrediction moved =
          predict_masked(m, make_masked(turned, mask, m.cfg.cutoff));
      for (std::size_t k = 0; k < base.coeffs.size(); ++k) {
        const DirectionDistribution synth =
            m.synthesize_direction(rotate_steerable(base.coeffs[k], rot));
        for (std::size_t s = 0; s < synth.p.size(); ++s)
          dir_err = std::max(dir_err,
                             std::abs(synth.p[s] - moved.directions[k].p[s]));
        for (std::size_t b = 0; b < base.radii[k].p.size(); ++b)
          rad_err = std::max(rad_err,
                             std::abs(base.radii[k].p[b] - moved.radii[k].p[b]));
      }
    }
  }
  return {detail::make_result("eq9_direction_equivariance", dir_err, 1e-6),
          detail::make_result("eq9_radius_invariance", rad_err, 1e-12)};
}

// Central-difference check of the whole loss pipeline on a scaled-down model
// (every op the full model uses, few enough parameters to difference them all).
// The temperature stays moderate here: at sharp temperatures an untrained
// model pushes grid probabilities against the 1e-12 prediction floor, and a
// difference step across that clamp reads as error even when the analytic
// gradient is exact.
inline CheckResult check_gradient_fidelity(std::uint64_t seed = 8642,
                                           double tau = 0.5) {
  ModelConfig mc = ModelConfig::compact();
  mc.tau = tau;
  Model m(mc, seed);
  std::mt19937_64 rng(seed ^ 0x5A5A5AULL);
  Dataset ds = gen_synthetic(SyntheticTemplate::kTetrahedral, 1, 0.05, rng,
                             m.cfg.cutoff);
  const MaskedMolecule mm = make_masked(ds.molecules[0], 1, m.cfg.cutoff);
  const GradientCheckResult r = check_gradient(
      m.params,
      [&](ParameterStore&, bool with_grad) {
        if (with_grad) m.params.zero_grad();
        return empp_single_loss(m, mm, with_grad).total;
      },
      1e-5);
  return detail::make_result("gradient_check", r.max_rel_error, 1e-5);
}

// The standard ordering the check subcommand runs and reports.
inline std::vector<CheckResult> run_standard_checks(Model& model,
                                                    std::uint64_t seed) {
  std::vector<CheckResult> out;
  out.push_back(check_sh_orthonormality());
  out.push_back(check_sh_steerability(100, 3, seed ^ 0x111));
  out.push_back(check_cg_equivariance(20, 3, seed ^ 0x222));
  out.push_back(check_fourier_round_trip(5, 3, 100, 100, seed ^ 0x333));
  auto [dir, rad] = check_distribution_equivariance(model, 5, 3, seed ^ 0x444);
  out.push_back(std::move(dir));
  out.push_back(std::move(rad));
  // Fixed seed: this is a self-test of the differentiation engine, and its
  // verdict should not vary with the caller's seed.
  out.push_back(check_gradient_fidelity());
  return out;
}

inline void write_check_line(std::ostream& os, const CheckResult& r) {
  char err[40], thr[40];
  std::snprintf(err, sizeof err, "%.17g", r.error);
  std::snprintf(thr, sizeof thr, "%g", r.threshold);
  os << "{\"check\":\"" << r.name << "\",\"error\":" << err
     << ",\"threshold\":" << thr << ",\"pass\":" << (r.pass ? "true" : "false")
     << "}\n";
}

}  // namespace empp
