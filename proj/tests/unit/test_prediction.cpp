// Unit tests for the position-prediction label distributions, KL divergence,
// masked-molecule construction, and the point-estimate geometry.

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>
#include <vector>

#include "empp/data.hpp"
#include "empp/prediction.hpp"

using namespace empp;

namespace {

Direction random_direction(std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  for (;;) {
    const Vec3 v{g(rng), g(rng), g(rng)};
    if (v.norm() > 1e-6) return Direction(v);
  }
}

int nearest_node(const SphereGrid& grid, const Direction& d) {
  int best = 0;
  double best_dot = -2.0;
  for (int s = 0; s < grid.size(); ++s) {
    const double dot = grid.units[static_cast<std::size_t>(s)].dot(d.unit());
    if (dot > best_dot) {
      best_dot = dot;
      best = s;
    }
  }
  return best;
}

}  // namespace

TEST_CASE("radius label at 1.5 Angstrom") {
  const RadiusDistribution q = radius_label(1.5);
  REQUIRE(q.p.size() == 128);
  double sum = 0.0;
  for (double v : q.p) {
    CHECK(v >= 0.0);
    sum += v;
  }
  CHECK(sum == Catch::Approx(1.0).epsilon(0).margin(1e-12));
  CHECK(q.peak_bin() == 18);
  CHECK(q.binning.center(18) == 1.492578125);
  CHECK(q.p[18] ==
        Catch::Approx(0.028876028646888457).epsilon(0).margin(1e-15));
  CHECK_FALSE(q.truncated);
}

TEST_CASE("radius label symmetry at the interval midpoint") {
  const RadiusDistribution q = radius_label(2.95);
  for (int b = 0; b < 128; ++b)
    CHECK(q.p[static_cast<std::size_t>(b)] ==
          Catch::Approx(q.p[static_cast<std::size_t>(127 - b)]).epsilon(0).margin(1e-10));
}

TEST_CASE("radius label near-delta ablation") {
  const RadiusDistribution q = radius_label(1.5, {}, 0.0001);
  CHECK(q.peak_bin() == 18);
  CHECK(q.p[18] == 1.0);
  for (int b = 0; b < 128; ++b)
    if (b != 18) CHECK(q.p[static_cast<std::size_t>(b)] == 0.0);
}

TEST_CASE("radius label peak tracks the distance") {
  const RadiusBinning bins;
  for (double d = 1.0; d <= 4.9; d += 0.37) {
    const RadiusDistribution q = radius_label(d);
    CHECK(std::abs(q.binning.center(q.peak_bin()) - d) <= bins.width());
    CHECK_FALSE(q.truncated);
  }
}

TEST_CASE("radius label truncation warning and domain") {
  CHECK(radius_label(7.2).truncated);    // beyond max by > 3 sigma
  CHECK_FALSE(radius_label(5.4).truncated);
  CHECK(radius_label(6.51).truncated);
  CHECK_THROWS_AS(radius_label(0.0), std::invalid_argument);
  CHECK_THROWS_AS(radius_label(-1.0), std::invalid_argument);
}

TEST_CASE("direction label peaks at the nearest grid node") {
  std::mt19937_64 rng(601);
  const SphereGrid g20 = make_grid(20, 20, GridKind::gauss_legendre_theta, 3);
  for (int trial = 0; trial < 25; ++trial) {
    const Direction d = random_direction(rng);
    for (int lmax : {2, 3}) {
      const DirectionDistribution q = direction_label(d, g20, lmax);
      CHECK(q.peak_index() == nearest_node(g20, d));
      double sum = 0.0;
      for (double v : q.p) {
        CHECK(v >= 0.0);
        sum += v;
      }
      CHECK(sum == Catch::Approx(1.0).epsilon(0).margin(1e-12));
    }
  }
}

TEST_CASE("direction label with zero band limit is uniform in measure") {
  const SphereGrid g = make_grid(8, 8, GridKind::gauss_legendre_theta, 3);
  const DirectionDistribution q = direction_label(Direction({0.3, -0.2, 0.9}), g, 0);
  const double four_pi = 4.0 * M_PI;
  for (int s = 0; s < g.size(); ++s)
    CHECK(q.p[static_cast<std::size_t>(s)] ==
          Catch::Approx(g.weights[static_cast<std::size_t>(s)] / four_pi)
              .epsilon(0)
              .margin(1e-12));
}

TEST_CASE("direction label transports exactly under grid-preserving rotations") {
  // Rotating by a whole number of azimuthal steps maps the node set onto
  // itself, so the label permutes bitwise-tightly.
  const int nphi = 16;
  const SphereGrid g = make_grid(12, nphi, GridKind::gauss_legendre_theta, 3);
  const Direction d(Vec3{0.4, 0.25, 0.88});
  const int shift = 5;
  const Rotation r = Rotation::about_z(2.0 * M_PI * shift / nphi);
  const DirectionDistribution q = direction_label(d, g, 2);
  const DirectionDistribution qr = direction_label(Direction(r.apply(d.unit())), g, 2);
  for (int i = 0; i < 12; ++i)
    for (int j = 0; j < nphi; ++j) {
      const int s = i * nphi + j;
      const int s_shift = i * nphi + (j + shift) % nphi;
      CHECK(qr.p[static_cast<std::size_t>(s_shift)] ==
            Catch::Approx(q.p[static_cast<std::size_t>(s)]).epsilon(0).margin(1e-13));
    }
}

TEST_CASE("direction label matches direct synthesis under arbitrary rotation") {
  std::mt19937_64 rng(602);
  const SphereGrid g = make_grid(48, 48, GridKind::gauss_legendre_theta, 3);
  const Direction d = random_direction(rng);
  const Rotation r = Rotation::random(rng);
  const DirectionDistribution q = direction_label(d, g, 2);
  const DirectionDistribution qr = direction_label(Direction(r.apply(d.unit())), g, 2);
  // Densities at transported points agree: value of the rotated label at
  // node s equals exp(coeff . Y(R^-1 node_s)) normalized by the original
  // partition sum, up to quadrature error in the two normalizers.
  const Rotation rinv = r.inverse();
  const std::vector<double> coeff = sh_components(d, 2);
  double z = 0.0;
  for (int s = 0; s < g.size(); ++s) {
    double e = 0.0;
    const std::vector<double> y = sh_components(Direction(g.units[static_cast<std::size_t>(s)]), 2);
    for (std::size_t k = 0; k < coeff.size(); ++k) e += coeff[k] * y[k];
    z += g.weights[static_cast<std::size_t>(s)] * std::exp(e);
  }
  for (int s = 0; s < g.size(); s += 37) {
    const Vec3 back = rinv.apply(g.units[static_cast<std::size_t>(s)]);
    double e = 0.0;
    const std::vector<double> y = sh_components(Direction(back), 2);
    for (std::size_t k = 0; k < coeff.size(); ++k) e += coeff[k] * y[k];
    const double want = g.weights[static_cast<std::size_t>(s)] * std::exp(e) / z;
    CHECK(qr.p[static_cast<std::size_t>(s)] ==
          Catch::Approx(want).epsilon(0).margin(1e-9));
  }
}

TEST_CASE("direction label band limit must fit the grid") {
  const SphereGrid g = make_grid(8, 8, GridKind::gauss_legendre_theta, 2);
  CHECK_THROWS_AS(direction_label(Direction({0, 0, 1}), g, 3), std::invalid_argument);
}

TEST_CASE("kl divergence closed forms") {
  CHECK(kl_div({0.25, 0.75}, {0.25, 0.75}) == 0.0);
  CHECK(kl_div({1.0, 0.0}, {0.5, 0.5}) ==
        Catch::Approx(std::log(2.0)).epsilon(0).margin(1e-12));
  // 0 log 0 contributes nothing even against a floored p.
  CHECK(kl_div({0.0, 1.0}, {0.0, 1.0}) == 0.0);
  CHECK_THROWS_AS(kl_div({1.0}, {0.5, 0.5}), std::invalid_argument);

  std::mt19937_64 rng(603);
  std::uniform_real_distribution<double> u(0.01, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> q(8), p(8);
    double qs = 0.0, ps = 0.0;
    for (int i = 0; i < 8; ++i) {
      q[static_cast<std::size_t>(i)] = u(rng);
      p[static_cast<std::size_t>(i)] = u(rng);
      qs += q[static_cast<std::size_t>(i)];
      ps += p[static_cast<std::size_t>(i)];
    }
    for (int i = 0; i < 8; ++i) {
      q[static_cast<std::size_t>(i)] /= qs;
      p[static_cast<std::size_t>(i)] /= ps;
    }
    CHECK(kl_div(q, p) >= -1e-15);
  }
}

TEST_CASE("masked molecule construction") {
  std::mt19937_64 rng(604);
  const Dataset ds = gen_synthetic(SyntheticTemplate::kTetrahedral, 1, 0.0, rng);
  const Molecule& mol = ds.molecules[0];

  const MaskedMolecule mm = make_masked(mol, 1, 5.0);
  CHECK(mm.masked_index == 1);
  CHECK(mm.kept == std::vector<int>{0, 2, 3, 4});
  CHECK(mm.sub.size() == 4);
  CHECK(mm.sub.z == std::vector<int>{6, 1, 1, 1});
  // Fully connected subgraph of 4 atoms: 12 directed edges.
  CHECK(mm.nl.edges.size() == 12);
  // All four remaining atoms lie within the cutoff of the true position.
  REQUIRE(mm.neighbors.size() == 4);
  for (std::size_t k = 0; k < mm.neighbors.size(); ++k) {
    const Vec3 want = mol.pos[1] -
                      mm.sub.pos[static_cast<std::size_t>(mm.neighbors[k])];
    CHECK(mm.r_label[k].x == want.x);
    CHECK(mm.r_label[k].y == want.y);
    CHECK(mm.r_label[k].z == want.z);
  }
  CHECK(mm.masked_z == 1);

  Molecule lonely;
  lonely.z = {1, 1};
  lonely.pos = {{0, 0, 0}, {6, 0, 0}};
  CHECK_THROWS_AS(make_masked(lonely, 0, 5.0), IsolatedMaskError);
  CHECK_THROWS_AS(make_masked(mol, 9, 5.0), std::invalid_argument);
}

TEST_CASE("mask index sampling") {
  std::mt19937_64 rng(605);
  const Dataset ds = gen_synthetic(SyntheticTemplate::kTetrahedral, 1, 0.0, rng);
  const Molecule& mol = ds.molecules[0];

  std::mt19937_64 s1(7), s2(7);
  const std::vector<int> a = sample_mask_indices(mol, 3, 5.0, s1);
  const std::vector<int> b = sample_mask_indices(mol, 3, 5.0, s2);
  CHECK(a == b);
  CHECK(a.size() == 3);
  std::vector<int> sorted_a = a;
  std::sort(sorted_a.begin(), sorted_a.end());
  CHECK(std::unique(sorted_a.begin(), sorted_a.end()) == sorted_a.end());

  // n equal to the atom count returns every index.
  std::mt19937_64 s3(8);
  std::vector<int> all = sample_mask_indices(mol, 5, 5.0, s3);
  std::sort(all.begin(), all.end());
  CHECK(all == std::vector<int>{0, 1, 2, 3, 4});

  std::mt19937_64 s4(9);
  CHECK_THROWS_AS(sample_mask_indices(mol, 6, 5.0, s4), std::invalid_argument);

  // Atoms without in-cutoff partners are ineligible.
  Molecule sparse;
  sparse.z = {1, 1, 1};
  sparse.pos = {{0, 0, 0}, {1, 0, 0}, {20, 0, 0}};
  std::mt19937_64 s5(10);
  const std::vector<int> e = sample_mask_indices(sparse, 2, 5.0, s5);
  std::vector<int> se = e;
  std::sort(se.begin(), se.end());
  CHECK(se == std::vector<int>{0, 1});
  std::mt19937_64 s6(11);
  CHECK_THROWS_AS(sample_mask_indices(sparse, 3, 5.0, s6), std::invalid_argument);
}

TEST_CASE("position labels satisfy the peak sanity invariant") {
  std::mt19937_64 rng(606);
  const SphereGrid grid = make_grid(20, 20, GridKind::gauss_legendre_theta, 3);
  const Dataset ds = gen_synthetic(SyntheticTemplate::kTetrahedral, 5, 0.05, rng);
  for (const Molecule& mol : ds.molecules) {
    const MaskedMolecule mm = make_masked(mol, 2, 5.0);
    const std::vector<NeighborLabels> labels =
        position_labels(mm, grid, {}, 0.5, 2);
    REQUIRE(labels.size() == mm.neighbors.size());
    for (std::size_t k = 0; k < labels.size(); ++k) {
      const double dist = mm.r_label[k].norm();
      CHECK(std::abs(labels[k].radius.binning.center(labels[k].radius.peak_bin()) -
                     dist) <= labels[k].radius.binning.width());
      const int want = nearest_node(grid, Direction(mm.r_label[k]));
      CHECK(labels[k].direction.peak_index() == want);
    }
  }
}

TEST_CASE("predicted position from one neighbor at the origin") {
  const SphereGrid grid = make_grid(40, 40, GridKind::gauss_legendre_theta, 3);
  RadiusDistribution rad;
  rad.p.assign(128, 0.0);
  rad.p[18] = 1.0;  // bin center 1.492578125
  DirectionDistribution dir;
  dir.grid = &grid;
  dir.p.assign(static_cast<std::size_t>(grid.size()), 0.0);
  dir.p[static_cast<std::size_t>(nearest_node(grid, Direction({0, 0, 1})))] = 1.0;

  const PositionEstimate est = predicted_position({rad}, {dir}, {Vec3{0, 0, 0}});
  REQUIRE(est.per_neighbor.size() == 1);
  // Within the polar spacing of a 40-ring grid (about 4.5 degrees).
  CHECK(est.aggregate.z == Catch::Approx(1.492578125).epsilon(0).margin(0.02));
  CHECK(std::abs(est.aggregate.x) < 0.15);
  CHECK(std::abs(est.aggregate.y) < 0.15);
  CHECK(est.spread == 0.0);
}

TEST_CASE("predicted position recovers a masked atom from oracle labels") {
  std::mt19937_64 rng(607);
  const SphereGrid grid = make_grid(60, 60, GridKind::gauss_legendre_theta, 3);
  const Dataset ds = gen_synthetic(SyntheticTemplate::kTetrahedral, 5, 0.05, rng);
  for (const Molecule& mol : ds.molecules) {
    const MaskedMolecule mm = make_masked(mol, 1, 5.0);
    const std::vector<NeighborLabels> labels =
        position_labels(mm, grid, {}, 0.5, 2);
    std::vector<RadiusDistribution> rads;
    std::vector<DirectionDistribution> dirs;
    std::vector<Vec3> npos;
    for (std::size_t k = 0; k < labels.size(); ++k) {
      rads.push_back(labels[k].radius);
      dirs.push_back(labels[k].direction);
      npos.push_back(mm.sub.pos[static_cast<std::size_t>(mm.neighbors[k])]);
    }
    const PositionEstimate est = predicted_position(rads, dirs, npos);
    const Vec3 truth = mol.pos[1];
    for (std::size_t k = 0; k < est.per_neighbor.size(); ++k) {
      const double r = (truth - npos[k]).norm();
      // Half a radial bin plus the angular spacing swept at that radius.
      const double bound = 0.5 * rads[k].binning.width() + r * (M_PI / 60.0) * 1.5;
      CHECK((est.per_neighbor[k] - truth).norm() < bound);
    }
    CHECK((est.aggregate - truth).norm() < 0.1);
    CHECK(est.spread >= 0.0);
  }
}

TEST_CASE("radius histogram csv") {
  const RadiusDistribution q = radius_label(2.2);
  std::ostringstream ss;
  write_radius_csv(ss, q);
  std::istringstream in(ss.str());
  std::string header;
  std::getline(in, header);
  CHECK(header == "bin_center,probability");
  int rows = 0;
  std::string line;
  double sum = 0.0;
  while (std::getline(in, line)) {
    const std::size_t comma = line.find(',');
    REQUIRE(comma != std::string::npos);
    const double center = std::stod(line.substr(0, comma));
    const double prob = std::stod(line.substr(comma + 1));
    CHECK(center == q.binning.center(rows));
    sum += prob;
    ++rows;
  }
  CHECK(rows == 128);
  CHECK(sum == Catch::Approx(1.0).epsilon(0).margin(1e-12));
}
