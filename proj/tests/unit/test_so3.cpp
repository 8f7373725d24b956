// Unit tests for the SO(3) algebra layer: real spherical harmonics,
// Wigner-D matrices, and real Clebsch-Gordan couplings.
//
// Expected values are frozen from independent oracles: closed-form constants,
// a scipy/sympy cross-check of the real-basis convention (orthonormal, no
// Condon-Shortley phase, m = -l..l with the l=1 block proportional to
// (y, z, x)), and brute-force contractions written locally in this file.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <vector>

#include "empp/so3.hpp"

using namespace empp;

namespace {

Rotation random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  double q[4];
  double norm = 0.0;
  do {
    norm = 0.0;
    for (double& c : q) {
      c = n(rng);
      norm += c * c;
    }
  } while (norm < 1e-12);
  norm = std::sqrt(norm);
  for (double& c : q) c /= norm;
  return Rotation::from_quaternion(q[0], q[1], q[2], q[3]);
}

Direction random_direction(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  while (true) {
    Vec3 v{n(rng), n(rng), n(rng)};
    if (v.norm() > 1e-6) return Direction(v);
  }
}

// Independent CG contraction: dense triple loop over the table, no shared
// kernel with the library path.
std::vector<double> brute_contract(const CgTable& t, const std::vector<double>& u,
                                   const std::vector<double>& v) {
  const int d1 = 2 * t.l1 + 1, d2 = 2 * t.l2 + 1, d0 = 2 * t.l_out + 1;
  std::vector<double> out(d0, 0.0);
  for (int m1 = 0; m1 < d1; ++m1)
    for (int m2 = 0; m2 < d2; ++m2)
      for (int m0 = 0; m0 < d0; ++m0)
        out[m0] += t.coeff(m1, m2, m0) * u[m1] * v[m2];
  return out;
}

std::vector<double> apply_wigner(const WignerD& d, const std::vector<double>& x) {
  const int n = 2 * d.degree + 1;
  std::vector<double> out(n, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) out[i] += d.at(i, j) * x[j];
  return out;
}

}  // namespace

TEST_CASE("eval_sh closed-form constants") {
  const Direction any(Vec3{0.2, -0.7, 0.4});
  CHECK(eval_sh(0, 0, any) == Catch::Approx(0.28209479177387814).epsilon(0).margin(1e-12));
  CHECK(eval_sh(1, 0, Direction(Vec3{0, 0, 1})) ==
        Catch::Approx(0.48860251190291992).epsilon(0).margin(1e-12));
  // 3cos^2(theta) - 1 vanishes at the magic angle.
  const double c = 1.0 / std::sqrt(3.0);
  const double s = std::sqrt(1.0 - c * c);
  CHECK(std::abs(eval_sh(2, 0, Direction(Vec3{s, 0, c}))) < 1e-12);
}

TEST_CASE("eval_sh golden table at a generic direction") {
  // Frozen from a scipy-based oracle for the pinned real convention.
  const Direction d(Vec3{0.3, -0.4, 0.866});
  const std::vector<std::vector<double>> expect = {
      {0.282094791774},
      {-0.195445304605, 0.423139084470, 0.146583978454},
      {-0.131111580581, -0.378475429276, 0.394229048186, 0.283856571957,
       -0.038240877669},
      {-0.025963631538, -0.300412168104, -0.502751384613, 0.242365584948,
       0.377063538460, -0.087620215697, -0.069039656589}};
  for (int l = 0; l <= 3; ++l)
    for (int m = -l; m <= l; ++m)
      CHECK(eval_sh(l, m, d) ==
            Catch::Approx(expect[l][m + l]).epsilon(0).margin(1e-9));
}

TEST_CASE("eval_sh rejects out-of-range degree and order") {
  const Direction d(Vec3{0, 0, 1});
  CHECK_THROWS_AS(eval_sh(-1, 0, d), std::invalid_argument);
  CHECK_THROWS_AS(eval_sh(1, 2, d), std::invalid_argument);
  CHECK_THROWS_AS(eval_sh(2, -3, d), std::invalid_argument);
  CHECK_THROWS_AS(eval_sh(kMaxDegree + 1, 0, d), std::invalid_argument);
}

TEST_CASE("sh orthonormality under an independent Simpson quadrature") {
  // Composite Simpson in theta and phi, written here rather than reusing the
  // library quadrature; resolution chosen so the rule error is ~1e-7.
  const int nt = 501, np = 512;
  const double ht = M_PI / (nt - 1);
  const double hp = 2.0 * M_PI / np;  // periodic: plain rectangle is exact-ish
  auto simpson_w = [&](int i) {
    if (i == 0 || i == nt - 1) return 1.0;
    return (i % 2 == 1) ? 4.0 : 2.0;
  };
  for (int l1 = 0; l1 <= 3; ++l1)
    for (int m1 = -l1; m1 <= l1; ++m1)
      for (int l2 = l1; l2 <= 3; ++l2)
        for (int m2 = -l2; m2 <= l2; ++m2) {
          double acc = 0.0;
          for (int i = 0; i < nt; ++i) {
            const double th = i * ht;
            double row = 0.0;
            for (int j = 0; j < np; ++j) {
              const double ph = (j + 0.5) * hp;
              const Direction d(Vec3{std::sin(th) * std::cos(ph),
                                     std::sin(th) * std::sin(ph),
                                     std::cos(th)});
              row += eval_sh(l1, m1, d) * eval_sh(l2, m2, d);
            }
            acc += simpson_w(i) * row * std::sin(th);
          }
          acc *= (ht / 3.0) * hp;
          const double want = (l1 == l2 && m1 == m2) ? 1.0 : 0.0;
          INFO("l1=" << l1 << " m1=" << m1 << " l2=" << l2 << " m2=" << m2);
          CHECK(acc == Catch::Approx(want).epsilon(0).margin(1e-6));
        }
}

TEST_CASE("sh_vector layouts and axis values") {
  const SteerableTensor up = sh_vector(Direction(Vec3{0, 0, 1}), 1);
  REQUIRE(up.values.size() == 4);
  CHECK(up.layout.blocks.size() == 2);
  CHECK(up.layout.blocks[0].mult == 1);
  CHECK(up.layout.blocks[0].degree == 0);
  CHECK(up.layout.blocks[1].degree == 1);
  CHECK(up.values[0] == Catch::Approx(0.2820948).margin(1e-7));
  CHECK(std::abs(up.values[1]) < 1e-14);
  CHECK(up.values[2] == Catch::Approx(0.4886025).margin(1e-7));
  CHECK(std::abs(up.values[3]) < 1e-14);

  const SteerableTensor ey = sh_vector(Direction(Vec3{0, 1, 0}), 1);
  CHECK(ey.values[1] == Catch::Approx(0.4886025).margin(1e-7));
  CHECK(std::abs(ey.values[2]) < 1e-14);
  CHECK(std::abs(ey.values[3]) < 1e-14);

  const SteerableTensor s0 = sh_vector(Direction(Vec3{0.5, 0.1, -0.6}), 0);
  REQUIRE(s0.values.size() == 1);
  CHECK(s0.values[0] == Catch::Approx(0.2820948).margin(1e-7));

  // Consistency with eval_sh across the full range.
  std::mt19937_64 rng(11);
  const Direction d = random_direction(rng);
  const SteerableTensor v3 = sh_vector(d, 3);
  std::size_t idx = 0;
  for (int l = 0; l <= 3; ++l)
    for (int m = -l; m <= l; ++m, ++idx)
      CHECK(v3.values[idx] == Catch::Approx(eval_sh(l, m, d)).epsilon(0).margin(1e-13));
}

TEST_CASE("wigner_d closed forms") {
  std::mt19937_64 rng(21);
  const WignerD d0 = wigner_d(0, random_rotation(rng));
  REQUIRE(d0.values.size() == 1);
  CHECK(d0.values[0] == Catch::Approx(1.0).epsilon(0).margin(1e-12));

  const WignerD d2 = wigner_d(2, Rotation::identity());
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j)
      CHECK(d2.at(i, j) == Catch::Approx(i == j ? 1.0 : 0.0).epsilon(0).margin(1e-10));

  // Quarter turn about z in the (y, z, x) component order.
  const WignerD d1 = wigner_d(1, Rotation::about_z(M_PI / 2));
  const double expect[3][3] = {{0, 0, 1}, {0, 1, 0}, {-1, 0, 0}};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      CHECK(d1.at(i, j) == Catch::Approx(expect[i][j]).epsilon(0).margin(1e-10));
}

TEST_CASE("wigner_d steerability, orthogonality, composition") {
  std::mt19937_64 rng(31);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const Rotation r = random_rotation(rng);
    const Direction d = random_direction(rng);
    const int l = trial % 4;
    const WignerD w = wigner_d(l, r);
    std::vector<double> y(2 * l + 1), yr(2 * l + 1);
    const Direction rd(r.apply(d.unit()));
    for (int m = -l; m <= l; ++m) {
      y[m + l] = eval_sh(l, m, d);
      yr[m + l] = eval_sh(l, m, rd);
    }
    const std::vector<double> dy = apply_wigner(w, y);
    for (int i = 0; i < 2 * l + 1; ++i)
      worst = std::max(worst, std::abs(dy[i] - yr[i]));
  }
  CHECK(worst < 1e-9);

  for (int trial = 0; trial < 10; ++trial) {
    const Rotation r1 = random_rotation(rng);
    const Rotation r2 = random_rotation(rng);
    for (int l = 1; l <= 3; ++l) {
      const WignerD w1 = wigner_d(l, r1);
      const WignerD w2 = wigner_d(l, r2);
      const WignerD w12 = wigner_d(l, r1.compose(r2));
      const int n = 2 * l + 1;
      // Orthogonality of w1.
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
          double dot = 0.0;
          for (int k = 0; k < n; ++k) dot += w1.at(i, k) * w1.at(j, k);
          CHECK(dot == Catch::Approx(i == j ? 1.0 : 0.0).epsilon(0).margin(1e-9));
        }
      // Composition.
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
          double acc = 0.0;
          for (int k = 0; k < n; ++k) acc += w1.at(i, k) * w2.at(k, j);
          CHECK(acc == Catch::Approx(w12.at(i, j)).epsilon(0).margin(1e-8));
        }
    }
  }
}

TEST_CASE("real_cg frozen special cases") {
  CHECK_THROWS_AS(real_cg(1, 1, 3), std::invalid_argument);
  CHECK_THROWS_AS(real_cg(0, 2, 1), std::invalid_argument);

  // (1,1,0): dot product over sqrt(3). Contract with u = v = x_hat.
  const CgTable& t110 = real_cg(1, 1, 0);
  std::vector<double> ex = {0, 0, 1};
  const std::vector<double> dot = brute_contract(t110, ex, ex);
  CHECK(dot[0] == Catch::Approx(0.5773502691896258).epsilon(0).margin(1e-12));
  for (int m = 0; m < 3; ++m)
    CHECK(t110.coeff(m, m, 0) ==
          Catch::Approx(0.5773502691896258).epsilon(0).margin(1e-12));

  // (0,l,l): identity coupling with constant exactly 1.
  for (int l = 1; l <= 3; ++l) {
    const CgTable& t = real_cg(0, l, l);
    for (int m2 = 0; m2 < 2 * l + 1; ++m2)
      for (int m0 = 0; m0 < 2 * l + 1; ++m0)
        CHECK(t.coeff(0, m2, m0) ==
              Catch::Approx(m2 == m0 ? 1.0 : 0.0).epsilon(0).margin(1e-12));
  }

  // (1,1,1): cross product over sqrt(2), positive orientation after the
  // first-nonzero-positive sign canonicalization.
  const CgTable& t111 = real_cg(1, 1, 1);
  std::vector<double> ey = {1, 0, 0};  // y_hat in (y, z, x) order
  const std::vector<double> cross = brute_contract(t111, ex, ey);
  CHECK(std::abs(cross[0]) < 1e-12);
  CHECK(cross[1] == Catch::Approx(0.7071067811865475).epsilon(0).margin(1e-12));
  CHECK(std::abs(cross[2]) < 1e-12);

  // (1,1,2): x_hat (x) x_hat exposes the (m=0, m=+2) split frozen from the
  // conversion oracle.
  const CgTable& t112 = real_cg(1, 1, 2);
  const std::vector<double> quad = brute_contract(t112, ex, ex);
  CHECK(quad[2] == Catch::Approx(-0.4082482904638630).epsilon(0).margin(1e-12));
  CHECK(quad[4] == Catch::Approx(0.7071067811865475).epsilon(0).margin(1e-12));
  CHECK(std::abs(quad[0]) + std::abs(quad[1]) + std::abs(quad[3]) < 1e-12);
}

TEST_CASE("real_cg equivariance for every path with l <= 3") {
  std::mt19937_64 rng(41);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  double worst = 0.0;
  for (int l1 = 0; l1 <= 3; ++l1)
    for (int l2 = 0; l2 <= 3; ++l2)
      for (int l0 = std::abs(l1 - l2); l0 <= std::min(l1 + l2, 3); ++l0) {
        const CgTable& t = real_cg(l1, l2, l0);
        for (int trial = 0; trial < 20; ++trial) {
          const Rotation r = random_rotation(rng);
          std::vector<double> a(2 * l1 + 1), b(2 * l2 + 1);
          for (double& x : a) x = u(rng);
          for (double& x : b) x = u(rng);
          const WignerD d1 = wigner_d(l1, r);
          const WignerD d2 = wigner_d(l2, r);
          const WignerD d0 = wigner_d(l0, r);
          const std::vector<double> lhs =
              brute_contract(t, apply_wigner(d1, a), apply_wigner(d2, b));
          const std::vector<double> rhs = apply_wigner(d0, brute_contract(t, a, b));
          for (std::size_t i = 0; i < lhs.size(); ++i)
            worst = std::max(worst, std::abs(lhs[i] - rhs[i]));
        }
      }
  CHECK(worst < 1e-9);
}

TEST_CASE("real_cg caching returns stable storage") {
  const CgTable* a = &real_cg(2, 1, 1);
  const CgTable* b = &real_cg(2, 1, 1);
  CHECK(a == b);
}

TEST_CASE("tensor_product scalars and bilinearity") {
  const IrrepsLayout scalar = IrrepsLayout::of({{1, 0}});
  SteerableTensor u{scalar, {2.0}};
  SteerableTensor v{scalar, {3.0}};
  const SteerableTensor w = tensor_product(u, v, scalar);
  const double c000 = real_cg(0, 0, 0).coeff(0, 0, 0);
  CHECK(w.values[0] == Catch::Approx(6.0 * c000).epsilon(0).margin(1e-12));

  const IrrepsLayout vec = IrrepsLayout::of({{1, 0}, {1, 1}});
  std::mt19937_64 rng(51);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  SteerableTensor a{vec, {dist(rng), dist(rng), dist(rng), dist(rng)}};
  SteerableTensor zero{vec, {0, 0, 0, 0}};
  const SteerableTensor z = tensor_product(a, zero, vec);
  for (double x : z.values) CHECK(x == 0.0);
}

TEST_CASE("tensor_product rejects unreachable output blocks") {
  const IrrepsLayout vec = IrrepsLayout::of({{1, 1}});
  const IrrepsLayout quad = IrrepsLayout::of({{1, 3}});
  SteerableTensor u{vec, {1, 0, 0}};
  SteerableTensor v{vec, {0, 1, 0}};
  // l=3 is unreachable from 1 (x) 1.
  CHECK_THROWS_AS(tensor_product(u, v, quad), std::invalid_argument);
}

TEST_CASE("tensor_product equivariance with random weights") {
  std::mt19937_64 rng(61);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  const IrrepsLayout in1 = IrrepsLayout::of({{2, 0}, {2, 1}, {1, 2}});
  const IrrepsLayout in2 = IrrepsLayout::of({{1, 0}, {1, 1}, {1, 2}});
  const IrrepsLayout out = IrrepsLayout::of({{2, 0}, {2, 1}, {2, 2}});
  const TpPlan plan = make_tp_plan(in1, in2, out);
  std::vector<double> weights(plan.weight_count);

  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    for (double& w : weights) w = dist(rng);
    SteerableTensor u{in1, std::vector<double>(in1.dim())};
    SteerableTensor v{in2, std::vector<double>(in2.dim())};
    for (double& x : u.values) x = dist(rng);
    for (double& x : v.values) x = dist(rng);
    const Rotation r = random_rotation(rng);

    const SteerableTensor lhs =
        tensor_product(rotate_steerable(u, r), rotate_steerable(v, r), out, weights);
    const SteerableTensor rhs = rotate_steerable(tensor_product(u, v, out, weights), r);
    for (std::size_t i = 0; i < lhs.values.size(); ++i)
      worst = std::max(worst, std::abs(lhs.values[i] - rhs.values[i]));
  }
  CHECK(worst < 1e-9);
}

TEST_CASE("rotate_steerable basics") {
  std::mt19937_64 rng(71);
  const IrrepsLayout vec = IrrepsLayout::of({{1, 0}, {1, 1}});
  SteerableTensor x{vec, {0.5, -1.0, 2.0, 0.25}};
  const SteerableTensor same = rotate_steerable(x, Rotation::identity());
  for (std::size_t i = 0; i < x.values.size(); ++i)
    CHECK(same.values[i] == Catch::Approx(x.values[i]).epsilon(0).margin(1e-12));

  for (int trial = 0; trial < 5; ++trial) {
    const Rotation r = random_rotation(rng);
    const Direction d = random_direction(rng);
    const SteerableTensor a = rotate_steerable(sh_vector(d, 3), r);
    const SteerableTensor b = sh_vector(Direction(r.apply(d.unit())), 3);
    for (std::size_t i = 0; i < a.values.size(); ++i)
      CHECK(a.values[i] == Catch::Approx(b.values[i]).epsilon(0).margin(1e-9));
  }

  const IrrepsLayout scal = IrrepsLayout::of({{3, 0}});
  SteerableTensor s{scal, {1.0, 2.0, 3.0}};
  const SteerableTensor sr = rotate_steerable(s, random_rotation(rng));
  for (int i = 0; i < 3; ++i) CHECK(sr.values[i] == s.values[i]);
}

TEST_CASE("layout validation") {
  CHECK_THROWS_AS(IrrepsLayout::of({{1, 1}, {1, 0}}), std::invalid_argument);
  CHECK_THROWS_AS(IrrepsLayout::of({{0, 0}}), std::invalid_argument);
  const IrrepsLayout l = IrrepsLayout::of({{4, 0}, {2, 1}, {1, 2}});
  CHECK(l.dim() == 4 + 6 + 5);
  CHECK(l.max_degree() == 2);
  CHECK(l.block_offset(1) == 4);
  CHECK(l.block_offset(2) == 10);
}

TEST_CASE("cg fault injection corrupts the cached table") {
  // Negative-control hook used by the CLI: after injection the (1,1,1)
  // coupling no longer satisfies equivariance.
  const CgTable& t = real_cg(1, 1, 1);
  const double before = t.coeff(0, 1, 2);
  inject_cg_fault();
  CHECK(real_cg(1, 1, 1).coeff(0, 1, 2) != before);
  clear_cg_fault();
  CHECK(real_cg(1, 1, 1).coeff(0, 1, 2) == Catch::Approx(before).epsilon(0).margin(0));
}
