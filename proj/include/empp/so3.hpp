#pragma once

// SO(3) algebra: real spherical harmonics, Wigner-D matrices, and real
// Clebsch-Gordan couplings, plus the steerable-tensor containers every other
// header consumes.
//
// Convention (pinned, all golden values depend on it): orthonormal real basis,
// no Condon-Shortley phase, component order m = -l..l inside a degree block,
// and the l=1 block proportional to (y, z, x).

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstddef>
#include <map>
#include <mutex>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "empp/detail/numeric.hpp"

namespace empp {

// Correctness is maintained up to this degree; performance is tuned for l <= 3.
inline constexpr int kMaxDegree = 8;

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  double norm() const { return std::sqrt(dot(*this)); }
};

// A unit vector; the constructor normalizes and rejects near-zero input.
class Direction {
 public:
  explicit Direction(const Vec3& v) {
    const double n = v.norm();
    if (!(n > 1e-12))
      throw std::invalid_argument("Direction: vector norm too small to normalize");
    u_ = v * (1.0 / n);
  }

  const Vec3& unit() const { return u_; }
  double theta() const { return std::acos(std::clamp(u_.z, -1.0, 1.0)); }
  double phi() const {
    double p = std::atan2(u_.y, u_.x);
    if (p < 0.0) p += 2.0 * M_PI;
    return p;
  }

 private:
  Vec3 u_;
};

// Proper rotation, stored row-major.
struct Rotation {
  std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

  static Rotation identity() { return {}; }

  static Rotation from_matrix(const std::array<double, 9>& a) {
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double dot = 0.0;
        for (int k = 0; k < 3; ++k) dot += a[k * 3 + i] * a[k * 3 + j];
        if (std::abs(dot - (i == j ? 1.0 : 0.0)) > 1e-12)
          throw std::invalid_argument("Rotation: matrix is not orthogonal");
      }
    const double det = a[0] * (a[4] * a[8] - a[5] * a[7]) -
                       a[1] * (a[3] * a[8] - a[5] * a[6]) +
                       a[2] * (a[3] * a[7] - a[4] * a[6]);
    if (std::abs(det - 1.0) > 1e-12)
      throw std::invalid_argument("Rotation: determinant is not +1");
    Rotation r;
    r.m = a;
    return r;
  }

  static Rotation from_quaternion(double w, double x, double y, double z) {
    const double n = std::sqrt(w * w + x * x + y * y + z * z);
    if (!(n > 1e-12)) throw std::invalid_argument("Rotation: zero quaternion");
    w /= n;
    x /= n;
    y /= n;
    z /= n;
    Rotation r;
    r.m = {1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
           2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
           2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)};
    return r;
  }

  // Active counterclockwise rotations: about_z(pi/2) maps +x to +y.
  static Rotation about_x(double a) {
    Rotation r;
    const double c = std::cos(a), s = std::sin(a);
    r.m = {1, 0, 0, 0, c, -s, 0, s, c};
    return r;
  }
  static Rotation about_y(double a) {
    Rotation r;
    const double c = std::cos(a), s = std::sin(a);
    r.m = {c, 0, s, 0, 1, 0, -s, 0, c};
    return r;
  }
  static Rotation about_z(double a) {
    Rotation r;
    const double c = std::cos(a), s = std::sin(a);
    r.m = {c, -s, 0, s, c, 0, 0, 0, 1};
    return r;
  }

  // Haar-uniform via a normalized Gaussian quaternion.
  static Rotation random(std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    double q[4];
    double norm2 = 0.0;
    do {
      norm2 = 0.0;
      for (double& c : q) {
        c = n(rng);
        norm2 += c * c;
      }
    } while (norm2 < 1e-12);
    return from_quaternion(q[0], q[1], q[2], q[3]);
  }

  Vec3 apply(const Vec3& v) const {
    return {m[0] * v.x + m[1] * v.y + m[2] * v.z,
            m[3] * v.x + m[4] * v.y + m[5] * v.z,
            m[6] * v.x + m[7] * v.y + m[8] * v.z};
  }

  // compose(o) applies o first, then this.
  Rotation compose(const Rotation& o) const {
    Rotation r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double acc = 0.0;
        for (int k = 0; k < 3; ++k) acc += m[i * 3 + k] * o.m[k * 3 + j];
        r.m[i * 3 + j] = acc;
      }
    return r;
  }

  Rotation inverse() const {
    Rotation r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) r.m[i * 3 + j] = m[j * 3 + i];
    return r;
  }
};

// Ordered degree blocks of a steerable feature. A block (mult c, degree l)
// occupies c*(2l+1) consecutive slots, copy-major: copy 0's m=-l..l, then
// copy 1's, and so on.
struct IrrepsLayout {
  struct Block {
    int mult = 0;
    int degree = 0;
    bool operator==(const Block& o) const = default;
  };
  std::vector<Block> blocks;

  static IrrepsLayout of(std::vector<Block> bs) {
    for (std::size_t i = 0; i < bs.size(); ++i) {
      if (bs[i].mult <= 0)
        throw std::invalid_argument("IrrepsLayout: multiplicity must be positive");
      if (bs[i].degree < 0 || bs[i].degree > kMaxDegree)
        throw std::invalid_argument("IrrepsLayout: degree out of supported range");
      if (i > 0 && bs[i].degree < bs[i - 1].degree)
        throw std::invalid_argument("IrrepsLayout: degrees must be nondecreasing");
    }
    IrrepsLayout l;
    l.blocks = std::move(bs);
    return l;
  }

  int dim() const {
    int d = 0;
    for (const Block& b : blocks) d += b.mult * (2 * b.degree + 1);
    return d;
  }

  int block_offset(std::size_t i) const {
    int off = 0;
    for (std::size_t k = 0; k < i; ++k)
      off += blocks[k].mult * (2 * blocks[k].degree + 1);
    return off;
  }

  int max_degree() const {
    int d = 0;
    for (const Block& b : blocks) d = std::max(d, b.degree);
    return d;
  }

  bool operator==(const IrrepsLayout& o) const { return blocks == o.blocks; }
};

struct SteerableTensor {
  IrrepsLayout layout;
  std::vector<double> values;
};

inline SteerableTensor zeros_like(const IrrepsLayout& layout) {
  return {layout, std::vector<double>(static_cast<std::size_t>(layout.dim()), 0.0)};
}

namespace detail {

// Fills all (l_max+1)^2 real SH values at the given direction, indexed
// l*l + (m + l). Uses the standard three-term recurrence on fully normalized
// associated Legendre functions; stable for the supported degree range.
inline void sh_all(int l_max, const Vec3& u, double* out) {
  const double ct = std::clamp(u.z, -1.0, 1.0);
  const double st = std::sqrt(std::max(0.0, 1.0 - ct * ct));
  double cp = 1.0, sp = 0.0;
  if (st > 1e-300) {
    cp = u.x / st;
    sp = u.y / st;
  }
  // cos(m phi), sin(m phi) by angle addition as m grows.
  double cm = 1.0, sm = 0.0;
  const double sqrt2 = std::sqrt(2.0);
  double q_mm = 1.0 / std::sqrt(4.0 * M_PI);
  for (int m = 0; m <= l_max; ++m) {
    if (m > 0) {
      q_mm *= st * std::sqrt((2.0 * m + 1.0) / (2.0 * m));
      const double c_next = cm * cp - sm * sp;
      sm = sm * cp + cm * sp;
      cm = c_next;
    }
    auto emit = [&](int l, double q) {
      if (m == 0) {
        out[l * l + l] = q;
      } else {
        out[l * l + l + m] = sqrt2 * q * cm;
        out[l * l + l - m] = sqrt2 * q * sm;
      }
    };
    emit(m, q_mm);
    if (m == l_max) break;
    double q_prev = q_mm;
    double q_curr = std::sqrt(2.0 * m + 3.0) * ct * q_mm;
    emit(m + 1, q_curr);
    for (int l = m + 2; l <= l_max; ++l) {
      const double a = std::sqrt((4.0 * l * l - 1.0) / (double(l) * l - double(m) * m));
      const double b =
          std::sqrt((double(l - 1) * (l - 1) - double(m) * m) /
                    (4.0 * double(l - 1) * (l - 1) - 1.0));
      const double q_next = a * (ct * q_curr - b * q_prev);
      q_prev = q_curr;
      q_curr = q_next;
      emit(l, q_curr);
    }
  }
}

}  // namespace detail

inline double eval_sh(int l, int m, const Direction& dir) {
  if (l < 0 || l > kMaxDegree || m < -l || m > l)
    throw std::invalid_argument("eval_sh: (l, m) out of range");
  std::array<double, (kMaxDegree + 1) * (kMaxDegree + 1)> buf;
  detail::sh_all(l, dir.unit(), buf.data());
  return buf[l * l + l + m];
}

inline std::vector<double> sh_components(const Direction& dir, int l_max) {
  if (l_max < 0 || l_max > kMaxDegree)
    throw std::invalid_argument("sh_components: l_max out of range");
  std::vector<double> out(static_cast<std::size_t>((l_max + 1) * (l_max + 1)));
  detail::sh_all(l_max, dir.unit(), out.data());
  return out;
}

// Multiplicity-1 blocks for every degree 0..l_max.
inline SteerableTensor sh_vector(const Direction& dir, int l_max) {
  std::vector<IrrepsLayout::Block> blocks;
  blocks.reserve(static_cast<std::size_t>(l_max) + 1);
  for (int l = 0; l <= l_max; ++l) blocks.push_back({1, l});
  return {IrrepsLayout::of(std::move(blocks)), sh_components(dir, l_max)};
}

struct WignerD {
  int degree = 0;
  std::vector<double> values;  // (2l+1)^2 row-major

  double at(int i, int j) const { return values[i * (2 * degree + 1) + j]; }
};

namespace detail {

inline Vec3 fibonacci_dir(int i, int count, double phase) {
  const double z = 1.0 - 2.0 * (i + 0.5) / count;
  const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
  const double phi = i * M_PI * (3.0 - std::sqrt(5.0)) + phase;
  return {r * std::cos(phi), r * std::sin(phi), z};
}

}  // namespace detail

// Constructs D^l(R) by solving Y^l(R r_j) = D Y^l(r_j) in the least-squares
// sense over well-spread sample directions, with a residual check on held-out
// directions; resamples internally if the check fails.
inline WignerD wigner_d(int l, const Rotation& rot) {
  if (l < 0 || l > kMaxDegree)
    throw std::invalid_argument("wigner_d: degree out of range");
  if (l == 0) return {0, {1.0}};
  const int n = 2 * l + 1;
  std::vector<double> ybuf(static_cast<std::size_t>((l + 1) * (l + 1)));
  auto block = [&](const Vec3& v, double* dst) {
    detail::sh_all(l, v, ybuf.data());
    for (int i = 0; i < n; ++i) dst[i] = ybuf[l * l + i];
  };

  for (int attempt = 0; attempt < 4; ++attempt) {
    const int count = 2 * n + 8 * (attempt + 1);
    const double phase = 0.61803398875 * attempt;
    // A, B are n x count with columns Y(r_j), Y(R r_j).
    std::vector<double> a(static_cast<std::size_t>(n) * count);
    std::vector<double> b(static_cast<std::size_t>(n) * count);
    std::vector<double> col(static_cast<std::size_t>(n));
    for (int j = 0; j < count; ++j) {
      const Vec3 d = detail::fibonacci_dir(j, count, phase);
      block(d, col.data());
      for (int i = 0; i < n; ++i) a[i * count + j] = col[i];
      block(rot.apply(d), col.data());
      for (int i = 0; i < n; ++i) b[i * count + j] = col[i];
    }
    // Normal equations: D (A A^T) = B A^T; solve the transposed system since
    // the Gram matrix is symmetric.
    std::vector<double> gram(static_cast<std::size_t>(n) * n);
    std::vector<double> rhs(static_cast<std::size_t>(n) * n);
    detail::matmul(a.data(), a.data(), gram.data(), n, count, n, false, true);
    detail::matmul(a.data(), b.data(), rhs.data(), n, count, n, false, true);
    try {
      detail::solve_linear(gram, rhs, static_cast<std::size_t>(n), static_cast<std::size_t>(n));
    } catch (const std::runtime_error&) {
      continue;  // ill-conditioned sample set; resample
    }
    WignerD d;
    d.degree = l;
    d.values.assign(static_cast<std::size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) d.values[j * n + i] = rhs[i * n + j];

    // Residual check on held-out directions.
    double worst = 0.0;
    std::vector<double> yb(static_cast<std::size_t>(n)), yr(static_cast<std::size_t>(n));
    for (int j = 0; j < count; ++j) {
      const Vec3 v = detail::fibonacci_dir(j, count, phase + 1.0);
      block(v, yb.data());
      block(rot.apply(v), yr.data());
      for (int i = 0; i < n; ++i) {
        double acc = 0.0;
        for (int k2 = 0; k2 < n; ++k2) acc += d.values[i * n + k2] * yb[k2];
        worst = std::max(worst, std::abs(acc - yr[i]));
      }
    }
    if (worst < 1e-10) return d;
  }
  throw std::runtime_error("wigner_d: residual check failed after resampling");
}

// Real-basis Clebsch-Gordan coupling table for one (l1, l2, l_out) triple.
struct CgTable {
  int l1 = 0, l2 = 0, l_out = 0;
  std::vector<double> dense;  // index (m1*(2l2+1) + m2)*(2l_out+1) + m_out
  struct Entry {
    int m1, m2, m_out;
    double value;
  };
  std::vector<Entry> entries;  // nonzeros, fixed scan order

  double coeff(int m1, int m2, int m_out) const {
    return dense[static_cast<std::size_t>(m1 * (2 * l2 + 1) + m2) * (2 * l_out + 1) +
                 m_out];
  }
};

namespace detail {

inline long double factorial_ld(int n) {
  static const std::vector<long double> table = [] {
    std::vector<long double> t(40, 1.0L);
    for (int i = 1; i < 40; ++i) t[i] = t[i - 1] * i;
    return t;
  }();
  return table[static_cast<std::size_t>(n)];
}

// Complex Clebsch-Gordan coefficient <l1 m1 l2 m2 | L M> via the Racah
// closed form with long-double accumulation.
inline double complex_cg(int j1, int m1, int j2, int m2, int J, int M) {
  if (m1 + m2 != M) return 0.0;
  if (J < std::abs(j1 - j2) || J > j1 + j2) return 0.0;
  if (std::abs(m1) > j1 || std::abs(m2) > j2 || std::abs(M) > J) return 0.0;
  const long double pref =
      std::sqrt(static_cast<long double>(2 * J + 1) * factorial_ld(J + j1 - j2) *
                factorial_ld(J - j1 + j2) * factorial_ld(j1 + j2 - J) /
                factorial_ld(j1 + j2 + J + 1)) *
      std::sqrt(factorial_ld(J + M) * factorial_ld(J - M) * factorial_ld(j1 - m1) *
                factorial_ld(j1 + m1) * factorial_ld(j2 - m2) * factorial_ld(j2 + m2));
  const int k_lo = std::max({0, j2 - J - m1, j1 + m2 - J});
  const int k_hi = std::min({j1 + j2 - J, j1 - m1, j2 + m2});
  long double sum = 0.0L;
  for (int k = k_lo; k <= k_hi; ++k) {
    const long double term =
        1.0L / (factorial_ld(k) * factorial_ld(j1 + j2 - J - k) *
                factorial_ld(j1 - m1 - k) * factorial_ld(j2 + m2 - k) *
                factorial_ld(J - j2 + m1 + k) * factorial_ld(J - j1 - m2 + k));
    sum += (k % 2 == 0) ? term : -term;
  }
  return static_cast<double>(pref * sum);
}

// Change of basis U with real_Y = U complex_Y (rows: real m, cols: complex mu).
inline std::vector<std::complex<double>> real_basis_u(int l) {
  const int n = 2 * l + 1;
  std::vector<std::complex<double>> u(static_cast<std::size_t>(n) * n, 0.0);
  const double s = 1.0 / std::sqrt(2.0);
  u[static_cast<std::size_t>(l) * n + l] = 1.0;
  for (int m = 1; m <= l; ++m) {
    const double sign = (m % 2 == 0) ? 1.0 : -1.0;
    u[static_cast<std::size_t>(l + m) * n + (l + m)] = sign * s;
    u[static_cast<std::size_t>(l + m) * n + (l - m)] = s;
    u[static_cast<std::size_t>(l - m) * n + (l + m)] = std::complex<double>(0.0, -sign * s);
    u[static_cast<std::size_t>(l - m) * n + (l - m)] = std::complex<double>(0.0, s);
  }
  return u;
}

inline CgTable compute_real_cg(int l1, int l2, int l_out) {
  const int d1 = 2 * l1 + 1, d2 = 2 * l2 + 1, d0 = 2 * l_out + 1;
  const auto u1 = real_basis_u(l1);
  const auto u2 = real_basis_u(l2);
  const auto u0 = real_basis_u(l_out);
  const bool odd = ((l1 + l2 + l_out) % 2) != 0;

  CgTable t;
  t.l1 = l1;
  t.l2 = l2;
  t.l_out = l_out;
  t.dense.assign(static_cast<std::size_t>(d1) * d2 * d0, 0.0);

  for (int m0 = 0; m0 < d0; ++m0)
    for (int m1 = 0; m1 < d1; ++m1)
      for (int m2 = 0; m2 < d2; ++m2) {
        std::complex<double> acc = 0.0;
        for (int mu1 = 0; mu1 < d1; ++mu1) {
          const std::complex<double> c1 =
              std::conj(u1[static_cast<std::size_t>(m1) * d1 + mu1]);
          if (c1 == 0.0) continue;
          for (int mu2 = 0; mu2 < d2; ++mu2) {
            const std::complex<double> c2 =
                std::conj(u2[static_cast<std::size_t>(m2) * d2 + mu2]);
            if (c2 == 0.0) continue;
            const int mu0 = (mu1 - l1) + (mu2 - l2);
            if (mu0 < -l_out || mu0 > l_out) continue;
            const std::complex<double> c0 =
                u0[static_cast<std::size_t>(m0) * d0 + (mu0 + l_out)];
            if (c0 == 0.0) continue;
            acc += c0 * c1 * c2 *
                   complex_cg(l1, mu1 - l1, l2, mu2 - l2, l_out, mu0);
          }
        }
        // Even-parity triples are purely real, odd-parity purely imaginary;
        // the complementary component must vanish.
        const double keep = odd ? acc.imag() : acc.real();
        const double drop = odd ? acc.real() : acc.imag();
        if (std::abs(drop) > 1e-12)
          throw std::runtime_error("real_cg: basis conversion produced a mixed entry");
        t.dense[static_cast<std::size_t>(m1 * d2 + m2) * d0 + m0] = keep;
      }

  // Canonical sign: first nonzero entry in (m_out, m1, m2) scan order is
  // positive. Snap conversion noise to exact zero while collecting nonzeros.
  double sign = 0.0;
  for (int m0 = 0; m0 < d0 && sign == 0.0; ++m0)
    for (int m1 = 0; m1 < d1 && sign == 0.0; ++m1)
      for (int m2 = 0; m2 < d2 && sign == 0.0; ++m2) {
        const double v = t.dense[static_cast<std::size_t>(m1 * d2 + m2) * d0 + m0];
        if (std::abs(v) > 1e-13) sign = v > 0.0 ? 1.0 : -1.0;
      }
  if (sign == 0.0) sign = 1.0;
  for (double& v : t.dense) {
    v = (std::abs(v) > 1e-13) ? sign * v : 0.0;
  }
  for (int m1 = 0; m1 < d1; ++m1)
    for (int m2 = 0; m2 < d2; ++m2)
      for (int m0 = 0; m0 < d0; ++m0) {
        const double v = t.dense[static_cast<std::size_t>(m1 * d2 + m2) * d0 + m0];
        if (v != 0.0) t.entries.push_back({m1, m2, m0, v});
      }
  return t;
}

struct CgCache {
  std::mutex mu;
  std::map<std::array<int, 3>, CgTable> tables;
  bool faulted = false;
};

inline CgCache& cg_cache() {
  static CgCache cache;
  return cache;
}

}  // namespace detail

// Cached real CG table; references remain valid for the process lifetime.
inline const CgTable& real_cg(int l1, int l2, int l_out) {
  if (l1 < 0 || l2 < 0 || l_out < 0 || l1 > kMaxDegree || l2 > kMaxDegree ||
      l_out > kMaxDegree)
    throw std::invalid_argument("real_cg: degree out of range");
  if (l_out < std::abs(l1 - l2) || l_out > l1 + l2)
    throw std::invalid_argument("real_cg: triangle inequality violated");
  auto& cache = detail::cg_cache();
  std::scoped_lock lock(cache.mu);
  const std::array<int, 3> key{l1, l2, l_out};
  auto it = cache.tables.find(key);
  if (it == cache.tables.end())
    it = cache.tables.emplace(key, detail::compute_real_cg(l1, l2, l_out)).first;
  return it->second;
}

// Negative-control hook: perturbs the cached (1,1,1) coupling so equivariance
// checks must fail. clear_cg_fault restores the correct values in place.
inline void inject_cg_fault() {
  auto& cache = detail::cg_cache();
  {
    std::scoped_lock lock(cache.mu);
    cache.faulted = true;
  }
  real_cg(1, 1, 1);  // ensure the table exists
  std::scoped_lock lock(cache.mu);
  CgTable& t = cache.tables.at({1, 1, 1});
  for (double& v : t.dense)
    if (v != 0.0) v += 0.25;
  for (CgTable::Entry& e : t.entries) e.value += 0.25;
}

inline void clear_cg_fault() {
  auto& cache = detail::cg_cache();
  std::scoped_lock lock(cache.mu);
  if (!cache.faulted) return;
  cache.faulted = false;
  auto it = cache.tables.find({1, 1, 1});
  if (it != cache.tables.end()) it->second = detail::compute_real_cg(1, 1, 1);
}

// One coupling path of a tensor product: u block x v block -> out block,
// with a dense weight matrix of shape (mult_u * mult_v, mult_out).
struct TpPath {
  std::size_t u_block = 0, v_block = 0, out_block = 0;
  const CgTable* table = nullptr;
  std::size_t w_offset = 0;
};

struct TpPlan {
  IrrepsLayout u, v, out;
  std::vector<TpPath> paths;
  std::size_t weight_count = 0;
  std::size_t scratch_size = 0;  // max per-path mult_u*mult_v*(2l_out+1)
};

// Enumerates every triangle-valid path, out-block major then u, then v.
// Throws if some output block cannot be reached.
inline TpPlan make_tp_plan(const IrrepsLayout& u, const IrrepsLayout& v,
                           const IrrepsLayout& out) {
  TpPlan plan;
  plan.u = u;
  plan.v = v;
  plan.out = out;
  for (std::size_t ob = 0; ob < out.blocks.size(); ++ob) {
    bool reached = false;
    for (std::size_t ub = 0; ub < u.blocks.size(); ++ub)
      for (std::size_t vb = 0; vb < v.blocks.size(); ++vb) {
        const int l1 = u.blocks[ub].degree;
        const int l2 = v.blocks[vb].degree;
        const int lo = out.blocks[ob].degree;
        if (lo < std::abs(l1 - l2) || lo > l1 + l2) continue;
        TpPath p;
        p.u_block = ub;
        p.v_block = vb;
        p.out_block = ob;
        p.table = &real_cg(l1, l2, lo);
        p.w_offset = plan.weight_count;
        plan.paths.push_back(p);
        plan.weight_count += static_cast<std::size_t>(u.blocks[ub].mult) *
                             v.blocks[vb].mult * out.blocks[ob].mult;
        plan.scratch_size = std::max(
            plan.scratch_size, static_cast<std::size_t>(u.blocks[ub].mult) *
                                   v.blocks[vb].mult * (2 * lo + 1));
        reached = true;
      }
    if (!reached)
      throw std::invalid_argument(
          "tensor_product: output block degree " +
          std::to_string(out.blocks[ob].degree) + " has no valid coupling path");
  }
  return plan;
}

namespace detail {

// Shared contraction kernel. weights == nullptr means all-ones; path_scales
// (one factor per path) == nullptr means 1. out must be zero-initialized;
// scratch must hold plan.scratch_size doubles.
inline void tp_forward(const TpPlan& plan, const double* u, const double* v,
                       const double* weights, const double* path_scales,
                       double* out, double* scratch) {
  for (std::size_t pi = 0; pi < plan.paths.size(); ++pi) {
    const TpPath& p = plan.paths[pi];
    const auto& ub = plan.u.blocks[p.u_block];
    const auto& vb = plan.v.blocks[p.v_block];
    const auto& ob = plan.out.blocks[p.out_block];
    const int du = 2 * ub.degree + 1, dv = 2 * vb.degree + 1;
    const int dn = 2 * ob.degree + 1;
    const int cu = ub.mult, cv = vb.mult, co = ob.mult;
    const double* ublk = u + plan.u.block_offset(p.u_block);
    const double* vblk = v + plan.v.block_offset(p.v_block);
    double* oblk = out + plan.out.block_offset(p.out_block);
    const double scale = path_scales ? path_scales[pi] : 1.0;
    if (scale == 0.0) continue;

    double* t = scratch;  // t[a*cv + b][m_out]
    std::fill(t, t + static_cast<std::size_t>(cu) * cv * dn, 0.0);
    for (const CgTable::Entry& e : p.table->entries) {
      for (int a = 0; a < cu; ++a) {
        const double uv = e.value * ublk[a * du + e.m1];
        if (uv == 0.0) continue;
        double* ta = t + (static_cast<std::size_t>(a) * cv) * dn;
        for (int b = 0; b < cv; ++b)
          ta[b * dn + e.m_out] += uv * vblk[b * dv + e.m2];
      }
    }
    const double* w = weights ? weights + p.w_offset : nullptr;
    for (int a = 0; a < cu; ++a)
      for (int b = 0; b < cv; ++b) {
        const double* tab = t + (static_cast<std::size_t>(a) * cv + b) * dn;
        for (int g = 0; g < co; ++g) {
          const double wv =
              scale * (w ? w[(static_cast<std::size_t>(a) * cv + b) * co + g] : 1.0);
          if (wv == 0.0) continue;
          double* og = oblk + g * dn;
          for (int mo = 0; mo < dn; ++mo) og[mo] += wv * tab[mo];
        }
      }
  }
}

// Reverse-mode companion of tp_forward. Recomputes the per-path contraction
// scratch rather than caching it. Any of the gradient outputs may be null.
inline void tp_backward(const TpPlan& plan, const double* u, const double* v,
                        const double* weights, const double* path_scales,
                        const double* d_out, double* d_u, double* d_v,
                        double* d_weights, double* d_scales, double* scratch,
                        double* scratch2) {
  for (std::size_t pi = 0; pi < plan.paths.size(); ++pi) {
    const TpPath& p = plan.paths[pi];
    const auto& ub = plan.u.blocks[p.u_block];
    const auto& vb = plan.v.blocks[p.v_block];
    const auto& ob = plan.out.blocks[p.out_block];
    const int du = 2 * ub.degree + 1, dv = 2 * vb.degree + 1;
    const int dn = 2 * ob.degree + 1;
    const int cu = ub.mult, cv = vb.mult, co = ob.mult;
    const double* ublk = u + plan.u.block_offset(p.u_block);
    const double* vblk = v + plan.v.block_offset(p.v_block);
    const double* doblk = d_out + plan.out.block_offset(p.out_block);
    const double scale = path_scales ? path_scales[pi] : 1.0;
    const double* w = weights ? weights + p.w_offset : nullptr;

    const bool need_t = (d_weights != nullptr) || (d_scales != nullptr);
    double* t = scratch;
    if (need_t) {
      std::fill(t, t + static_cast<std::size_t>(cu) * cv * dn, 0.0);
      for (const CgTable::Entry& e : p.table->entries)
        for (int a = 0; a < cu; ++a) {
          const double uv = e.value * ublk[a * du + e.m1];
          if (uv == 0.0) continue;
          double* ta = t + (static_cast<std::size_t>(a) * cv) * dn;
          for (int b = 0; b < cv; ++b)
            ta[b * dn + e.m_out] += uv * vblk[b * dv + e.m2];
        }
    }
    if (d_weights) {
      double* dw = d_weights + p.w_offset;
      for (int a = 0; a < cu; ++a)
        for (int b = 0; b < cv; ++b) {
          const double* tab = t + (static_cast<std::size_t>(a) * cv + b) * dn;
          for (int g = 0; g < co; ++g) {
            double acc = 0.0;
            const double* og = doblk + g * dn;
            for (int mo = 0; mo < dn; ++mo) acc += tab[mo] * og[mo];
            dw[(static_cast<std::size_t>(a) * cv + b) * co + g] += scale * acc;
          }
        }
    }
    if (d_scales) {
      // d/d scale = sum over the unscaled mixed output against d_out.
      double acc = 0.0;
      for (int a = 0; a < cu; ++a)
        for (int b = 0; b < cv; ++b) {
          const double* tab = t + (static_cast<std::size_t>(a) * cv + b) * dn;
          for (int g = 0; g < co; ++g) {
            const double wv = w ? w[(static_cast<std::size_t>(a) * cv + b) * co + g] : 1.0;
            if (wv == 0.0) continue;
            const double* og = doblk + g * dn;
            double dot = 0.0;
            for (int mo = 0; mo < dn; ++mo) dot += tab[mo] * og[mo];
            acc += wv * dot;
          }
        }
      d_scales[pi] += acc;
    }
    if ((d_u || d_v) && scale != 0.0) {
      // dT[a][b][mo] = scale * sum_g w[abg] d_out[g][mo]
      double* dt = scratch2;
      std::fill(dt, dt + static_cast<std::size_t>(cu) * cv * dn, 0.0);
      for (int a = 0; a < cu; ++a)
        for (int b = 0; b < cv; ++b) {
          double* dtab = dt + (static_cast<std::size_t>(a) * cv + b) * dn;
          for (int g = 0; g < co; ++g) {
            const double wv =
                scale * (w ? w[(static_cast<std::size_t>(a) * cv + b) * co + g] : 1.0);
            if (wv == 0.0) continue;
            const double* og = doblk + g * dn;
            for (int mo = 0; mo < dn; ++mo) dtab[mo] += wv * og[mo];
          }
        }
      for (const CgTable::Entry& e : p.table->entries)
        for (int a = 0; a < cu; ++a) {
          const double* dtab = dt + (static_cast<std::size_t>(a) * cv) * dn;
          if (d_u) {
            double acc = 0.0;
            for (int b = 0; b < cv; ++b)
              acc += dtab[b * dn + e.m_out] * vblk[b * dv + e.m2];
            d_u[plan.u.block_offset(p.u_block) + a * du + e.m1] += e.value * acc;
          }
          if (d_v) {
            const double ua = e.value * ublk[a * du + e.m1];
            if (ua == 0.0) continue;
            for (int b = 0; b < cv; ++b)
              d_v[plan.v.block_offset(p.v_block) + b * dv + e.m2] +=
                  ua * dtab[b * dn + e.m_out];
          }
        }
    }
  }
}

}  // namespace detail

// Weighted CG tensor product. Empty weights mean all-ones coupling weights;
// path_scales, when supplied, multiplies each path's contribution.
inline SteerableTensor tensor_product(const SteerableTensor& u,
                                      const SteerableTensor& v,
                                      const IrrepsLayout& out_layout,
                                      const std::vector<double>& weights = {},
                                      const std::vector<double>& path_scales = {}) {
  const TpPlan plan = make_tp_plan(u.layout, v.layout, out_layout);
  if (!weights.empty() && weights.size() != plan.weight_count)
    throw std::invalid_argument("tensor_product: weight count mismatch");
  if (!path_scales.empty() && path_scales.size() != plan.paths.size())
    throw std::invalid_argument("tensor_product: path scale count mismatch");
  SteerableTensor out = zeros_like(out_layout);
  std::vector<double> scratch(plan.scratch_size);
  detail::tp_forward(plan, u.values.data(), v.values.data(),
                     weights.empty() ? nullptr : weights.data(),
                     path_scales.empty() ? nullptr : path_scales.data(),
                     out.values.data(), scratch.data());
  return out;
}

// Applies D^l(rot) to every copy of every degree block.
inline SteerableTensor rotate_steerable(const SteerableTensor& x, const Rotation& rot) {
  std::map<int, WignerD> by_degree;
  for (const auto& b : x.layout.blocks)
    if (!by_degree.count(b.degree)) by_degree.emplace(b.degree, wigner_d(b.degree, rot));
  SteerableTensor out = zeros_like(x.layout);
  for (std::size_t bi = 0; bi < x.layout.blocks.size(); ++bi) {
    const auto& b = x.layout.blocks[bi];
    const int d = 2 * b.degree + 1;
    const int off = x.layout.block_offset(bi);
    const WignerD& w = by_degree.at(b.degree);
    for (int c = 0; c < b.mult; ++c)
      for (int i = 0; i < d; ++i) {
        double acc = 0.0;
        for (int j = 0; j < d; ++j) acc += w.at(i, j) * x.values[off + c * d + j];
        out.values[off + c * d + i] = acc;
      }
  }
  return out;
}

}  // namespace empp
