#pragma once

// Small dense-numerics toolbox shared by the SO(3) layer, the sphere grid,
// and the tape: a cache-friendly matmul, Gauss-Legendre nodes, and a pivoted
// linear solve. Everything is double precision and single-threaded.

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace empp::detail {

// C (MxN) = A (MxK) * B (KxN), row-major, with optional transposes applied to
// the stored operands. The no-transpose path streams B rows (ikj order), which
// is the hot shape in the prediction head.
inline void matmul(const double* a, const double* b, double* c, std::size_t m,
                   std::size_t k, std::size_t n, bool trans_a = false,
                   bool trans_b = false, bool accumulate = false) {
  if (!accumulate)
    for (std::size_t i = 0; i < m * n; ++i) c[i] = 0.0;
  if (!trans_a && !trans_b) {
    for (std::size_t i = 0; i < m; ++i) {
      double* ci = c + i * n;
      const double* ai = a + i * k;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = ai[p];
        if (av == 0.0) continue;
        const double* bp = b + p * n;
        for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
      }
    }
  } else if (trans_a && !trans_b) {
    // A stored as (K x M); A^T row i = column i of the stored matrix.
    for (std::size_t p = 0; p < k; ++p) {
      const double* ap = a + p * m;
      const double* bp = b + p * n;
      for (std::size_t i = 0; i < m; ++i) {
        const double av = ap[i];
        if (av == 0.0) continue;
        double* ci = c + i * n;
        for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
      }
    }
  } else if (!trans_a && trans_b) {
    // B stored as (N x K): dot products of contiguous rows.
    for (std::size_t i = 0; i < m; ++i) {
      const double* ai = a + i * k;
      double* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) {
        const double* bj = b + j * k;
        double acc = 0.0;
        for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
        ci[j] += acc;
      }
    }
  } else {
    for (std::size_t i = 0; i < m; ++i) {
      double* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) {
        const double* bj = b + j * k;
        double acc = 0.0;
        for (std::size_t p = 0; p < k; ++p) acc += a[p * m + i] * bj[p];
        ci[j] += acc;
      }
    }
  }
}

// Gauss-Legendre nodes and weights on [-1, 1] via Newton iteration on P_n.
inline void gauss_legendre(int n, std::vector<double>& nodes,
                           std::vector<double>& weights) {
  if (n < 1) throw std::invalid_argument("gauss_legendre: n must be positive");
  nodes.assign(n, 0.0);
  weights.assign(n, 0.0);
  const int half = (n + 1) / 2;
  for (int i = 0; i < half; ++i) {
    double x = std::cos(M_PI * (i + 0.75) / (n + 0.5));
    double dp = 0.0;
    for (int iter = 0; iter < 100; ++iter) {
      double p0 = 1.0, p1 = x;
      for (int k = 2; k <= n; ++k) {
        const double p2 = ((2 * k - 1) * x * p1 - (k - 1) * p0) / k;
        p0 = p1;
        p1 = p2;
      }
      dp = n * (x * p1 - p0) / (x * x - 1.0);
      const double dx = p1 / dp;
      x -= dx;
      if (std::abs(dx) < 1e-15) break;
    }
    nodes[i] = -x;
    nodes[n - 1 - i] = x;
    const double w = 2.0 / ((1.0 - x * x) * dp * dp);
    weights[i] = w;
    weights[n - 1 - i] = w;
  }
}

// Solves A X = B in place with partial pivoting; A is (n x n), B is (n x m),
// both row-major. Throws on numerically singular pivots.
inline void solve_linear(std::vector<double> a, std::vector<double>& b,
                         std::size_t n, std::size_t m) {
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t pivot = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::abs(a[r * n + col]) > std::abs(a[pivot * n + col])) pivot = r;
    if (std::abs(a[pivot * n + col]) < 1e-14)
      throw std::runtime_error("solve_linear: singular matrix");
    if (pivot != col) {
      for (std::size_t j = 0; j < n; ++j) std::swap(a[col * n + j], a[pivot * n + j]);
      for (std::size_t j = 0; j < m; ++j) std::swap(b[col * m + j], b[pivot * m + j]);
    }
    const double inv = 1.0 / a[col * n + col];
    for (std::size_t r = col + 1; r < n; ++r) {
      const double f = a[r * n + col] * inv;
      if (f == 0.0) continue;
      for (std::size_t j = col; j < n; ++j) a[r * n + j] -= f * a[col * n + j];
      for (std::size_t j = 0; j < m; ++j) b[r * m + j] -= f * b[col * m + j];
    }
  }
  for (std::size_t col = n; col-- > 0;) {
    const double inv = 1.0 / a[col * n + col];
    for (std::size_t j = 0; j < m; ++j) {
      double acc = b[col * m + j];
      for (std::size_t r = col + 1; r < n; ++r)
        acc -= a[col * n + r] * b[r * m + j];
      b[col * m + j] = acc * inv;
    }
  }
}

}  // namespace empp::detail
