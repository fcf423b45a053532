#include "tweo/svd.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tweo/common.hpp"

namespace tweo {

namespace {

// Core routine for m >= n. Works on a column-major copy so each rotation
// touches two contiguous columns.
SvdResult jacobi_tall(const double* a, size_t m, size_t n) {
  std::vector<double> B(m * n);  // column-major
  for (size_t i = 0; i < m; ++i) {
    for (size_t j = 0; j < n; ++j) B[j * m + i] = a[i * n + j];
  }
  std::vector<double> Vc(n * n, 0.0);  // column-major accumulator
  for (size_t j = 0; j < n; ++j) Vc[j * n + j] = 1.0;

  constexpr double kTol = 1e-13;
  constexpr int kMaxSweeps = 60;
  double worst = 0.0;
  bool converged = (n <= 1);
  for (int sweep = 0; sweep < kMaxSweeps && !converged; ++sweep) {
    worst = 0.0;
    for (size_t p = 0; p + 1 < n; ++p) {
      for (size_t q = p + 1; q < n; ++q) {
        double* bp = &B[p * m];
        double* bq = &B[q * m];
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (size_t i = 0; i < m; ++i) {
          alpha += bp[i] * bp[i];
          beta += bq[i] * bq[i];
          gamma += bp[i] * bq[i];
        }
        if (alpha == 0.0 || beta == 0.0) continue;
        const double rel = std::fabs(gamma) / std::sqrt(alpha * beta);
        worst = std::max(worst, rel);
        if (rel <= kTol) continue;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                         (std::fabs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (size_t i = 0; i < m; ++i) {
          const double u = bp[i], v = bq[i];
          bp[i] = c * u - s * v;
          bq[i] = s * u + c * v;
        }
        double* vp = &Vc[p * n];
        double* vq = &Vc[q * n];
        for (size_t i = 0; i < n; ++i) {
          const double u = vp[i], v = vq[i];
          vp[i] = c * u - s * v;
          vq[i] = s * u + c * v;
        }
      }
    }
    converged = worst <= kTol;
  }
  if (!converged)
    throw NumericError(strf("jacobi svd did not converge in %d sweeps on a %zux%zu matrix "
                            "(off measure %.3e)",
                            kMaxSweeps, m, n, worst));

  SvdResult r;
  r.m = m;
  r.n = n;
  r.r = n;
  r.S.resize(n);
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), size_t(0));
  std::vector<double> norms(n);
  for (size_t j = 0; j < n; ++j) {
    double acc = 0.0;
    for (size_t i = 0; i < m; ++i) acc += B[j * m + i] * B[j * m + i];
    norms[j] = std::sqrt(acc);
  }
  std::stable_sort(idx.begin(), idx.end(),
                   [&](size_t x, size_t y) { return norms[x] > norms[y]; });

  r.U.assign(m * n, 0.0);
  r.V.assign(n * n, 0.0);
  for (size_t k = 0; k < n; ++k) {
    const size_t j = idx[k];
    const double sv = norms[j];
    r.S[k] = sv;
    if (sv > 0.0) {
      for (size_t i = 0; i < m; ++i) r.U[i * n + k] = B[j * m + i] / sv;
    }
    for (size_t i = 0; i < n; ++i) r.V[i * n + k] = Vc[j * n + i];
  }
  return r;
}

}  // namespace

SvdResult jacobi_svd(const double* a, size_t m, size_t n) {
  if (m == 0 || n == 0) throw DimError("jacobi_svd: empty matrix");
  if (m >= n) return jacobi_tall(a, m, n);
  // Wide matrix: factor the transpose and swap the roles of U and V.
  std::vector<double> at(n * m);
  for (size_t i = 0; i < m; ++i) {
    for (size_t j = 0; j < n; ++j) at[j * m + i] = a[i * n + j];
  }
  SvdResult t = jacobi_tall(at.data(), n, m);
  SvdResult r;
  r.m = m;
  r.n = n;
  r.r = t.r;
  r.S = std::move(t.S);
  r.U = std::move(t.V);  // [m,r]
  r.V = std::move(t.U);  // [n,r]
  return r;
}

SvdResult jacobi_svd(const std::vector<double>& a, size_t m, size_t n) {
  if (a.size() != m * n)
    throw DimError(strf("jacobi_svd: %zu values for a %zux%zu matrix", a.size(), m, n));
  return jacobi_svd(a.data(), m, n);
}

}  // namespace tweo
