#pragma once

#include <cstddef>
#include <vector>

namespace tweo {

// Thin SVD, A = U * diag(S) * V^T with singular values sorted descending.
// U is [m,r] row-major, V is [n,r] row-major, r = min(m,n). Singular vectors
// are determined up to a joint sign flip of each (u_k, v_k) pair; consumers
// must only rely on sign-invariant quantities.
struct SvdResult {
  size_t m = 0, n = 0, r = 0;
  std::vector<double> U;
  std::vector<double> S;
  std::vector<double> V;
};

// One-sided Jacobi on column pairs. Accurate to near machine precision for
// the modest sizes this project diagnoses; throws NumericError when the
// sweep limit is hit before the off-diagonal measure drops below tolerance.
SvdResult jacobi_svd(const double* a, size_t m, size_t n);

SvdResult jacobi_svd(const std::vector<double>& a, size_t m, size_t n);

}  // namespace tweo
