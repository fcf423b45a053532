#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "tweo/tensor.hpp"

namespace tweo {

// Scalar activation math, shared between the graph ops and the analyzers so
// both sides produce the same bits for the same double input.
inline double gelu_scalar(double x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  return x * 0.5 * (1.0 + std::erf(x * kInvSqrt2));
}

inline double silu_scalar(double x) { return x / (1.0 + std::exp(-x)); }

// ----------------------------- raw matmul kernels -----------------------------
// Shared by the autodiff ops, the FP8 emulated path and the plain (no-graph)
// forward, so that paths which must agree bit-for-bit run the exact same
// loops in the exact same order. Single-threaded, fixed iteration order.

// c[m,n] = a[m,k] * b[k,n]            (+= when accumulate)
template <typename T>
void kern_nn(const T* a, const T* b, T* c, size_t m, size_t k, size_t n, bool accumulate);

// c[m,n] = a[m,k] * b[n,k]^T
template <typename T>
void kern_nt(const T* a, const T* b, T* c, size_t m, size_t k, size_t n, bool accumulate);

// c[n,k] = a[m,n]^T * b[m,k]
template <typename T>
void kern_tn(const T* a, const T* b, T* c, size_t m, size_t n, size_t k, bool accumulate);

// ----------------------------- graph ops -----------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);  // [m,k]x[k,n]

// a [m,k] times b [n,k] transposed -> [m,n]; the linear-layer shape
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> batched_matmul(const Tensor<T>& a, const Tensor<T>& b);  // [B,m,k]x[B,k,n]

template <typename T>
Tensor<T> batched_matmul_nt(const Tensor<T>& a, const Tensor<T>& b);  // [B,m,k]x[B,n,k]

template <typename T>
Tensor<T> transpose(const Tensor<T>& a);  // 2-d

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c);
template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T c);

// rows of a [n,d] plus bias [d]
template <typename T>
Tensor<T> add_bias(const Tensor<T>& a, const Tensor<T>& bias);

// exact gaussian gelu: x * Phi(x), computed through erf in double
template <typename T>
Tensor<T> gelu(const Tensor<T>& a);

template <typename T>
Tensor<T> silu(const Tensor<T>& a);

template <typename T>
Tensor<T> absval(const Tensor<T>& a);

// elementwise integer power, k >= 1
template <typename T>
Tensor<T> ipow(const Tensor<T>& a, int k);

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a);  // scalar
template <typename T>
Tensor<T> mean_all(const Tensor<T>& a);  // scalar

// normalizes over the last dimension; gain/bias are [d]
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, double eps);

// scores [B,T,T]: softmax over the last axis restricted to j <= i
template <typename T>
Tensor<T> causal_softmax(const Tensor<T>& scores);

// mean negative log-likelihood over rows; logits [n,V], targets n ids
template <typename T>
Tensor<T> softmax_xent_mean(const Tensor<T>& logits, const std::vector<int32_t>& targets);

// gathers rows of weight [V,d]; backward scatter-adds
template <typename T>
Tensor<T> embedding(const Tensor<T>& weight, const std::vector<int32_t>& ids);

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, const Shape& s);

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, size_t r0, size_t r1);

// column band [c0,c1) of a 2-d tensor; used to split fused projections
template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, size_t c0, size_t c1);

// [B*T, H*Dh] <-> [B*H, T, Dh] head layout permutations
template <typename T>
Tensor<T> to_heads(const Tensor<T>& x, size_t B, size_t Tn, size_t H);
template <typename T>
Tensor<T> from_heads(const Tensor<T>& x, size_t B, size_t Tn, size_t H);

template <typename T>
std::vector<int64_t> argmax_rows(const Tensor<T>& a);

template <typename T>
bool all_finite(const Tensor<T>& a);

double amax_abs(const float* p, size_t n);
double amax_abs(const double* p, size_t n);

}  // namespace tweo
