#pragma once

// Shared oracles for the test suite. Everything in here is a plain loop
// written straight from the math definition, independent of the library's
// kernels, so a disagreement always points at the implementation side.

#include <unistd.h>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "tweo/tensor.hpp"

namespace testutil {

inline double rel_err(double got, double want) {
  const double denom = std::max(std::fabs(want), 1e-12);
  return std::fabs(got - want) / denom;
}

template <typename T>
double max_abs_diff(const std::vector<T>& a, const std::vector<T>& b) {
  if (a.size() != b.size()) return INFINITY;
  double m = 0;
  for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(double(a[i]) - double(b[i])));
  return m;
}

// ----------------------------- matmul oracle -----------------------------

// c[m,n] = a[m,k] * b[k,n], triple loop in double
inline std::vector<double> ref_matmul(const std::vector<double>& a, const std::vector<double>& b,
                                      size_t m, size_t k, size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (size_t i = 0; i < m; ++i)
    for (size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      for (size_t j = 0; j < n; ++j) c[i * n + j] += av * b[p * n + j];
    }
  return c;
}

// c[m,n] = a[m,k] * b[n,k]^T
inline std::vector<double> ref_matmul_nt(const std::vector<double>& a, const std::vector<double>& b,
                                         size_t m, size_t k, size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j) {
      double acc = 0;
      for (size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[j * k + p];
      c[i * n + j] = acc;
    }
  return c;
}

// ----------------------------- gradient checks -----------------------------

// Central finite differences against the recorded backward pass. `build`
// re-runs the graph off the current leaf values and must return a scalar.
// Probes up to `max_probe` evenly spaced elements per leaf and returns the
// worst relative disagreement.
inline double grad_check(const std::function<tweo::Tensor<double>()>& build,
                         std::vector<tweo::Tensor<double>>& leaves, double h = 1e-5,
                         size_t max_probe = 64) {
  for (auto& l : leaves) {
    l.set_requires_grad(true);
    l.zero_grad();
  }
  tweo::Tensor<double> root = build();
  tweo::backward(root);
  std::vector<std::vector<double>> analytic;
  for (auto& l : leaves) analytic.push_back(l.grad());

  double worst = 0;
  for (size_t li = 0; li < leaves.size(); ++li) {
    auto& leaf = leaves[li];
    const size_t n = leaf.numel();
    const size_t probes = std::min(n, max_probe);
    for (size_t t = 0; t < probes; ++t) {
      const size_t i = t * n / probes;
      const double saved = leaf.mut_data()[i];
      leaf.mut_data()[i] = saved + h;
      const double fp = build().item();
      leaf.mut_data()[i] = saved - h;
      const double fm = build().item();
      leaf.mut_data()[i] = saved;
      const double fd = (fp - fm) / (2.0 * h);
      const double g = analytic[li][i];
      const double err = std::fabs(fd - g) / std::max({std::fabs(fd), std::fabs(g), 1e-4});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

// ----------------------------- fp8 reference codec -----------------------------

// Decode table built from first principles: sign / biased exponent /
// mantissa loops, nothing shared with the library's bit twiddling.
struct RefFp8 {
  int exp_bits = 0, man_bits = 0, bias = 0;
  bool has_inf = false;
  double max_finite = 0;
  // value of each code; NaN / +-inf appear as such
  double table[256];
};

inline RefFp8 ref_fp8_table(bool e4m3) {
  RefFp8 r;
  r.exp_bits = e4m3 ? 4 : 5;
  r.man_bits = e4m3 ? 3 : 2;
  r.bias = e4m3 ? 7 : 15;
  r.has_inf = !e4m3;
  const int emax_code = (1 << r.exp_bits) - 1;
  const int mmask = (1 << r.man_bits) - 1;
  for (int code = 0; code < 256; ++code) {
    const int s = (code >> 7) & 1;
    const int e = (code >> r.man_bits) & emax_code;
    const int m = code & mmask;
    double v;
    if (e == 0) {
      v = std::ldexp(double(m), 1 - r.bias - r.man_bits);
    } else if (!e4m3 && e == emax_code) {
      v = (m == 0) ? INFINITY : NAN;
    } else if (e4m3 && e == emax_code && m == mmask) {
      v = NAN;
    } else {
      v = std::ldexp(1.0 + double(m) / double(1 << r.man_bits), e - r.bias);
    }
    r.table[code] = s ? -v : v;
    if (std::isfinite(v)) r.max_finite = std::max(r.max_finite, v);
  }
  return r;
}

// Nearest finite grid value with ties to the even code; magnitudes past the
// top saturate (the library's documented overflow rule for finite inputs).
inline uint8_t ref_fp8_encode(double v, const RefFp8& r) {
  const bool neg = std::signbit(v);
  const double a = std::fabs(v);
  uint8_t best = 0;
  double best_d = INFINITY;
  for (int code = 0; code < 128; ++code) {
    const double tv = r.table[code];
    if (!std::isfinite(tv)) continue;
    const double d = std::fabs(tv - std::min(a, r.max_finite));
    if (d < best_d || (d == best_d && (code & 1) == 0)) {
      best_d = d;
      best = static_cast<uint8_t>(code);
    }
  }
  return neg ? static_cast<uint8_t>(best | 0x80) : best;
}

// ----------------------------- nll oracle -----------------------------

// mean over rows of logsumexp(row) - row[target], accumulated in double
inline double ref_mean_nll(const std::vector<float>& logits, size_t rows, size_t vocab,
                           const std::vector<int32_t>& targets) {
  double total = 0;
  for (size_t i = 0; i < rows; ++i) {
    const float* row = logits.data() + i * vocab;
    double mx = row[0];
    for (size_t j = 1; j < vocab; ++j) mx = std::max(mx, double(row[j]));
    double se = 0;
    for (size_t j = 0; j < vocab; ++j) se += std::exp(double(row[j]) - mx);
    total += mx + std::log(se) - double(row[targets[i]]);
  }
  return total / double(rows);
}

// ----------------------------- quantizer oracle -----------------------------

// One scale for `n` values: s = amax + eps (or the given scale), code =
// round-half-away(x/s * qb) clamped, value = code/qb * s.
inline void ref_absmax_qdq(const float* x, size_t n, int bits, double given_scale,
                           std::vector<int32_t>& codes, std::vector<float>& deq,
                           double& scale_out) {
  const int qb = (1 << (bits - 1)) - 1;
  double s = given_scale;
  if (s <= 0) {
    double amax = 0;
    for (size_t i = 0; i < n; ++i) amax = std::max(amax, std::fabs(double(x[i])));
    s = amax + 1e-6;
  }
  scale_out = s;
  codes.resize(n);
  deq.resize(n);
  for (size_t i = 0; i < n; ++i) {
    double c = std::round(double(x[i]) / s * qb);
    c = std::min(std::max(c, double(-qb)), double(qb));
    codes[i] = static_cast<int32_t>(c);
    deq[i] = static_cast<float>(c / double(qb) * s);
  }
}

// ----------------------------- activation penalty oracle -----------------------------

inline double ref_tweo_penalty(const std::vector<std::vector<float>>& taps, double tau, int p,
                               double eps) {
  double total = 0;
  for (const auto& t : taps) {
    double acc = 0;
    for (float v : t) acc += std::pow(std::fabs(double(v)) / (tau + eps), p);
    total += acc / double(t.size());
  }
  return total / double(taps.size());
}

// ----------------------------- scratch dirs and files -----------------------------

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("tweo_test_" + tag + "_" + std::to_string(++counter) + "_" +
             std::to_string(uint64_t(::getpid())));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::string str() const { return path_.string(); }
  std::string sub(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

inline void write_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary);
  f.write(content.data(), static_cast<std::streamsize>(content.size()));
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

}  // namespace testutil
