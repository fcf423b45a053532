#include "tweo/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace tweo {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

template <typename T>
std::shared_ptr<Node<T>> fresh(Shape s, std::vector<T> v) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(s);
  n->val = std::move(v);
  n->seq = next_node_seq();
  return n;
}

template <typename T>
bool wire(const std::shared_ptr<Node<T>>& n, std::initializer_list<Tensor<T>> parents) {
  bool rg = false;
  for (const auto& p : parents) rg = rg || p.node()->requires_grad;
  n->requires_grad = rg;
  if (rg)
    for (const auto& p : parents) n->parents.push_back(p.node());
  return rg;
}

template <typename T>
void accum(Node<T>* p, size_t i, T v) {
  if (p->requires_grad) {
    p->ensure_grad();
    p->grad[i] += v;
  }
}

template <typename T>
void check_2d(const Tensor<T>& t, const char* who) {
  if (t.rank() != 2) throw DimError(strf("%s expects rank-2, got %s", who, shape_str(t.shape()).c_str()));
}

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* who) {
  if (a.shape() != b.shape())
    throw DimError(strf("%s shape mismatch: %s vs %s", who, shape_str(a.shape()).c_str(),
                        shape_str(b.shape()).c_str()));
}

}  // namespace

// ----------------------------- kernels -----------------------------

template <typename T>
void kern_nn(const T* __restrict__ a, const T* __restrict__ b, T* __restrict__ c, size_t m,
             size_t k, size_t n, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, T(0));
  for (size_t i = 0; i < m; ++i) {
    const T* ar = a + i * k;
    T* cr = c + i * n;
    for (size_t l = 0; l < k; ++l) {
      const T av = ar[l];
      const T* br = b + l * n;
      for (size_t j = 0; j < n; ++j) cr[j] += av * br[j];
    }
  }
}

template <typename T>
void kern_nt(const T* __restrict__ a, const T* __restrict__ b, T* __restrict__ c, size_t m,
             size_t k, size_t n, bool accumulate) {
  for (size_t i = 0; i < m; ++i) {
    const T* ar = a + i * k;
    T* cr = c + i * n;
    for (size_t j = 0; j < n; ++j) {
      const T* br = b + j * k;
      T s = 0;
      for (size_t l = 0; l < k; ++l) s += ar[l] * br[l];
      cr[j] = accumulate ? cr[j] + s : s;
    }
  }
}

template <typename T>
void kern_tn(const T* __restrict__ a, const T* __restrict__ b, T* __restrict__ c, size_t m,
             size_t n, size_t k, bool accumulate) {
  if (!accumulate) std::fill(c, c + n * k, T(0));
  for (size_t i = 0; i < m; ++i) {
    const T* ar = a + i * n;
    const T* br = b + i * k;
    for (size_t l = 0; l < n; ++l) {
      const T av = ar[l];
      if (av == T(0)) continue;
      T* cr = c + l * k;
      for (size_t j = 0; j < k; ++j) cr[j] += av * br[j];
    }
  }
}

double amax_abs(const float* p, size_t n) {
  double m = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const double a = std::fabs(static_cast<double>(p[i]));
    if (a > m) m = a;
  }
  return m;
}

double amax_abs(const double* p, size_t n) {
  double m = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const double a = std::fabs(p[i]);
    if (a > m) m = a;
  }
  return m;
}

// ----------------------------- matmul family -----------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  check_2d(a, "matmul");
  check_2d(b, "matmul");
  const size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw DimError(strf("matmul inner dims: %s x %s", shape_str(a.shape()).c_str(),
                        shape_str(b.shape()).c_str()));
  std::vector<T> out(m * n);
  kern_nn(a.data().data(), b.data().data(), out.data(), m, k, n, false);
  auto node = fresh<T>({m, n}, std::move(out));
  if (wire(node, {a, b})) {
    Node<T>* self = node.get();
    Node<T>* pa = a.node().get();
    Node<T>* pb = b.node().get();
    node->back = [self, pa, pb, m, k, n]() {
      const T* g = self->grad.data();
      if (pa->requires_grad) {
        pa->ensure_grad();
        kern_nt(g, pb->val.data(), pa->grad.data(), m, n, k, true);
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        kern_tn(pa->val.data(), g, pb->grad.data(), m, k, n, true);
      }
    };
  }
  return Tensor<T>(node);
}

template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  check_2d(a, "matmul_nt");
  check_2d(b, "matmul_nt");
  const size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k)
    throw DimError(strf("matmul_nt inner dims: %s x %s^T", shape_str(a.shape()).c_str(),
                        shape_str(b.shape()).c_str()));
  std::vector<T> out(m * n);
  kern_nt(a.data().data(), b.data().data(), out.data(), m, k, n, false);
  auto node = fresh<T>({m, n}, std::move(out));
  if (wire(node, {a, b})) {
    Node<T>* self = node.get();
    Node<T>* pa = a.node().get();
    Node<T>* pb = b.node().get();
    node->back = [self, pa, pb, m, k, n]() {
      const T* g = self->grad.data();
      if (pa->requires_grad) {
        pa->ensure_grad();
        kern_nn(g, pb->val.data(), pa->grad.data(), m, n, k, true);
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        kern_tn(g, pa->val.data(), pb->grad.data(), m, n, k, true);
      }
    };
  }
  return Tensor<T>(node);
}

namespace {
template <typename T>
void check_batched(const Tensor<T>& a, const Tensor<T>& b, const char* who) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0))
    throw DimError(strf("%s expects matching [B,.,.] operands: %s vs %s", who,
                        shape_str(a.shape()).c_str(), shape_str(b.shape()).c_str()));
}
}  // namespace

template <typename T>
Tensor<T> batched_matmul(const Tensor<T>& a, const Tensor<T>& b) {
  check_batched(a, b, "batched_matmul");
  const size_t B = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  if (b.dim(1) != k)
    throw DimError(strf("batched_matmul inner dims: %s x %s", shape_str(a.shape()).c_str(),
                        shape_str(b.shape()).c_str()));
  std::vector<T> out(B * m * n);
  for (size_t s = 0; s < B; ++s)
    kern_nn(a.data().data() + s * m * k, b.data().data() + s * k * n, out.data() + s * m * n, m, k,
            n, false);
  auto node = fresh<T>({B, m, n}, std::move(out));
  if (wire(node, {a, b})) {
    Node<T>* self = node.get();
    Node<T>* pa = a.node().get();
    Node<T>* pb = b.node().get();
    node->back = [self, pa, pb, B, m, k, n]() {
      for (size_t s = 0; s < B; ++s) {
        const T* g = self->grad.data() + s * m * n;
        if (pa->requires_grad) {
          pa->ensure_grad();
          kern_nt(g, pb->val.data() + s * k * n, pa->grad.data() + s * m * k, m, n, k, true);
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          kern_tn(pa->val.data() + s * m * k, g, pb->grad.data() + s * k * n, m, k, n, true);
        }
      }
    };
  }
  return Tensor<T>(node);
}

template <typename T>
Tensor<T> batched_matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  check_batched(a, b, "batched_matmul_nt");
  const size_t B = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
  if (b.dim(2) != k)
    throw DimError(strf("batched_matmul_nt inner dims: %s x %s^T", shape_str(a.shape()).c_str(),
                        shape_str(b.shape()).c_str()));
  std::vector<T> out(B * m * n);
  for (size_t s = 0; s < B; ++s)
    kern_nt(a.data().data() + s * m * k, b.data().data() + s * n * k, out.data() + s * m * n, m, k,
            n, false);
  auto node = fresh<T>({B, m, n}, std::move(out));
  if (wire(node, {a, b})) {
    Node<T>* self = node.get();
    Node<T>* pa = a.node().get();
    Node<T>* pb = b.node().get();
    node->back = [self, pa, pb, B, m, k, n]() {
      for (size_t s = 0; s < B; ++s) {
        const T* g = self->grad.data() + s * m * n;
        if (pa->requires_grad) {
          pa->ensure_grad();
          kern_nn(g, pb->val.data() + s * n * k, pa->grad.data() + s * m * k, m, n, k, true);
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          kern_tn(g, pa->val.data() + s * m * k, pb->grad.data() + s * n * k, m, n, k, true);
        }
      }
    };
  }
  return Tensor<T>(node);
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  check_2d(a, "transpose");
  const size_t m = a.dim(0), n = a.dim(1);
  std::vector<T> out(m * n);
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j) out[j * m + i] = a.data()[i * n + j];
  auto node = fresh<T>({n, m}, std::move(out));
  if (wire(node, {a})) {
    Node<T>* self = node.get();
    Node<T>* pa = a.node().get();
    node->back = [self, pa, m, n]() {
      if (!pa->requires_grad) return;
      pa->ensure_grad();
      for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) pa->grad[i * n + j] += self->grad[j * m + i];
    };
  }
  return Tensor<T>(node);
}

// ----------------------------- elementwise -----------------------------

namespace {

// shared scaffolding for unary elementwise ops with dval = f'(x)
template <typename T, typename FwdFn, typename BwdFn>
Tensor<T> unary_op(const Tensor<T>& a, FwdFn f, BwdFn dfdx) {
  std::vector<T> out(a.numel());
  const auto& x = a.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  auto node = fresh<T>(a.shape(), std::move(out));
  if (wire(node, {a})) {
    Node<T>* self = node.get();
    Node<T>* pa = a.node().get();
    node->back = [self, pa, dfdx]() {
      if (!pa->requires_grad) return;
      pa->ensure_grad();
      for (size_t i = 0; i < self->grad.size(); ++i)
        pa->grad[i] += self->grad[i] * dfdx(pa->val[i]);
    };
  }
  return Tensor<T>(node);
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  auto node = fresh<T>(a.shape(), std::move(out));
  if (wire(node, {a, b})) {
    Node<T>* self = node.get();
    Node<T>* pa = a.node().get();
    Node<T>* pb = b.node().get();
    node->back = [self, pa, pb]() {
      for (size_t i = 0; i < self->grad.size(); ++i) {
        accum(pa, i, self->grad[i]);
        accum(pb, i, self->grad[i]);
      }
    };
  }
  return Tensor<T>(node);
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  auto node = fresh<T>(a.shape(), std::move(out));
  if (wire(node, {a, b})) {
    Node<T>* self = node.get();
    Node<T>* pa = a.node().get();
    Node<T>* pb = b.node().get();
    node->back = [self, pa, pb]() {
      for (size_t i = 0; i < self->grad.size(); ++i) {
        accum(pa, i, self->grad[i]);
        accum(pb, i, -self->grad[i]);
      }
    };
  }
  return Tensor<T>(node);
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  auto node = fresh<T>(a.shape(), std::move(out));
  if (wire(node, {a, b})) {
    Node<T>* self = node.get();
    Node<T>* pa = a.node().get();
    Node<T>* pb = b.node().get();
    node->back = [self, pa, pb]() {
      for (size_t i = 0; i < self->grad.size(); ++i) {
        accum(pa, i, self->grad[i] * pb->val[i]);
        accum(pb, i, self->grad[i] * pa->val[i]);
      }
    };
  }
  return Tensor<T>(node);
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  return unary_op(
      a, [c](T x) { return x + c; }, [](T) { return T(1); });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T c) {
  return unary_op(
      a, [c](T x) { return x * c; }, [c](T) { return c; });
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& a, const Tensor<T>& bias) {
  if (a.rank() != 2 || bias.rank() != 1 || bias.dim(0) != a.dim(1))
    throw DimError(strf("add_bias: %s + %s", shape_str(a.shape()).c_str(),
                        shape_str(bias.shape()).c_str()));
  const size_t n = a.dim(0), d = a.dim(1);
  std::vector<T> out(a.data());
  for (size_t r = 0; r < n; ++r)
    for (size_t j = 0; j < d; ++j) out[r * d + j] += bias.data()[j];
  auto node = fresh<T>(a.shape(), std::move(out));
  if (wire(node, {a, bias})) {
    Node<T>* self = node.get();
    Node<T>* pa = a.node().get();
    Node<T>* pbias = bias.node().get();
    node->back = [self, pa, pbias, n, d]() {
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (size_t i = 0; i < n * d; ++i) pa->grad[i] += self->grad[i];
      }
      if (pbias->requires_grad) {
        pbias->ensure_grad();
        for (size_t r = 0; r < n; ++r)
          for (size_t j = 0; j < d; ++j) pbias->grad[j] += self->grad[r * d + j];
      }
    };
  }
  return Tensor<T>(node);
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  return unary_op(
      a, [](T x) { return static_cast<T>(gelu_scalar(static_cast<double>(x))); },
      [](T x) {
        const double xd = static_cast<double>(x);
        const double phi_cdf = 0.5 * (1.0 + std::erf(xd * kInvSqrt2));
        const double phi_pdf = kInvSqrt2Pi * std::exp(-0.5 * xd * xd);
        return static_cast<T>(phi_cdf + xd * phi_pdf);
      });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& a) {
  return unary_op(
      a, [](T x) { return static_cast<T>(silu_scalar(static_cast<double>(x))); },
      [](T x) {
        const double xd = static_cast<double>(x);
        const double s = 1.0 / (1.0 + std::exp(-xd));
        return static_cast<T>(s * (1.0 + xd * (1.0 - s)));
      });
}

template <typename T>
Tensor<T> absval(const Tensor<T>& a) {
  // subgradient 0 at the kink
  return unary_op(
      a, [](T x) { return x < T(0) ? -x : x; },
      [](T x) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Tensor<T> ipow(const Tensor<T>& a, int k) {
  if (k < 1) throw ContractError(strf("ipow exponent must be >= 1, got %d", k));
  auto powk = [](T x, int e) {
    T r = x;
    for (int i = 1; i < e; ++i) r *= x;
    return r;
  };
  return unary_op(
      a, [k, powk](T x) { return powk(x, k); },
      [k, powk](T x) { return k == 1 ? T(1) : T(k) * powk(x, k - 1); });
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
  T s = 0;
  for (T v : a.data()) s += v;
  auto node = fresh<T>({1}, std::vector<T>{s});
  if (wire(node, {a})) {
    Node<T>* self = node.get();
    Node<T>* pa = a.node().get();
    node->back = [self, pa]() {
      if (!pa->requires_grad) return;
      pa->ensure_grad();
      const T g = self->grad[0];
      for (auto& gv : pa->grad) gv += g;
    };
  }
  return Tensor<T>(node);
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
  const T inv = T(1) / static_cast<T>(a.numel());
  return mul_scalar(sum_all(a), inv);
}

// ----------------------------- normalization and attention -----------------------------

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     double eps) {
  if (x.rank() < 1) throw DimError("layer_norm: empty input");
  const size_t d = x.shape().back();
  if (gain.rank() != 1 || gain.dim(0) != d || bias.rank() != 1 || bias.dim(0) != d)
    throw DimError(strf("layer_norm: input %s with gain %s, bias %s",
                        shape_str(x.shape()).c_str(), shape_str(gain.shape()).c_str(),
                        shape_str(bias.shape()).c_str()));
  const size_t rows = x.numel() / d;
  std::vector<T> out(x.numel());
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  for (size_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * d;
    double mu = 0;
    for (size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0;
    for (size_t j = 0; j < d; ++j) {
      const double c = xr[j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = static_cast<T>(inv);
    for (size_t j = 0; j < d; ++j) {
      const T xh = static_cast<T>((xr[j] - mu) * inv);
      (*xhat)[r * d + j] = xh;
      out[r * d + j] = xh * gain.data()[j] + bias.data()[j];
    }
  }
  auto node = fresh<T>(x.shape(), std::move(out));
  if (wire(node, {x, gain, bias})) {
    Node<T>* self = node.get();
    Node<T>* px = x.node().get();
    Node<T>* pg = gain.node().get();
    Node<T>* pb = bias.node().get();
    node->back = [self, px, pg, pb, xhat, inv_std, rows, d]() {
      const T* g = self->grad.data();
      if (pg->requires_grad) {
        pg->ensure_grad();
        for (size_t r = 0; r < rows; ++r)
          for (size_t j = 0; j < d; ++j) pg->grad[j] += g[r * d + j] * (*xhat)[r * d + j];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (size_t r = 0; r < rows; ++r)
          for (size_t j = 0; j < d; ++j) pb->grad[j] += g[r * d + j];
      }
      if (px->requires_grad) {
        px->ensure_grad();
        for (size_t r = 0; r < rows; ++r) {
          const T* gr = g + r * d;
          const T* xh = xhat->data() + r * d;
          double m1 = 0, m2 = 0;  // mean(dy*gain), mean(dy*gain*xhat)
          for (size_t j = 0; j < d; ++j) {
            const double dyg = static_cast<double>(gr[j]) * pg->val[j];
            m1 += dyg;
            m2 += dyg * xh[j];
          }
          m1 /= static_cast<double>(d);
          m2 /= static_cast<double>(d);
          const double inv = (*inv_std)[r];
          for (size_t j = 0; j < d; ++j) {
            const double dyg = static_cast<double>(gr[j]) * pg->val[j];
            px->grad[r * d + j] += static_cast<T>((dyg - m1 - xh[j] * m2) * inv);
          }
        }
      }
    };
  }
  return Tensor<T>(node);
}

template <typename T>
Tensor<T> causal_softmax(const Tensor<T>& scores) {
  if (scores.rank() != 3 || scores.dim(1) != scores.dim(2))
    throw DimError(strf("causal_softmax expects [B,T,T], got %s", shape_str(scores.shape()).c_str()));
  const size_t B = scores.dim(0), Tn = scores.dim(1);
  std::vector<T> out(scores.numel(), T(0));
  for (size_t s = 0; s < B; ++s) {
    for (size_t i = 0; i < Tn; ++i) {
      const T* row = scores.data().data() + (s * Tn + i) * Tn;
      T* orow = out.data() + (s * Tn + i) * Tn;
      double mx = row[0];
      for (size_t j = 1; j <= i; ++j) mx = std::max<double>(mx, row[j]);
      double z = 0;
      for (size_t j = 0; j <= i; ++j) {
        const double e = std::exp(static_cast<double>(row[j]) - mx);
        orow[j] = static_cast<T>(e);
        z += e;
      }
      const double invz = 1.0 / z;
      for (size_t j = 0; j <= i; ++j) orow[j] = static_cast<T>(orow[j] * invz);
    }
  }
  auto node = fresh<T>(scores.shape(), std::move(out));
  if (wire(node, {scores})) {
    Node<T>* self = node.get();
    Node<T>* pa = scores.node().get();
    node->back = [self, pa, B, Tn]() {
      if (!pa->requires_grad) return;
      pa->ensure_grad();
      for (size_t s = 0; s < B; ++s) {
        for (size_t i = 0; i < Tn; ++i) {
          const size_t off = (s * Tn + i) * Tn;
          const T* p = self->val.data() + off;
          const T* dp = self->grad.data() + off;
          double dot = 0;
          for (size_t j = 0; j <= i; ++j) dot += static_cast<double>(dp[j]) * p[j];
          for (size_t j = 0; j <= i; ++j)
            pa->grad[off + j] += static_cast<T>(p[j] * (static_cast<double>(dp[j]) - dot));
        }
      }
    };
  }
  return Tensor<T>(node);
}

template <typename T>
Tensor<T> softmax_xent_mean(const Tensor<T>& logits, const std::vector<int32_t>& targets) {
  check_2d(logits, "softmax_xent_mean");
  const size_t n = logits.dim(0), V = logits.dim(1);
  if (targets.size() != n)
    throw DimError(strf("softmax_xent_mean: %zu logit rows vs %zu targets", n, targets.size()));
  for (int32_t t : targets)
    if (t < 0 || static_cast<size_t>(t) >= V)
      throw ContractError(strf("target id %d outside vocab of %zu", t, V));
  auto probs = std::make_shared<std::vector<T>>(n * V);
  double total = 0;
  for (size_t r = 0; r < n; ++r) {
    const T* row = logits.data().data() + r * V;
    double mx = row[0];
    for (size_t v = 1; v < V; ++v) mx = std::max<double>(mx, row[v]);
    double z = 0;
    for (size_t v = 0; v < V; ++v) z += std::exp(static_cast<double>(row[v]) - mx);
    const double lse = mx + std::log(z);
    total += lse - static_cast<double>(row[targets[r]]);
    const double invz = 1.0 / z;
    for (size_t v = 0; v < V; ++v)
      (*probs)[r * V + v] = static_cast<T>(std::exp(static_cast<double>(row[v]) - mx) * invz);
  }
  auto node = fresh<T>({1}, std::vector<T>{static_cast<T>(total / static_cast<double>(n))});
  if (wire(node, {logits})) {
    Node<T>* self = node.get();
    Node<T>* pl = logits.node().get();
    auto tgt = std::make_shared<std::vector<int32_t>>(targets);
    node->back = [self, pl, probs, tgt, n, V]() {
      if (!pl->requires_grad) return;
      pl->ensure_grad();
      const T scale = self->grad[0] / static_cast<T>(n);
      for (size_t r = 0; r < n; ++r) {
        const size_t t = static_cast<size_t>((*tgt)[r]);
        for (size_t v = 0; v < V; ++v) {
          T delta = (*probs)[r * V + v];
          if (v == t) delta -= T(1);
          pl->grad[r * V + v] += scale * delta;
        }
      }
    };
  }
  return Tensor<T>(node);
}

// ----------------------------- reshaping and indexing -----------------------------

template <typename T>
Tensor<T> embedding(const Tensor<T>& weight, const std::vector<int32_t>& ids) {
  check_2d(weight, "embedding");
  const size_t V = weight.dim(0), d = weight.dim(1);
  for (int32_t id : ids)
    if (id < 0 || static_cast<size_t>(id) >= V)
      throw ContractError(strf("embedding id %d outside table of %zu rows", id, V));
  std::vector<T> out(ids.size() * d);
  for (size_t r = 0; r < ids.size(); ++r)
    std::memcpy(out.data() + r * d, weight.data().data() + static_cast<size_t>(ids[r]) * d,
                d * sizeof(T));
  auto node = fresh<T>({ids.size(), d}, std::move(out));
  if (wire(node, {weight})) {
    Node<T>* self = node.get();
    Node<T>* pw = weight.node().get();
    auto ids_copy = std::make_shared<std::vector<int32_t>>(ids);
    node->back = [self, pw, ids_copy, d]() {
      if (!pw->requires_grad) return;
      pw->ensure_grad();
      for (size_t r = 0; r < ids_copy->size(); ++r) {
        T* wrow = pw->grad.data() + static_cast<size_t>((*ids_copy)[r]) * d;
        const T* grow = self->grad.data() + r * d;
        for (size_t j = 0; j < d; ++j) wrow[j] += grow[j];
      }
    };
  }
  return Tensor<T>(node);
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, const Shape& s) {
  if (numel(s) != a.numel())
    throw DimError(strf("reshape %s -> %s changes element count", shape_str(a.shape()).c_str(),
                        shape_str(s).c_str()));
  auto node = fresh<T>(s, std::vector<T>(a.data()));
  if (wire(node, {a})) {
    Node<T>* self = node.get();
    Node<T>* pa = a.node().get();
    node->back = [self, pa]() {
      if (!pa->requires_grad) return;
      pa->ensure_grad();
      for (size_t i = 0; i < self->grad.size(); ++i) pa->grad[i] += self->grad[i];
    };
  }
  return Tensor<T>(node);
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, size_t r0, size_t r1) {
  check_2d(a, "slice_rows");
  if (r0 > r1 || r1 > a.dim(0))
    throw DimError(strf("slice_rows [%zu,%zu) of %s", r0, r1, shape_str(a.shape()).c_str()));
  const size_t d = a.dim(1), n = r1 - r0;
  std::vector<T> out(a.data().begin() + r0 * d, a.data().begin() + r1 * d);
  auto node = fresh<T>({n, d}, std::move(out));
  if (wire(node, {a})) {
    Node<T>* self = node.get();
    Node<T>* pa = a.node().get();
    node->back = [self, pa, r0, d]() {
      if (!pa->requires_grad) return;
      pa->ensure_grad();
      for (size_t i = 0; i < self->grad.size(); ++i) pa->grad[r0 * d + i] += self->grad[i];
    };
  }
  return Tensor<T>(node);
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, size_t c0, size_t c1) {
  check_2d(a, "slice_cols");
  if (c0 > c1 || c1 > a.dim(1))
    throw DimError(strf("slice_cols [%zu,%zu) of %s", c0, c1, shape_str(a.shape()).c_str()));
  const size_t rows = a.dim(0), d = a.dim(1), w = c1 - c0;
  std::vector<T> out(rows * w);
  const T* ap = a.data().data();
  for (size_t i = 0; i < rows; ++i) {
    for (size_t j = 0; j < w; ++j) out[i * w + j] = ap[i * d + c0 + j];
  }
  auto node = fresh<T>({rows, w}, std::move(out));
  if (wire(node, {a})) {
    Node<T>* self = node.get();
    Node<T>* pa = a.node().get();
    node->back = [self, pa, rows, d, c0, w]() {
      if (!pa->requires_grad) return;
      pa->ensure_grad();
      for (size_t i = 0; i < rows; ++i) {
        for (size_t j = 0; j < w; ++j) pa->grad[i * d + c0 + j] += self->grad[i * w + j];
      }
    };
  }
  return Tensor<T>(node);
}

namespace {
// index map for [B*T, H*Dh] -> [B*H, T, Dh]; from_heads uses the inverse
inline size_t head_src_index(size_t b, size_t h, size_t t, size_t c, size_t Tn, size_t H,
                             size_t Dh) {
  return (b * Tn + t) * (H * Dh) + h * Dh + c;
}
}  // namespace

template <typename T>
Tensor<T> to_heads(const Tensor<T>& x, size_t B, size_t Tn, size_t H) {
  check_2d(x, "to_heads");
  if (x.dim(0) != B * Tn || x.dim(1) % H != 0)
    throw DimError(strf("to_heads: %s with B=%zu T=%zu H=%zu", shape_str(x.shape()).c_str(), B,
                        Tn, H));
  const size_t Dh = x.dim(1) / H;
  std::vector<T> out(x.numel());
  size_t w = 0;
  for (size_t b = 0; b < B; ++b)
    for (size_t h = 0; h < H; ++h)
      for (size_t t = 0; t < Tn; ++t)
        for (size_t c = 0; c < Dh; ++c) out[w++] = x.data()[head_src_index(b, h, t, c, Tn, H, Dh)];
  auto node = fresh<T>({B * H, Tn, Dh}, std::move(out));
  if (wire(node, {x})) {
    Node<T>* self = node.get();
    Node<T>* pa = x.node().get();
    node->back = [self, pa, B, Tn, H, Dh]() {
      if (!pa->requires_grad) return;
      pa->ensure_grad();
      size_t w = 0;
      for (size_t b = 0; b < B; ++b)
        for (size_t h = 0; h < H; ++h)
          for (size_t t = 0; t < Tn; ++t)
            for (size_t c = 0; c < Dh; ++c)
              pa->grad[head_src_index(b, h, t, c, Tn, H, Dh)] += self->grad[w++];
    };
  }
  return Tensor<T>(node);
}

template <typename T>
Tensor<T> from_heads(const Tensor<T>& x, size_t B, size_t Tn, size_t H) {
  if (x.rank() != 3 || x.dim(0) != B * H || x.dim(1) != Tn)
    throw DimError(strf("from_heads: %s with B=%zu T=%zu H=%zu", shape_str(x.shape()).c_str(), B,
                        Tn, H));
  const size_t Dh = x.dim(2);
  std::vector<T> out(x.numel());
  size_t r = 0;
  for (size_t b = 0; b < B; ++b)
    for (size_t h = 0; h < H; ++h)
      for (size_t t = 0; t < Tn; ++t)
        for (size_t c = 0; c < Dh; ++c) out[head_src_index(b, h, t, c, Tn, H, Dh)] = x.data()[r++];
  auto node = fresh<T>({B * Tn, H * Dh}, std::move(out));
  if (wire(node, {x})) {
    Node<T>* self = node.get();
    Node<T>* pa = x.node().get();
    node->back = [self, pa, B, Tn, H, Dh]() {
      if (!pa->requires_grad) return;
      pa->ensure_grad();
      size_t r = 0;
      for (size_t b = 0; b < B; ++b)
        for (size_t h = 0; h < H; ++h)
          for (size_t t = 0; t < Tn; ++t)
            for (size_t c = 0; c < Dh; ++c)
              pa->grad[r++] += self->grad[head_src_index(b, h, t, c, Tn, H, Dh)];
    };
  }
  return Tensor<T>(node);
}

template <typename T>
std::vector<int64_t> argmax_rows(const Tensor<T>& a) {
  check_2d(a, "argmax_rows");
  const size_t n = a.dim(0), d = a.dim(1);
  std::vector<int64_t> out(n);
  for (size_t r = 0; r < n; ++r) {
    const T* row = a.data().data() + r * d;
    size_t best = 0;
    for (size_t j = 1; j < d; ++j)
      if (row[j] > row[best]) best = j;  // ties keep the lowest index
    out[r] = static_cast<int64_t>(best);
  }
  return out;
}

template <typename T>
bool all_finite(const Tensor<T>& a) {
  for (T v : a.data())
    if (!std::isfinite(static_cast<double>(v))) return false;
  return true;
}

// ----------------------------- instantiations -----------------------------

#define TWEO_INSTANTIATE_OPS(T)                                                              \
  template void kern_nn<T>(const T*, const T*, T*, size_t, size_t, size_t, bool);            \
  template void kern_nt<T>(const T*, const T*, T*, size_t, size_t, size_t, bool);            \
  template void kern_tn<T>(const T*, const T*, T*, size_t, size_t, size_t, bool);            \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> matmul_nt<T>(const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> batched_matmul<T>(const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> batched_matmul_nt<T>(const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> transpose<T>(const Tensor<T>&);                                         \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> add_scalar<T>(const Tensor<T>&, T);                                     \
  template Tensor<T> mul_scalar<T>(const Tensor<T>&, T);                                     \
  template Tensor<T> add_bias<T>(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> gelu<T>(const Tensor<T>&);                                              \
  template Tensor<T> silu<T>(const Tensor<T>&);                                              \
  template Tensor<T> absval<T>(const Tensor<T>&);                                            \
  template Tensor<T> ipow<T>(const Tensor<T>&, int);                                         \
  template Tensor<T> sum_all<T>(const Tensor<T>&);                                           \
  template Tensor<T> mean_all<T>(const Tensor<T>&);                                          \
  template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,     \
                                   double);                                                  \
  template Tensor<T> causal_softmax<T>(const Tensor<T>&);                                    \
  template Tensor<T> softmax_xent_mean<T>(const Tensor<T>&, const std::vector<int32_t>&);    \
  template Tensor<T> embedding<T>(const Tensor<T>&, const std::vector<int32_t>&);            \
  template Tensor<T> reshape<T>(const Tensor<T>&, const Shape&);                             \
  template Tensor<T> slice_rows<T>(const Tensor<T>&, size_t, size_t);                        \
  template Tensor<T> slice_cols<T>(const Tensor<T>&, size_t, size_t);                        \
  template Tensor<T> to_heads<T>(const Tensor<T>&, size_t, size_t, size_t);                  \
  template Tensor<T> from_heads<T>(const Tensor<T>&, size_t, size_t, size_t);                \
  template std::vector<int64_t> argmax_rows<T>(const Tensor<T>&);                            \
  template bool all_finite<T>(const Tensor<T>&);

TWEO_INSTANTIATE_OPS(float)
TWEO_INSTANTIATE_OPS(double)

}  // namespace tweo
