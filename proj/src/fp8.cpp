#include "tweo/fp8.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "tweo/common.hpp"
#include "tweo/ops.hpp"

namespace tweo::fp8 {

namespace {

constexpr FormatSpec kE4M3{"E4M3", 4, 3, 7, 448.0, false};
constexpr FormatSpec kE5M2{"E5M2", 5, 2, 15, 57344.0, true};
// max_finite is effectively unbounded for the bypass; nothing saturates.
constexpr FormatSpec kLossless{"LOSSLESS", 0, 0, 0, std::numeric_limits<double>::infinity(),
                               false};

uint8_t max_finite_code(Format f) {
  // E4M3: exponent field 15, mantissa 110 -> 448. E5M2: field 30, mantissa 11.
  return f == Format::E4M3 ? 0x7E : 0x7B;
}

uint8_t nan_code(Format, bool negative) {
  uint8_t sign = negative ? 0x80 : 0x00;
  return uint8_t(sign | 0x7F);  // canonical quiet NaN in both formats
}

void emit_event(Fp8RunCtx& ctx, const std::string& site, const char* role, const Fp8Tensor& q,
                double amax) {
  ctx.sat_total += q.saturated;
  if (ctx.on_event) {
    QuantEvent e;
    e.step = ctx.step;
    e.site = site;
    e.role = role;
    e.format = q.format;
    e.scale = q.scale;
    e.amax = amax;
    e.saturated = q.saturated;
    ctx.on_event(e);
  }
}

void strict_check(const Fp8RunCtx& ctx, const std::string& site, const char* role,
                  const Fp8Tensor& q, double amax) {
  if (ctx.overflow == Overflow::STRICT && q.saturated > 0) {
    throw CollapseSignal{ctx.step, site + "." + role, amax};
  }
}

}  // namespace

const FormatSpec& spec_of(Format f) {
  switch (f) {
    case Format::E4M3: return kE4M3;
    case Format::E5M2: return kE5M2;
    case Format::LOSSLESS: return kLossless;
  }
  throw ContractError("unknown fp8 format");
}

Format format_from_name(const std::string& name) {
  if (name == "E4M3" || name == "e4m3") return Format::E4M3;
  if (name == "E5M2" || name == "e5m2") return Format::E5M2;
  if (name == "LOSSLESS" || name == "lossless") return Format::LOSSLESS;
  throw ContractError(strf("unknown fp8 format '%s' (expected E4M3, E5M2 or LOSSLESS)",
                           name.c_str()));
}

Overflow overflow_from_name(const std::string& name) {
  if (name == "saturate" || name == "SATURATE") return Overflow::SATURATE;
  if (name == "strict" || name == "STRICT") return Overflow::STRICT;
  throw ContractError(strf("unknown overflow mode '%s' (expected saturate or strict)",
                           name.c_str()));
}

uint8_t encode(double v, Format f) {
  if (f == Format::LOSSLESS) {
    throw ContractError("LOSSLESS is a bypass format and has no 8-bit codes");
  }
  const FormatSpec& sp = spec_of(f);
  const int mbits = sp.man_bits;
  const uint8_t sign = std::signbit(v) ? 0x80 : 0x00;

  if (std::isnan(v)) {
    if (f == Format::E4M3) return nan_code(f, sign != 0);
    // E5M2: a NaN produced by decode() carries its 2-bit code payload in the
    // low double mantissa bits; reproduce it so decode/encode round-trips.
    uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    uint8_t payload = uint8_t(bits & 0x3);
    if (payload == 0) payload = 3;  // payload 0 would collide with the Inf code
    return uint8_t(sign | 0x7C | payload);
  }

  double a = std::fabs(v);
  if (a > sp.max_finite) {
    if (sp.has_inf && std::isinf(v)) return uint8_t(sign | 0x7C);
    return uint8_t(sign | max_finite_code(f));
  }
  if (a == 0.0) return sign;

  const double min_normal = std::ldexp(1.0, 1 - sp.bias);
  if (a < min_normal) {
    // Subnormal grid with step 2^(1-bias-mbits). A value that rounds up to
    // 2^mbits steps lands exactly on the smallest normal, whose code is the
    // same integer, so no carry handling is needed.
    const double step = std::ldexp(1.0, 1 - sp.bias - mbits);
    return uint8_t(sign | uint8_t(std::nearbyint(a / step)));
  }

  int e = std::ilogb(a);
  double m = std::nearbyint(std::ldexp(a, mbits - e));  // in [2^mbits, 2^(mbits+1)]
  if (m >= std::ldexp(1.0, mbits + 1)) {
    m = std::ldexp(1.0, mbits);
    e += 1;
  }
  uint8_t mag = uint8_t(((e + sp.bias) << mbits) | (unsigned(m) - (1u << mbits)));
  return uint8_t(sign | mag);
}

double decode(uint8_t code, Format f) {
  if (f == Format::LOSSLESS) {
    throw ContractError("LOSSLESS is a bypass format and has no 8-bit codes");
  }
  const FormatSpec& sp = spec_of(f);
  const int mbits = sp.man_bits;
  const bool neg = (code & 0x80) != 0;
  const int field = (code >> mbits) & ((1 << sp.exp_bits) - 1);
  const int mant = code & ((1 << mbits) - 1);
  const int max_field = (1 << sp.exp_bits) - 1;

  if (f == Format::E4M3) {
    if (field == max_field && mant == (1 << mbits) - 1) {
      return std::copysign(std::numeric_limits<double>::quiet_NaN(), neg ? -1.0 : 1.0);
    }
  } else {
    if (field == max_field) {
      if (mant == 0) {
        return neg ? -std::numeric_limits<double>::infinity()
                   : std::numeric_limits<double>::infinity();
      }
      uint64_t bits = 0x7FF8000000000000ull | uint64_t(mant);
      if (neg) bits |= 0x8000000000000000ull;
      double nan;
      std::memcpy(&nan, &bits, sizeof nan);
      return nan;
    }
  }

  double val;
  if (field == 0) {
    val = double(mant) * std::ldexp(1.0, 1 - sp.bias - mbits);
  } else {
    val = (1.0 + double(mant) / double(1 << mbits)) * std::ldexp(1.0, field - sp.bias);
  }
  return neg ? -val : val;
}

// ----------------------------- amax history -----------------------------

AmaxHistory::AmaxHistory(size_t capacity) : buf_(capacity ? capacity : 1, 0.0) {}

void AmaxHistory::push(double amax) {
  buf_[head_] = amax;
  head_ = (head_ + 1) % buf_.size();
  if (count_ < buf_.size()) ++count_;
}

double AmaxHistory::max() const {
  double m = 0.0;
  for (size_t i = 0; i < count_; ++i) {
    size_t idx = (head_ + buf_.size() - 1 - i) % buf_.size();
    m = std::max(m, buf_[idx]);
  }
  return m;
}

std::vector<double> AmaxHistory::snapshot() const {
  std::vector<double> out(count_);
  for (size_t i = 0; i < count_; ++i) {
    out[i] = buf_[(head_ + buf_.size() - count_ + i) % buf_.size()];
  }
  return out;
}

double compute_delayed_scale(const ScalingState& st, Format f) {
  if (f == Format::LOSSLESS) return 1.0;
  if (st.hist.empty()) return 1.0;
  const double denom = st.hist.max() * std::ldexp(1.0, st.margin);
  const double s = spec_of(f).max_finite / denom;  // denom 0 -> inf, clamped below
  const double lo = std::ldexp(1.0, -40);
  const double hi = std::ldexp(1.0, 40);
  return std::clamp(s, lo, hi);
}

// ----------------------------- quantization -----------------------------

void Fp8Tensor::dequant_into(float* out) const {
  if (format == Format::LOSSLESS) {
    std::memcpy(out, passthrough.data(), passthrough.size() * sizeof(float));
    return;
  }
  const double inv = 1.0 / scale;
  for (size_t i = 0; i < codes.size(); ++i) {
    out[i] = float(decode(codes[i], format) * inv);
  }
}

std::vector<float> Fp8Tensor::dequant() const {
  std::vector<float> out(numel());
  dequant_into(out.data());
  return out;
}

Fp8Tensor fp8_quantize_tensor(const float* x, const Shape& shape, ScalingState& st, Format f,
                              Overflow mode, double* amax_out) {
  const size_t n = numel(shape);
  Fp8Tensor out;
  out.format = f;
  out.shape = shape;

  double amax = 0.0;
  for (size_t i = 0; i < n; ++i) {
    if (!std::isfinite(x[i])) {
      throw NumericError(strf("non-finite value at flat index %zu fed to fp8 quantization", i));
    }
    amax = std::max(amax, double(std::fabs(x[i])));
  }

  if (f == Format::LOSSLESS) {
    out.scale = 1.0;
    out.passthrough.assign(x, x + n);
    st.hist.push(amax);
    if (amax_out) *amax_out = amax;
    return out;
  }

  // Delayed scaling: the scale comes from history *before* this tensor's own
  // amax is recorded, so step t never peeks at its own statistics.
  const double scale = compute_delayed_scale(st, f);
  out.scale = scale;
  out.codes.resize(n);
  const double maxf = spec_of(f).max_finite;
  for (size_t i = 0; i < n; ++i) {
    const double xs = double(x[i]) * scale;
    if (std::fabs(xs) > maxf) {
      ++out.saturated;
      out.codes[i] = mode == Overflow::STRICT ? nan_code(f, std::signbit(xs)) : encode(xs, f);
    } else {
      out.codes[i] = encode(xs, f);
    }
  }
  st.hist.push(amax);
  if (amax_out) *amax_out = amax;
  return out;
}

// ----------------------------- graph ops -----------------------------

Tensor<float> fp8_linear(const Tensor<float>& x, const Tensor<float>& W,
                         const Tensor<float>& bias, LinearFp8States& st, Fp8RunCtx& ctx,
                         const std::string& site) {
  if (x.rank() != 2 || W.rank() != 2) {
    throw DimError(strf("fp8_linear expects rank-2 operands, got %s and %s",
                        shape_str(x.shape()).c_str(), shape_str(W.shape()).c_str()));
  }
  const size_t rows = x.dim(0);
  const size_t din = x.dim(1);
  const size_t dout = W.dim(0);
  if (W.dim(1) != din) {
    throw DimError(strf("fp8_linear shape mismatch: x %s vs W %s", shape_str(x.shape()).c_str(),
                        shape_str(W.shape()).c_str()));
  }
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != dout)) {
    throw DimError(strf("fp8_linear bias must be [%zu], got %s", dout,
                        shape_str(bias.shape()).c_str()));
  }

  const Format ff = ctx.eff_fwd();
  double ax = 0.0, aw = 0.0;
  Fp8Tensor qx = fp8_quantize_tensor(x.data().data(), x.shape(), st.x, ff, ctx.overflow, &ax);
  emit_event(ctx, site, "x", qx, ax);
  strict_check(ctx, site, "x", qx, ax);
  Fp8Tensor qw = fp8_quantize_tensor(W.data().data(), W.shape(), st.w, ff, ctx.overflow, &aw);
  emit_event(ctx, site, "w", qw, aw);
  strict_check(ctx, site, "w", qw, aw);

  // Dequantized operands are shared with the backward closure: gradients are
  // computed against what the matmul actually consumed, not the crisp
  // originals.
  auto xdq = std::make_shared<std::vector<float>>(qx.dequant());
  auto wdq = std::make_shared<std::vector<float>>(qw.dequant());

  Tensor<float> y = Tensor<float>::zeros({rows, dout});
  kern_nt(xdq->data(), wdq->data(), y.mut_data().data(), rows, din, dout, false);
  if (has_bias) {
    float* yp = y.mut_data().data();
    const float* bp = bias.data().data();
    for (size_t i = 0; i < rows; ++i) {
      for (size_t j = 0; j < dout; ++j) yp[i * dout + j] += bp[j];
    }
  }

  auto yn = y.node();
  const bool rg =
      x.requires_grad() || W.requires_grad() || (has_bias && bias.requires_grad());
  yn->requires_grad = rg;
  if (!rg) return y;

  yn->parents = {x.node(), W.node()};
  if (has_bias) yn->parents.push_back(bias.node());
  Node<float>* self = yn.get();
  auto xn = x.node();
  auto wn = W.node();
  auto bn = has_bias ? bias.node() : nullptr;
  LinearFp8States* stp = &st;
  Fp8RunCtx* ctxp = &ctx;
  std::string site_copy = site;
  yn->back = [self, xn, wn, bn, xdq, wdq, stp, ctxp, site_copy, rows, din, dout]() {
    double ag = 0.0;
    Fp8Tensor qg = fp8_quantize_tensor(self->grad.data(), self->shape, stp->g,
                                       ctxp->eff_grad(), ctxp->overflow, &ag);
    emit_event(*ctxp, site_copy, "grad", qg, ag);
    strict_check(*ctxp, site_copy, "grad", qg, ag);
    std::vector<float> gdq = qg.dequant();
    if (xn->requires_grad) {
      xn->ensure_grad();
      kern_nn(gdq.data(), wdq->data(), xn->grad.data(), rows, dout, din, true);
    }
    if (wn->requires_grad) {
      wn->ensure_grad();
      kern_tn(gdq.data(), xdq->data(), wn->grad.data(), rows, dout, din, true);
    }
    if (bn && bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < rows; ++i) {
        for (size_t j = 0; j < dout; ++j) bn->grad[j] += gdq[i * dout + j];
      }
    }
  };
  return y;
}

Tensor<float> fp8_qdq_ste(const Tensor<float>& t, ScalingState& st, Format f, Fp8RunCtx& ctx,
                          const std::string& site, const char* role) {
  double amax = 0.0;
  Fp8Tensor q = fp8_quantize_tensor(t.data().data(), t.shape(), st, f, ctx.overflow, &amax);
  emit_event(ctx, site, role, q, amax);
  strict_check(ctx, site, role, q, amax);

  Tensor<float> y = Tensor<float>::zeros(t.shape());
  q.dequant_into(y.mut_data().data());
  auto yn = y.node();
  yn->requires_grad = t.requires_grad();
  if (!yn->requires_grad) return y;

  yn->parents = {t.node()};
  Node<float>* self = yn.get();
  auto tn = t.node();
  yn->back = [self, tn]() {
    // Straight-through: the quantizer is treated as identity for gradients.
    tn->ensure_grad();
    const size_t n = self->grad.size();
    for (size_t i = 0; i < n; ++i) tn->grad[i] += self->grad[i];
  };
  return y;
}

}  // namespace tweo::fp8
