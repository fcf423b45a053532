#pragma once

#include <functional>
#include <string>
#include <vector>

#include "tweo/tensor.hpp"

namespace tweo::fp8 {

// E4M3 carries no infinities: the all-ones exponent with mantissa 111 is NaN
// and everything else in that exponent row is a normal value, so the top
// finite magnitude is 448. E5M2 keeps the IEEE special-value layout and tops
// out at 57344. LOSSLESS is a test-only bypass whose quantization is the
// identity; it exists to separate codec effects from plumbing bugs.
enum class Format { E4M3, E5M2, LOSSLESS };

struct FormatSpec {
  const char* name;
  int exp_bits;
  int man_bits;
  int bias;
  double max_finite;
  bool has_inf;
};

const FormatSpec& spec_of(Format f);
Format format_from_name(const std::string& name);

// Round-to-nearest-even onto the format's value grid. Finite magnitudes
// beyond max_finite saturate to max_finite (E4M3 also saturates +-Inf, since
// it has no Inf codes; E5M2 maps +-Inf to its Inf codes). NaN keeps its sign
// bit, and for E5M2 the two NaN mantissa bits ride along in the double's
// payload so that decode -> encode reproduces the exact code.
uint8_t encode(double v, Format f);
double decode(uint8_t code, Format f);

enum class Overflow { SATURATE, STRICT };
Overflow overflow_from_name(const std::string& name);

// Fixed-capacity ring of recent per-step amax observations.
class AmaxHistory {
 public:
  explicit AmaxHistory(size_t capacity = 16);
  void push(double amax);  // evicts the oldest once full
  double max() const;      // 0 when empty
  bool empty() const { return count_ == 0; }
  size_t size() const { return count_; }
  size_t capacity() const { return buf_.size(); }
  std::vector<double> snapshot() const;  // oldest to newest

 private:
  std::vector<double> buf_;
  size_t head_ = 0;  // next write position
  size_t count_ = 0;
};

struct ScalingState {
  AmaxHistory hist;
  int margin = 0;  // powers of two of extra headroom
  explicit ScalingState(size_t history_len = 16, int margin_ = 0)
      : hist(history_len), margin(margin_) {}
};

// scale = max_finite / (max(history) * 2^margin); empty history gives 1.
// The result is clamped into [2^-40, 2^40] so an all-zero history cannot
// produce an infinite scale.
double compute_delayed_scale(const ScalingState& st, Format f);

struct Fp8Tensor {
  Format format = Format::E4M3;
  double scale = 1.0;
  Shape shape;
  std::vector<uint8_t> codes;
  std::vector<float> passthrough;  // LOSSLESS only
  size_t saturated = 0;            // elements with |x*scale| beyond max finite

  size_t numel() const { return format == Format::LOSSLESS ? passthrough.size() : codes.size(); }
  void dequant_into(float* out) const;  // decode(code)/scale
  std::vector<float> dequant() const;
};

/**
 * Quantizes x against the delayed scale computed from the *pre-update*
 * history, then records amax(x) into the history. The scale used at step t
 * therefore never depends on step t's own data. In STRICT mode saturated
 * elements become NaN codes (the caller decides whether that also aborts the
 * run); in SATURATE mode they clip to max finite. Inputs must be finite.
 */
Fp8Tensor fp8_quantize_tensor(const float* x, const Shape& shape, ScalingState& st, Format f,
                              Overflow mode, double* amax_out = nullptr);

struct QuantEvent {
  size_t step = 0;
  std::string site;
  const char* role = "";  // "x", "w", "grad", "ln_in", "ln_gain", "ln_bias"
  Format format = Format::E4M3;
  double scale = 1.0;
  double amax = 0.0;
  size_t saturated = 0;
};

struct LinearFp8States {
  ScalingState x, w, g;
  LinearFp8States() = default;
  LinearFp8States(size_t history_len, int margin, int grad_margin)
      : x(history_len, margin), w(history_len, margin), g(history_len, grad_margin) {}
};

// Run-level emulated-precision settings as they appear in config files.
struct Fp8Config {
  bool enabled = false;
  Format fwd_format = Format::E4M3;
  Format grad_format = Format::E5M2;
  Overflow overflow = Overflow::SATURATE;
  int margin = 0;       // forward tensors (activations, weights, LN inputs)
  int grad_margin = 0;  // backward gradients
  size_t history = 16;
  bool lossless = false;
};

// Per-run knobs threaded through the emulated-precision forward/backward.
struct Fp8RunCtx {
  Format fwd_format = Format::E4M3;
  Format grad_format = Format::E5M2;  // HYBRID convention
  Overflow overflow = Overflow::SATURATE;
  bool lossless = false;  // force the bypass format everywhere (tests)
  size_t step = 0;
  std::function<void(const QuantEvent&)> on_event;  // optional telemetry sink
  size_t sat_total = 0;  // accumulated saturation count for the current step

  Format eff_fwd() const { return lossless ? Format::LOSSLESS : fwd_format; }
  Format eff_grad() const { return lossless ? Format::LOSSLESS : grad_format; }
};

/**
 * y = dequant(q(x)) * dequant(q(W))^T + bias, with 32-bit accumulation.
 * x is [n,din], W is [dout,din], bias is [dout] (may be undefined).
 * Backward quantizes the incoming gradient to the gradient format through
 * st.g before the two gradient matmuls; parameter gradients land on the
 * original full-precision tensors (straight-through). In STRICT mode any
 * saturation raises CollapseSignal carrying (step, site, amax).
 */
Tensor<float> fp8_linear(const Tensor<float>& x, const Tensor<float>& W,
                         const Tensor<float>& bias, LinearFp8States& st, Fp8RunCtx& ctx,
                         const std::string& site);

// Quantize-dequantize with a straight-through gradient; used for the
// layer-norm input and affine parameters on the emulated-precision path.
Tensor<float> fp8_qdq_ste(const Tensor<float>& t, ScalingState& st, Format f, Fp8RunCtx& ctx,
                          const std::string& site, const char* role);

}  // namespace tweo::fp8
