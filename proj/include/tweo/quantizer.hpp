#pragma once

#include <map>
#include <string>
#include <vector>

#include "tweo/model.hpp"
#include "tweo/tensor.hpp"

namespace tweo {

// Granularity taxonomy: per-tensor (T), per-channel (C, weight rows only),
// per-token (K, activation rows only, scales computed on the fly).
enum class QuantGran { PER_TENSOR, PER_CHANNEL, PER_TOKEN };
enum class QuantRole { WEIGHT, ACTIVATION };

char gran_letter(QuantGran g);
QuantGran gran_from_letter(char c);

// Quantization integer ceiling for b bits.
int qmax_of(int bits);

constexpr double kQuantEps = 1e-6;  // scale floor; also the all-zero guard

struct QuantScheme {
  int w_bits = 8;  // 4, 6, 8, or 32 for bypass
  QuantGran w_gran = QuantGran::PER_TENSOR;
  int a_bits = 8;
  QuantGran a_gran = QuantGran::PER_TENSOR;
  bool quantize_residual = false;

  void validate() const;
  std::string name() const;  // canonical W{b}({g})A{b}({g}) form
};

// Accepts both "W8TA8T" and "W8(T)A8(T)"; "W32A32" is the bypass scheme.
QuantScheme scheme_from_name(const std::string& text);

// Widened integer codes plus the scales that produced them. C and K both
// mean one scale per row of a rank-2 tensor; the role gate is what differs.
struct Quantized {
  Shape shape;
  std::vector<int32_t> q;
  std::vector<double> scales;
  int bits = 8;
  QuantGran gran = QuantGran::PER_TENSOR;
};

/**
 * s = amax(+eps), codes = round(x/s * Q_b) with half-away-from-zero rounding,
 * clamped into [-Q_b, Q_b]. given_scale (per-tensor only) substitutes a
 * calibrated scale for the data-derived one; values beyond it clip.
 */
Quantized absmax_quantize(const float* x, const Shape& shape, int bits, QuantGran gran,
                          QuantRole role, const double* given_scale = nullptr);

void absmax_dequantize(const Quantized& qt, float* out);
std::vector<float> absmax_dequantize(const Quantized& qt);

// ----------------------------- calibration -----------------------------

struct SiteCalibration {
  double amax = 0.0;
  std::vector<double> channel_amax;  // per input channel, for smoothing
  size_t batches = 0;
};

struct CalibrationStats {
  std::map<std::string, SiteCalibration> sites;
  size_t batches = 0;
};

// Full-precision forward passes over the calibration batches, recording
// running per-site and per-channel absolute maxima at every activation site
// (and at the residual sites when the scheme quantizes the stream).
CalibrationStats calibrate_static(const ModelWeights<float>& w, const QuantScheme& scheme,
                                  const std::vector<Batch>& calib);

// ----------------------------- evaluation -----------------------------

struct SiteError {
  double mse = 0.0;    // mean squared quantize-dequantize error at the site
  double amax = 0.0;   // largest magnitude observed during eval
  double scale = 0.0;  // static scale when one was used, else 0
  size_t elems = 0;
};

struct QuantEvalResult {
  double mean_nll = 0.0;
  double ppl = 0.0;
  size_t tokens = 0;
  std::map<std::string, SiteError> site_errors;  // activation + residual sites
  std::map<std::string, SiteError> weight_errors;
  size_t sites_per_forward = 0;
};

struct QuantEvalOptions {
  const CalibrationStats* stats = nullptr;  // required for static (T) activations
  // Smoothing divisors per site; activations are divided channelwise before
  // measurement and quantization (weights must already carry the inverse).
  const std::map<std::string, std::vector<double>>* act_divisors = nullptr;
};

/**
 * Quantize-dequantizes linear weights once up front, then evaluates with
 * activations quantize-dequantized in place at each site (static scales for
 * per-tensor, dynamic per-token for K; the residual stream once per block
 * boundary when enabled). 32-bit halves bypass their side entirely, so
 * W32A32 reproduces the full-precision metric bit for bit.
 */
QuantEvalResult fake_quant_eval(const ModelWeights<float>& w, const QuantScheme& scheme,
                                const std::vector<Batch>& eval_data,
                                const QuantEvalOptions& opts = {});

// ----------------------------- smoothing -----------------------------

struct SmoothResult {
  ModelWeights<float> w;  // rescaled copy
  std::map<std::string, std::vector<double>> act_divisors;
};

/**
 * Per input channel j of each linear fed by a calibrated site:
 * s_j = amax_act(j)^alpha / amax_w(j)^(1-alpha). Weight columns are
 * multiplied by s_j offline and activations divided by s_j at eval time, so
 * the pre-quantization product is algebraically unchanged. Channels with a
 * zero amax on either side keep s_j = 1.
 */
SmoothResult smooth_offline(const ModelWeights<float>& w, const CalibrationStats& stats,
                            double alpha);

}  // namespace tweo
