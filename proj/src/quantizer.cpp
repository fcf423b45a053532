#include "tweo/quantizer.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>

#include "tweo/ops.hpp"

namespace tweo {

char gran_letter(QuantGran g) {
  switch (g) {
    case QuantGran::PER_TENSOR: return 'T';
    case QuantGran::PER_CHANNEL: return 'C';
    case QuantGran::PER_TOKEN: return 'K';
  }
  return '?';
}

QuantGran gran_from_letter(char c) {
  switch (std::toupper(static_cast<unsigned char>(c))) {
    case 'T': return QuantGran::PER_TENSOR;
    case 'C': return QuantGran::PER_CHANNEL;
    case 'K': return QuantGran::PER_TOKEN;
    default: break;
  }
  throw ContractError(strf("unknown quantization granularity '%c' (use T, C, or K)", c));
}

int qmax_of(int bits) {
  if (bits < 2 || bits > 30)
    throw ContractError(strf("quantization width %d out of range [2, 30]", bits));
  return (1 << (bits - 1)) - 1;
}

static void check_bits(int bits, const char* side) {
  if (bits != 4 && bits != 6 && bits != 8 && bits != 32)
    throw ContractError(strf("%s width %d unsupported (use 4, 6, 8, or 32 for bypass)", side, bits));
}

void QuantScheme::validate() const {
  check_bits(w_bits, "weight");
  check_bits(a_bits, "activation");
  if (w_gran == QuantGran::PER_TOKEN)
    throw ContractError("per-token granularity is for activations; weights take T or C");
  if (a_gran == QuantGran::PER_CHANNEL)
    throw ContractError("per-channel granularity is for weights; activations take T or K");
  if (w_bits == 32 && w_gran != QuantGran::PER_TENSOR)
    throw ContractError("32-bit weight bypass has no granularity; use T");
  if (a_bits == 32 && a_gran != QuantGran::PER_TENSOR)
    throw ContractError("32-bit activation bypass has no granularity; use T");
}

std::string QuantScheme::name() const {
  std::string s = strf("W%d(%c)A%d(%c)", w_bits, gran_letter(w_gran), a_bits, gran_letter(a_gran));
  if (quantize_residual) s += "+R";
  return s;
}

QuantScheme scheme_from_name(const std::string& text) {
  QuantScheme sc;
  size_t i = 0;
  auto fail = [&]() -> ContractError {
    return ContractError(strf("cannot parse scheme '%s' (expected e.g. W8(T)A8(K) or W4CA8T, "
                              "optionally +R for residual quantization)",
                              text.c_str()));
  };
  auto want = [&](char c) {
    if (i >= text.size() || std::toupper(static_cast<unsigned char>(text[i])) != c) throw fail();
    ++i;
  };
  auto read_int = [&]() {
    size_t j = i;
    while (j < text.size() && std::isdigit(static_cast<unsigned char>(text[j]))) ++j;
    if (j == i) throw fail();
    int v = std::stoi(text.substr(i, j - i));
    i = j;
    return v;
  };
  auto read_gran = [&](QuantGran dflt) {
    if (i < text.size() && text[i] == '(') {
      if (i + 2 >= text.size() || text[i + 2] != ')') throw fail();
      QuantGran g = gran_from_letter(text[i + 1]);
      i += 3;
      return g;
    }
    if (i < text.size() && std::strchr("TCKtck", text[i])) return gran_from_letter(text[i++]);
    return dflt;
  };

  want('W');
  sc.w_bits = read_int();
  sc.w_gran = read_gran(QuantGran::PER_TENSOR);
  want('A');
  sc.a_bits = read_int();
  sc.a_gran = read_gran(QuantGran::PER_TENSOR);
  if (i < text.size() && text[i] == '+') {
    std::string tail = text.substr(i + 1);
    std::transform(tail.begin(), tail.end(), tail.begin(),
                   [](unsigned char c) { return std::tolower(c); });
    if (tail != "r" && tail != "resid" && tail != "residual") throw fail();
    sc.quantize_residual = true;
    i = text.size();
  }
  if (i != text.size()) throw fail();
  sc.validate();
  return sc;
}

// ----------------------------- core quantizer -----------------------------

Quantized absmax_quantize(const float* x, const Shape& shape, int bits, QuantGran gran,
                          QuantRole role, const double* given_scale) {
  if (bits == 32) throw ContractError("32-bit bypass never reaches the quantizer");
  check_bits(bits, "quantizer");
  if (gran == QuantGran::PER_CHANNEL && role != QuantRole::WEIGHT)
    throw ContractError("per-channel quantization applies to weights only");
  if (gran == QuantGran::PER_TOKEN && role != QuantRole::ACTIVATION)
    throw ContractError("per-token quantization applies to activations only");
  if (gran != QuantGran::PER_TENSOR && shape.size() != 2)
    throw DimError(strf("row-wise quantization needs a rank-2 tensor, got %s",
                        shape_str(shape).c_str()));
  if (given_scale) {
    if (gran != QuantGran::PER_TENSOR)
      throw ContractError("calibrated scales are per-tensor; rowwise modes derive their own");
    if (!(*given_scale > 0.0) || !std::isfinite(*given_scale))
      throw ContractError(strf("calibrated scale must be a positive finite value, got %g",
                               *given_scale));
  }

  const size_t n = numel(shape);
  if (n == 0) throw DimError("cannot quantize an empty tensor");
  for (size_t idx = 0; idx < n; ++idx)
    if (!std::isfinite(x[idx]))
      throw NumericError(strf("non-finite value at flat index %zu entering quantizer", idx));

  const int qb = qmax_of(bits);
  const size_t rows = gran == QuantGran::PER_TENSOR ? 1 : shape[0];
  const size_t cols = n / rows;

  Quantized out;
  out.shape = shape;
  out.bits = bits;
  out.gran = gran;
  out.q.resize(n);
  out.scales.resize(rows);

  for (size_t r = 0; r < rows; ++r) {
    const float* seg = x + r * cols;
    double s;
    if (given_scale) {
      s = *given_scale;
    } else {
      double amax = 0.0;
      for (size_t j = 0; j < cols; ++j) amax = std::max(amax, std::abs(double(seg[j])));
      s = amax + kQuantEps;  // the epsilon keeps all-zero rows well defined
    }
    out.scales[r] = s;
    for (size_t j = 0; j < cols; ++j) {
      // std::round is half-away-from-zero, matching the codebook definition.
      double code = std::round(double(seg[j]) / s * qb);
      code = std::min(std::max(code, double(-qb)), double(qb));
      out.q[r * cols + j] = static_cast<int32_t>(code);
    }
  }
  return out;
}

void absmax_dequantize(const Quantized& qt, float* out) {
  const size_t n = numel(qt.shape);
  if (qt.q.size() != n || qt.scales.empty())
    throw DimError("quantized payload does not match its shape");
  const int qb = qmax_of(qt.bits);
  const size_t rows = qt.scales.size();
  const size_t cols = n / rows;
  for (size_t r = 0; r < rows; ++r) {
    const double s = qt.scales[r];
    for (size_t j = 0; j < cols; ++j)
      out[r * cols + j] = static_cast<float>(double(qt.q[r * cols + j]) / double(qb) * s);
  }
}

std::vector<float> absmax_dequantize(const Quantized& qt) {
  std::vector<float> out(numel(qt.shape));
  absmax_dequantize(qt, out.data());
  return out;
}

// ----------------------------- shared helpers -----------------------------

static ModelWeights<float> clone_weights(const ModelWeights<float>& src) {
  ModelWeights<float> dst = make_weights<float>(src.cfg);
  auto sn = src.named();
  auto dn = dst.named();
  for (size_t i = 0; i < sn.size(); ++i) dn[i].second.mut_data() = sn[i].second.data();
  return dst;
}

// The stream-width sites and what they feed; residual sites feed no single
// linear and are never smoothed.
struct SiteConsumers {
  std::string site;
  std::vector<Tensor<float>*> weights;  // columns indexed by the site's channels
};

static std::vector<SiteConsumers> site_consumer_map(ModelWeights<float>& w) {
  std::vector<SiteConsumers> m;
  for (size_t l = 0; l < w.cfg.n_layers; ++l) {
    BlockWeights<float>& b = w.blocks[l];
    m.push_back({strf("layer%zu.attn_in", l), {&b.qkv_w}});
    m.push_back({strf("layer%zu.attn_ctx", l), {&b.out_w}});
    if (w.cfg.mlp == MlpKind::GLU)
      m.push_back({strf("layer%zu.mlp_in", l), {&b.up_w, &b.gate_w}});
    else
      m.push_back({strf("layer%zu.mlp_in", l), {&b.up_w}});
    m.push_back({strf("layer%zu.mlp_act", l), {&b.down_w}});
  }
  m.push_back({"lm_in", {&w.head_w}});
  return m;
}

static std::vector<Tensor<float>*> linear_weights(ModelWeights<float>& w) {
  std::vector<Tensor<float>*> v;
  for (auto& b : w.blocks) {
    v.push_back(&b.qkv_w);
    v.push_back(&b.out_w);
    v.push_back(&b.up_w);
    if (w.cfg.mlp == MlpKind::GLU) v.push_back(&b.gate_w);
    v.push_back(&b.down_w);
  }
  v.push_back(&w.head_w);
  return v;
}

static std::string weight_name_of(const ModelWeights<float>& w, const Tensor<float>* t) {
  for (const auto& [name, tensor] : w.named())
    if (tensor.node().get() == t->node().get()) return name;
  return "?";
}

// ----------------------------- calibration -----------------------------

CalibrationStats calibrate_static(const ModelWeights<float>& w, const QuantScheme& scheme,
                                  const std::vector<Batch>& calib) {
  scheme.validate();
  if (scheme.a_gran != QuantGran::PER_TENSOR)
    throw ContractError("static calibration is for per-tensor activations; "
                        "per-token scales are computed at eval time");
  if (calib.empty()) throw ContractError("calibration needs at least one batch");

  CalibrationStats stats;
  auto record = [&stats](const std::string& site, const float* p, size_t rows, size_t d) {
    SiteCalibration& sc = stats.sites[site];
    if (sc.channel_amax.size() != d) sc.channel_amax.assign(d, 0.0);
    for (size_t r = 0; r < rows; ++r)
      for (size_t j = 0; j < d; ++j) {
        double a = std::abs(double(p[r * d + j]));
        if (a > sc.channel_amax[j]) sc.channel_amax[j] = a;
      }
    for (double a : sc.channel_amax) sc.amax = std::max(sc.amax, a);
    sc.batches += 1;
  };

  ForwardHooks hooks;
  hooks.at_activation = [&record](const std::string& site, float* p, size_t rows, size_t d) {
    record(site, p, rows, d);
  };
  if (scheme.quantize_residual)
    hooks.at_residual = [&record](const std::string& site, float* p, size_t rows, size_t d) {
      record(site, p, rows, d);
    };

  ForwardOpts<float> opts;
  opts.hooks = &hooks;
  for (const Batch& b : calib) {
    Batch probe = b;
    probe.y.clear();  // amax collection has no use for the loss
    forward(w, probe, opts);
    stats.batches += 1;
  }
  return stats;
}

// ----------------------------- evaluation -----------------------------

QuantEvalResult fake_quant_eval(const ModelWeights<float>& w, const QuantScheme& scheme,
                                const std::vector<Batch>& eval_data,
                                const QuantEvalOptions& opts) {
  scheme.validate();
  if (eval_data.empty()) throw ContractError("quantized eval needs at least one batch");

  ModelWeights<float> wq = clone_weights(w);
  QuantEvalResult out;

  if (scheme.w_bits != 32) {
    for (Tensor<float>* t : linear_weights(wq)) {
      std::vector<float> before = t->data();
      Quantized q = absmax_quantize(before.data(), t->shape(), scheme.w_bits, scheme.w_gran,
                                    QuantRole::WEIGHT);
      absmax_dequantize(q, t->mut_data().data());
      SiteError& we = out.weight_errors[weight_name_of(wq, t)];
      const std::vector<float>& after = t->data();
      double ss = 0.0;
      for (size_t i = 0; i < before.size(); ++i) {
        double d = double(before[i]) - double(after[i]);
        ss += d * d;
        we.amax = std::max(we.amax, std::abs(double(before[i])));
      }
      we.elems = before.size();
      we.mse = ss / double(before.size());
      if (scheme.w_gran == QuantGran::PER_TENSOR) we.scale = q.scales[0];
    }
  }

  const bool act_on = scheme.a_bits != 32;
  const bool resid_on = act_on && scheme.quantize_residual;

  // Static per-tensor activations run on calibrated scales; a site the
  // calibrator never saw is a setup bug, not something to paper over.
  std::map<std::string, double> static_scale;
  if (act_on && scheme.a_gran == QuantGran::PER_TENSOR) {
    if (!opts.stats)
      throw ContractError("per-tensor activation eval needs calibration stats (run calibrate first)");
    std::vector<std::string> needed = activation_sites(w.cfg);
    if (resid_on)
      for (const std::string& s : residual_sites(w.cfg)) needed.push_back(s);
    for (const std::string& site : needed) {
      auto it = opts.stats->sites.find(site);
      if (it == opts.stats->sites.end())
        throw ContractError(strf("no calibration recorded for site %s", site.c_str()));
      static_scale[site] = it->second.amax + kQuantEps;
    }
  }

  std::map<std::string, double> sqsum;
  std::vector<float> scratch;

  auto apply_divisors = [&](const std::string& site, float* p, size_t rows, size_t d) {
    if (!opts.act_divisors) return;
    auto it = opts.act_divisors->find(site);
    if (it == opts.act_divisors->end()) return;
    const std::vector<double>& div = it->second;
    if (div.size() != d)
      throw DimError(strf("smoothing divisors for %s have %zu channels, site has %zu",
                          site.c_str(), div.size(), d));
    for (size_t r = 0; r < rows; ++r)
      for (size_t j = 0; j < d; ++j)
        p[r * d + j] = static_cast<float>(double(p[r * d + j]) / div[j]);
  };

  auto qdq_site = [&](const std::string& site, float* p, size_t rows, size_t d) {
    SiteError& se = out.site_errors[site];
    const size_t n = rows * d;
    se.amax = std::max(se.amax, amax_abs(p, n));
    scratch.assign(p, p + n);
    Quantized q;
    if (scheme.a_gran == QuantGran::PER_TENSOR) {
      const double s = static_scale.at(site);
      se.scale = s;
      q = absmax_quantize(p, {rows, d}, scheme.a_bits, QuantGran::PER_TENSOR,
                          QuantRole::ACTIVATION, &s);
    } else {
      q = absmax_quantize(p, {rows, d}, scheme.a_bits, QuantGran::PER_TOKEN,
                          QuantRole::ACTIVATION);
    }
    absmax_dequantize(q, p);
    double ss = 0.0;
    for (size_t i = 0; i < n; ++i) {
      double df = double(scratch[i]) - double(p[i]);
      ss += df * df;
    }
    sqsum[site] += ss;
    se.elems += n;
  };

  ForwardHooks hooks;
  const bool need_act_hook = act_on || opts.act_divisors != nullptr;
  if (need_act_hook)
    hooks.at_activation = [&](const std::string& site, float* p, size_t rows, size_t d) {
      apply_divisors(site, p, rows, d);
      if (act_on) qdq_site(site, p, rows, d);
    };
  if (resid_on)
    hooks.at_residual = [&](const std::string& site, float* p, size_t rows, size_t d) {
      qdq_site(site, p, rows, d);
    };

  // With no hooks installed this is exactly the plain eval path, which is
  // what makes the 32-bit bypass bit-identical.
  const bool any_hook = need_act_hook || resid_on;
  EvalResult er = evaluate(wq, eval_data, any_hook ? &hooks : nullptr);
  out.mean_nll = er.mean_nll;
  out.ppl = er.ppl;
  out.tokens = er.tokens;

  for (auto& [site, se] : out.site_errors)
    if (se.elems > 0) se.mse = sqsum[site] / double(se.elems);
  out.sites_per_forward = (act_on ? activation_sites(w.cfg).size() : 0) +
                          (resid_on ? residual_sites(w.cfg).size() : 0);
  return out;
}

// ----------------------------- smoothing -----------------------------

SmoothResult smooth_offline(const ModelWeights<float>& w, const CalibrationStats& stats,
                            double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0))
    throw ContractError(strf("smoothing alpha must lie in [0, 1], got %g", alpha));

  SmoothResult res;
  res.w = clone_weights(w);

  for (SiteConsumers& sc : site_consumer_map(res.w)) {
    auto it = stats.sites.find(sc.site);
    if (it == stats.sites.end())
      throw ContractError(strf("no calibration channel stats for site %s", sc.site.c_str()));
    const std::vector<double>& act_amax = it->second.channel_amax;
    const size_t d = act_amax.size();

    // Per input channel, the largest weight magnitude across every consumer
    // of this site (GLU's up and gate projections share their input).
    std::vector<double> w_amax(d, 0.0);
    for (Tensor<float>* t : sc.weights) {
      if (t->rank() != 2 || t->dim(1) != d)
        throw DimError(strf("consumer of %s has shape %s, expected %zu input channels",
                            sc.site.c_str(), shape_str(t->shape()).c_str(), d));
      const std::vector<float>& vw = t->data();
      const size_t rows = t->dim(0);
      for (size_t i = 0; i < rows; ++i)
        for (size_t j = 0; j < d; ++j)
          w_amax[j] = std::max(w_amax[j], std::abs(double(vw[i * d + j])));
    }

    std::vector<double> s(d, 1.0);
    for (size_t j = 0; j < d; ++j) {
      if (act_amax[j] == 0.0 || w_amax[j] == 0.0) continue;  // dead channel, leave alone
      s[j] = std::pow(act_amax[j], alpha) / std::pow(w_amax[j], 1.0 - alpha);
      if (!std::isfinite(s[j]) || s[j] <= 0.0)
        throw NumericError(strf("smoothing scale for %s channel %zu degenerated to %g",
                                sc.site.c_str(), j, s[j]));
    }

    for (Tensor<float>* t : sc.weights) {
      std::vector<float>& vw = t->mut_data();
      const size_t rows = t->dim(0);
      for (size_t i = 0; i < rows; ++i)
        for (size_t j = 0; j < d; ++j)
          vw[i * d + j] = static_cast<float>(double(vw[i * d + j]) * s[j]);
    }
    res.act_divisors[sc.site] = std::move(s);
  }
  return res;
}

}  // namespace tweo
