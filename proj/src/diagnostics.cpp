#include "tweo/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tweo/common.hpp"
#include "tweo/ops.hpp"
#include "tweo/rng.hpp"
#include "tweo/svd.hpp"

namespace tweo {

// ----------------------------- outlier telemetry -----------------------------

namespace {

template <typename T>
LayerOutlierStats scan_impl(const T* p, size_t n) {
  if (n == 0) throw DimError("outlier scan over an empty tensor");
  double t1 = 0, t2 = 0, t3 = 0;
  std::vector<double> mags(n);
  for (size_t i = 0; i < n; ++i) {
    const double a = std::fabs(double(p[i]));
    mags[i] = a;
    if (a > t1) {
      t3 = t2;
      t2 = t1;
      t1 = a;
    } else if (a > t2) {
      t3 = t2;
      t2 = a;
    } else if (a > t3) {
      t3 = a;
    }
  }
  if (n == 1) t2 = t1;
  if (n <= 2) t3 = t2;
  std::nth_element(mags.begin(), mags.begin() + (n - 1) / 2, mags.end());
  LayerOutlierStats s;
  s.top1 = t1;
  s.top2 = t2;
  s.top3 = t3;
  s.median_abs = mags[(n - 1) / 2];
  return s;
}

}  // namespace

LayerOutlierStats scan_values(const float* p, size_t n) { return scan_impl(p, n); }
LayerOutlierStats scan_values(const double* p, size_t n) { return scan_impl(p, n); }

OutlierReport outlier_scan(const std::vector<Tensor<float>>& taps, size_t step) {
  OutlierReport r;
  r.step = step;
  for (const auto& tap : taps) {
    r.layers.push_back(scan_values(tap.data().data(), tap.numel()));
    r.global_peak = std::max(r.global_peak, r.layers.back().top1);
  }
  return r;
}

HistogramReport activation_histogram(const float* p, size_t n, size_t bins) {
  if (bins < 2) throw ContractError(strf("histogram needs at least 2 bins, got %zu", bins));
  if (n == 0) throw DimError("histogram over an empty tensor");
  double lo = double(p[0]), hi = double(p[0]), sum = 0, sum2 = 0;
  for (size_t i = 0; i < n; ++i) {
    const double v = double(p[i]);
    lo = std::min(lo, v);
    hi = std::max(hi, v);
    sum += v;
    sum2 += v * v;
  }
  HistogramReport r;
  r.n = n;
  r.lo = lo;
  r.hi = hi;
  r.mean = sum / double(n);
  r.stdev = std::sqrt(std::max(0.0, sum2 / double(n) - r.mean * r.mean));
  if (lo == hi) {
    r.edges = {lo, hi};
    r.counts = {n};
    return r;
  }
  r.edges.resize(bins + 1);
  for (size_t k = 0; k <= bins; ++k)
    r.edges[k] = lo + (hi - lo) * double(k) / double(bins);
  r.edges[bins] = hi;
  r.counts.assign(bins, 0);
  const double inv_width = double(bins) / (hi - lo);
  for (size_t i = 0; i < n; ++i) {
    size_t k = size_t((double(p[i]) - lo) * inv_width);
    if (k >= bins) k = bins - 1;  // the max lands in the last bin
    ++r.counts[k];
  }
  return r;
}

// ----------------------------- colinearity analyzer -----------------------------

ProbeActivation probe_activation_from_name(const std::string& name) {
  if (name == "identity" || name == "none") return ProbeActivation::IDENTITY;
  if (name == "gelu") return ProbeActivation::GELU;
  if (name == "silu") return ProbeActivation::SILU;
  throw ContractError(strf("unknown probe activation '%s'", name.c_str()));
}

const char* probe_activation_name(ProbeActivation a) {
  switch (a) {
    case ProbeActivation::IDENTITY: return "identity";
    case ProbeActivation::GELU: return "gelu";
    case ProbeActivation::SILU: return "silu";
  }
  return "?";
}

namespace {

double apply_act(double h, ProbeActivation a) {
  switch (a) {
    case ProbeActivation::IDENTITY: return h;
    case ProbeActivation::GELU: return gelu_scalar(h);
    case ProbeActivation::SILU: return silu_scalar(h);
  }
  return h;
}

// Per-probe precomputation shared by single-row analysis and row screening.
struct FactoredProbe {
  std::vector<double> vx;        // v_i . x
  std::vector<double> h_fact;    // pre-activations rebuilt from the factors
  std::vector<double> h_direct;  // A x, row-dot order identical to the forward kernels
};

FactoredProbe make_probe(const SvdResult& svd, const double* A, const double* x) {
  FactoredProbe p;
  p.vx.assign(svd.r, 0.0);
  for (size_t i = 0; i < svd.r; ++i) {
    double acc = 0.0;
    for (size_t j = 0; j < svd.n; ++j) acc += svd.V[j * svd.r + i] * x[j];
    p.vx[i] = acc;
  }
  p.h_fact.assign(svd.m, 0.0);
  for (size_t j = 0; j < svd.m; ++j) {
    double acc = 0.0;
    for (size_t i = 0; i < svd.r; ++i) acc += svd.S[i] * svd.U[j * svd.r + i] * p.vx[i];
    p.h_fact[j] = acc;
  }
  p.h_direct.assign(svd.m, 0.0);
  for (size_t j = 0; j < svd.m; ++j) {
    double acc = 0.0;
    for (size_t k = 0; k < svd.n; ++k) acc += A[j * svd.n + k] * x[k];
    p.h_direct[j] = acc;
  }
  return p;
}

ColinearityReport analyze_row(const SvdResult& svd, const FactoredProbe& p, const double* w,
                              ProbeActivation act, size_t budget) {
  ColinearityReport r;
  r.act = act;
  double abs_sum = 0.0;
  double best = 0.0;
  for (size_t i = 0; i < svd.r; ++i) {
    double wu = 0.0;
    for (size_t j = 0; j < svd.m; ++j) wu += w[j] * svd.U[j * svd.r + i];
    const double prod = svd.S[i] * wu * p.vx[i];
    if (i < budget) r.triples.push_back({svd.S[i], wu, p.vx[i], prod});
    r.sum_linear += prod;
    abs_sum += std::fabs(prod);
    if (std::fabs(prod) > std::fabs(best)) {
      best = prod;
      r.dominant_i = i;
    }
  }
  r.dominant = best;
  r.dominant_share = abs_sum > 0.0 ? std::fabs(best) / abs_sum : 0.0;
  for (size_t j = 0; j < svd.m; ++j) {
    r.direct_linear += w[j] * p.h_direct[j];
    r.sim_act += w[j] * apply_act(p.h_fact[j], act);
    r.true_act += w[j] * apply_act(p.h_direct[j], act);
  }
  const double dl = std::max(std::fabs(r.direct_linear), 1e-30);
  r.rel_err_linear = std::fabs(r.sum_linear - r.direct_linear) / dl;
  const double ta = std::max(std::fabs(r.true_act), 1e-30);
  r.rel_err_act = std::fabs(r.sim_act - r.true_act) / ta;
  return r;
}

}  // namespace

ColinearityReport svd_colinearity(const double* A, size_t d2, size_t d1, const double* w,
                                  const double* x, ProbeActivation act, size_t budget) {
  SvdResult svd = jacobi_svd(A, d2, d1);
  FactoredProbe p = make_probe(svd, A, x);
  return analyze_row(svd, p, w, act, budget);
}

std::vector<RowScreenEntry> screen_rows(const double* up, size_t d2, size_t d1,
                                        const double* down, size_t d1b, const double* x,
                                        ProbeActivation act) {
  SvdResult svd = jacobi_svd(up, d2, d1);
  FactoredProbe p = make_probe(svd, up, x);
  std::vector<RowScreenEntry> out(d1b);
  for (size_t row = 0; row < d1b; ++row) {
    ColinearityReport r = analyze_row(svd, p, down + row * d2, act, 1);
    out[row] = {row, r.dominant, r.true_act};
  }
  std::stable_sort(out.begin(), out.end(), [](const RowScreenEntry& a, const RowScreenEntry& b) {
    return std::fabs(a.dominant) > std::fabs(b.dominant);
  });
  return out;
}

// ----------------------------- planted fixtures -----------------------------

namespace {

// Draws a gaussian vector and orthonormalizes it against the given basis.
// Retries on degenerate draws rather than failing.
std::vector<double> draw_orthonormal(Rng& rng, size_t dim,
                                     const std::vector<std::vector<double>>& basis) {
  for (int attempt = 0; attempt < 32; ++attempt) {
    std::vector<double> v(dim);
    for (auto& e : v) e = rng.normal();
    for (const auto& b : basis) {
      double d = 0.0;
      for (size_t i = 0; i < dim; ++i) d += v[i] * b[i];
      for (size_t i = 0; i < dim; ++i) v[i] -= d * b[i];
    }
    double nrm = 0.0;
    for (double e : v) nrm += e * e;
    nrm = std::sqrt(nrm);
    if (nrm > 1e-8) {
      for (auto& e : v) e /= nrm;
      return v;
    }
  }
  throw NumericError("could not draw an orthonormal vector; basis nearly spans the space");
}

}  // namespace

PlantedColinearFixture plant_colinear(size_t m, size_t n, const ColinearityTargets& t,
                                      uint64_t seed) {
  if (m < 4 || n < 2)
    throw ContractError(strf("planted fixture needs at least a 4x2 matrix, got %zux%zu", m, n));
  if (!(t.s1 > 0.0)) throw ContractError("target s1 must be positive");
  if (t.v1_dot_x == 0.0) throw ContractError("target v1.x must be nonzero");
  if (std::fabs(t.w_dot_u1) > t.w_norm)
    throw ContractError(strf("infeasible target: |w.u1| = %.6g exceeds the row norm %.6g",
                             std::fabs(t.w_dot_u1), t.w_norm));

  const double a = t.w_dot_u1;
  const double c = t.v1_dot_x;
  const double dominant = t.s1 * a * c;
  const bool shape_act = t.act_value > 0.0;
  if (shape_act) {
    if (dominant <= 0.0)
      throw ContractError("activation target shaping assumes a positive dominant product");
    if (t.act_value >= dominant)
      throw ContractError(strf("activation target %.6g not below the linear value %.6g",
                               t.act_value, dominant));
  }

  Rng rng(seed);
  const double sc = t.s1 * c;  // pre-activation magnitude along u1

  // u1: either a plain random unit vector, or a two-group vector whose
  // positive-preactivation mass is bisected until w.gelu(Ax) hits the target.
  std::vector<double> u1(m);
  if (!shape_act) {
    u1 = draw_orthonormal(rng, m, {});
  } else {
    const size_t np = m / 2;
    std::vector<double> ph(np), nh(m - np);
    auto positive_unit = [&](std::vector<double>& v) {
      double nrm = 0.0;
      for (auto& e : v) {
        e = std::fabs(rng.normal()) + 0.05;
        nrm += e * e;
      }
      nrm = std::sqrt(nrm);
      for (auto& e : v) e /= nrm;
    };
    positive_unit(ph);
    positive_unit(nh);
    const double sp = sc >= 0.0 ? 1.0 : -1.0;  // P-group sign keeps h positive there
    auto build = [&](double mass) {
      for (size_t i = 0; i < np; ++i) u1[i] = sp * std::sqrt(mass) * ph[i];
      for (size_t i = np; i < m; ++i) u1[i] = -sp * std::sqrt(1.0 - mass) * nh[i - np];
    };
    auto value = [&](double mass) {
      build(mass);
      double acc = 0.0;
      for (size_t j = 0; j < m; ++j) acc += u1[j] * gelu_scalar(sc * u1[j]);
      return a * acc;
    };
    double lo = 0.0, hi = 1.0;
    if (!(t.act_value <= value(1.0) && t.act_value >= value(0.0)) &&
        !(t.act_value >= value(1.0) && t.act_value <= value(0.0)))
      throw ContractError(strf("activation target %.6g outside the reachable range [%.6g, %.6g]",
                               t.act_value, value(0.0), value(1.0)));
    const bool increasing = value(1.0) > value(0.0);
    for (int it = 0; it < 200; ++it) {
      const double mid = 0.5 * (lo + hi);
      const double y = value(mid);
      if ((y < t.act_value) == increasing)
        lo = mid;
      else
        hi = mid;
    }
    build(0.5 * (lo + hi));
    const double achieved = value(0.5 * (lo + hi));
    if (std::fabs(achieved - t.act_value) > 1e-6 * std::fabs(t.act_value))
      throw NumericError(strf("mass bisection stalled at %.9g vs target %.9g", achieved,
                              t.act_value));
  }

  const size_t K = 1 + std::min(t.extra_rank, std::min(m, n) - 1);
  std::vector<std::vector<double>> us{u1}, vs;
  vs.push_back(draw_orthonormal(rng, n, {}));
  for (size_t k = 1; k < K; ++k) {
    us.push_back(draw_orthonormal(rng, m, us));
    vs.push_back(draw_orthonormal(rng, n, vs));
  }

  PlantedColinearFixture fx;
  fx.m = m;
  fx.n = n;
  fx.A.assign(m * n, 0.0);
  for (size_t k = 0; k < K; ++k) {
    // distinct, rapidly decaying minor components keep the factor well
    // separated while making the matrix full-rank along K directions
    const double sk = k == 0 ? t.s1 : t.s1 * 0.02 * std::pow(0.75, double(k - 1));
    for (size_t i = 0; i < m; ++i) {
      for (size_t j = 0; j < n; ++j) fx.A[i * n + j] += sk * us[k][i] * vs[k][j];
    }
  }

  // x exactly colinear with v1: every non-dominant triple gets v_i.x = 0.
  fx.x.assign(n, 0.0);
  for (size_t j = 0; j < n; ++j) fx.x[j] = c * vs[0][j];

  // w = a*u1 + perpendicular filler, with the filler orthogonal to both u1
  // and gelu(Ax) so it contributes to neither the linear nor the gelu value.
  std::vector<double> h(m), g(m);
  for (size_t j = 0; j < m; ++j) {
    h[j] = sc * u1[j];
    g[j] = gelu_scalar(h[j]);
  }
  const double rho = std::sqrt(std::max(0.0, t.w_norm * t.w_norm - a * a));
  fx.w.assign(m, 0.0);
  if (rho > 0.0) {
    double gn = 0.0;
    for (double e : g) gn += e * e;
    std::vector<std::vector<double>> wb{u1};
    if (gn > 1e-20) {
      std::vector<double> gu = g;
      double d = 0.0;
      for (size_t j = 0; j < m; ++j) d += gu[j] * u1[j];
      for (size_t j = 0; j < m; ++j) gu[j] -= d * u1[j];
      double nrm = 0.0;
      for (double e : gu) nrm += e * e;
      if (nrm > 1e-20) {
        nrm = std::sqrt(nrm);
        for (auto& e : gu) e /= nrm;
        wb.push_back(gu);
      }
    }
    std::vector<double> wp = draw_orthonormal(rng, m, wb);
    for (size_t j = 0; j < m; ++j) fx.w[j] = a * u1[j] + rho * wp[j];
  } else {
    for (size_t j = 0; j < m; ++j) fx.w[j] = a * u1[j];
  }

  fx.expected_dominant = dominant;
  if (shape_act) {
    double acc = 0.0;
    for (size_t j = 0; j < m; ++j) acc += fx.w[j] * g[j];
    fx.expected_act = acc;
  } else {
    fx.expected_act = dominant;
  }
  return fx;
}

TrainingPlant apply_planted_outlier(ModelWeights<float>& w, size_t layer, double amplitude,
                                    double bias, uint64_t seed) {
  const ModelConfig& cfg = w.cfg;
  if (cfg.mlp != MlpKind::GELU_CLASSIC)
    throw ContractError("the planted outlier channel assumes the gelu mlp");
  if (layer >= cfg.n_layers)
    throw ContractError(strf("plant layer %zu out of range for %zu layers", layer,
                             cfg.n_layers));
  if (!(amplitude > 0.0)) throw ContractError("plant amplitude must be positive");

  const size_t M = cfg.d_mlp, D = cfg.d_model;
  const size_t R = std::max<size_t>(1, (7 * M) / 8);
  Rng rng(seed ^ 0x9E3779B97F4A7C15ull);

  std::vector<double> v1(D);
  double nrm = 0.0;
  for (auto& e : v1) {
    e = rng.normal();
    nrm += e * e;
  }
  nrm = std::sqrt(nrm);
  for (auto& e : v1) e /= nrm;

  // Solve R * f * gelu(f * beta(f)) = amplitude. Spreading the product over
  // many moderate weights instead of one huge one keeps every planted value
  // within reach of a few thousand optimizer steps.
  auto beta_of = [&](double f) { return bias > 0.0 ? bias : f; };
  auto peak_of = [&](double f) { return double(R) * f * gelu_scalar(f * beta_of(f)); };
  double lo = 1e-6, hi = 64.0;
  if (peak_of(hi) < amplitude)
    throw ContractError(strf("plant amplitude %.6g unreachable with %zu channels", amplitude,
                             R));
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (peak_of(mid) < amplitude ? lo : hi) = mid;
  }
  const double f = 0.5 * (lo + hi);
  const double beta = beta_of(f);

  BlockWeights<float>& blk = w.blocks[layer];
  auto& up = blk.up_w.mut_data();
  auto& upb = blk.up_b.mut_data();
  auto& down = blk.down_w.mut_data();
  auto& ln2b = blk.ln2_b.mut_data();
  const size_t first = M - R;
  for (size_t k = first; k < M; ++k) {
    for (size_t j = 0; j < D; ++j) up[k * D + j] = float(f * v1[j]);
    upb[k] = 0.0f;
    for (size_t j = 0; j < D; ++j) down[j * M + k] = j == 0 ? float(f) : 0.0f;
  }
  for (size_t j = 0; j < D; ++j) ln2b[j] = float(beta * v1[j]);

  TrainingPlant plant;
  plant.layer = layer;
  plant.out_dim = 0;
  plant.first_channel = first;
  plant.channels = R;
  plant.f = f;
  plant.beta = beta;
  plant.amplitude = amplitude;
  plant.v1.resize(D);
  for (size_t j = 0; j < D; ++j) plant.v1[j] = float(v1[j]);
  return plant;
}

// ----------------------------- stethoscope -----------------------------

DataMode data_mode_from_name(const std::string& name) {
  if (name == "real" || name == "REAL") return DataMode::REAL;
  if (name == "gauss" || name == "random_gaussian" || name == "RANDOM_GAUSSIAN")
    return DataMode::RANDOM_GAUSSIAN;
  if (name == "random_tokens" || name == "RANDOM_TOKENS") return DataMode::RANDOM_TOKENS;
  throw ContractError(strf("unknown data mode '%s'", name.c_str()));
}

const char* data_mode_name(DataMode m) {
  switch (m) {
    case DataMode::REAL: return "real";
    case DataMode::RANDOM_GAUSSIAN: return "random_gaussian";
    case DataMode::RANDOM_TOKENS: return "random_tokens";
  }
  return "?";
}

StethoscopeCell stethoscope_run(const ModelWeights<float>& w, const std::vector<Batch>& probes,
                                DataMode dm, uint64_t noise_seed, const std::string& label) {
  if (probes.empty()) throw ContractError("stethoscope needs at least one probe batch");
  Rng rng(noise_seed);
  StethoscopeCell cell;
  cell.label = label;
  cell.per_layer_peak.assign(w.cfg.n_layers, 0.0);
  for (const Batch& src : probes) {
    Batch b = src;
    b.y.clear();  // peaks only, no loss
    ForwardOpts<float> opts;
    opts.want_taps = true;
    Tensor<float> noise;
    if (dm == DataMode::RANDOM_GAUSSIAN) {
      noise = Tensor<float>::randn({b.B * b.T, w.cfg.d_model}, rng);
      opts.stream_override = &noise;
    } else if (dm == DataMode::RANDOM_TOKENS) {
      for (auto& id : b.x) id = int32_t(rng.randint(0, int64_t(w.cfg.vocab) - 1));
    }
    ForwardOut<float> out = forward(w, b, opts);
    for (size_t l = 0; l < out.taps.size(); ++l) {
      const double peak = amax_abs(out.taps[l].data().data(), out.taps[l].numel());
      cell.per_layer_peak[l] = std::max(cell.per_layer_peak[l], peak);
    }
  }
  for (double p : cell.per_layer_peak) cell.global_peak = std::max(cell.global_peak, p);
  return cell;
}

}  // namespace tweo
