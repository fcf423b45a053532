#pragma once

#include <string>
#include <vector>

#include "tweo/model.hpp"
#include "tweo/tensor.hpp"

namespace tweo {

// ----------------------------- outlier telemetry -----------------------------

struct LayerOutlierStats {
  double top1 = 0, top2 = 0, top3 = 0;
  double median_abs = 0;  // lower median, an exact order statistic
};

struct OutlierReport {
  std::vector<LayerOutlierStats> layers;
  double global_peak = 0;
  size_t step = 0;
};

LayerOutlierStats scan_values(const float* p, size_t n);
LayerOutlierStats scan_values(const double* p, size_t n);
OutlierReport outlier_scan(const std::vector<Tensor<float>>& taps, size_t step);

struct HistogramReport {
  double lo = 0, hi = 0, mean = 0, stdev = 0;
  std::vector<double> edges;   // bins+1 ascending
  std::vector<size_t> counts;  // sums to n
  size_t n = 0;
};

// Equal-width bins across [min, max]; a constant input degenerates to a
// single occupied bin. bins must be at least 2.
HistogramReport activation_histogram(const float* p, size_t n, size_t bins);

// ----------------------------- colinearity analyzer -----------------------------

enum class ProbeActivation { IDENTITY, GELU, SILU };
ProbeActivation probe_activation_from_name(const std::string& name);
const char* probe_activation_name(ProbeActivation a);

struct ColinearityTriple {
  double s = 0;        // singular value
  double w_u = 0;      // w . u_i
  double v_x = 0;      // v_i . x
  double product = 0;  // s * (w.u_i) * (v_i.x)
};

// Decomposition of y = w . act(A x) through the SVD of A. The linear sum
// over every triple reconstructs w.(Ax); the activation-aware simulation
// applies act to the pre-activations rebuilt from the factors, while true_act
// applies it to A x computed directly, with the identical scalar activation.
struct ColinearityReport {
  long long layer = -1;  // filled by callers that know the provenance
  long long row = -1;
  std::vector<ColinearityTriple> triples;  // first `budget` triples, s descending
  double sum_linear = 0;                   // full Eq-style sum over all triples
  double direct_linear = 0;                // w . (A x)
  double dominant = 0;                     // product with the largest magnitude
  size_t dominant_i = 0;
  double dominant_share = 0;  // |dominant| / sum of |products|
  double sim_act = 0;
  double true_act = 0;
  double rel_err_linear = 0;  // |sum_linear - direct_linear| / |direct_linear|
  double rel_err_act = 0;     // |sim_act - true_act| / |true_act|
  ProbeActivation act = ProbeActivation::IDENTITY;
};

ColinearityReport svd_colinearity(const double* A, size_t d2, size_t d1, const double* w,
                                  const double* x, ProbeActivation act, size_t budget = 8);

// Ranks every output row of down [d1b, d2] by the magnitude of its dominant
// triple against up [d2, d1]; the SVD is factored once and reused.
struct RowScreenEntry {
  size_t row = 0;
  double dominant = 0;
  double true_act = 0;
};
std::vector<RowScreenEntry> screen_rows(const double* up, size_t d2, size_t d1,
                                        const double* down, size_t d1b, const double* x,
                                        ProbeActivation act);

// ----------------------------- planted fixtures -----------------------------

struct ColinearityTargets {
  double s1 = 18.189;
  double w_dot_u1 = -9.1847;
  double v1_dot_x = -5.6165;
  // Target for w . gelu(Ax); <= 0 keeps u1 a plain random unit vector and
  // skips the sign-mass shaping.
  double act_value = 884.29;
  double w_norm = 10.0;
  size_t extra_rank = 6;  // small decaying components under the dominant one
};

struct PlantedColinearFixture {
  size_t m = 0, n = 0;
  std::vector<double> A;  // [m,n]
  std::vector<double> w;  // [m]
  std::vector<double> x;  // [n]
  double expected_dominant = 0;  // s1 * (w.u1) * (v1.x)
  double expected_act = 0;       // w . gelu(Ax) realized by the construction
};

/**
 * Builds (A, w, x) such that the analyzer's dominant triple matches the
 * targets exactly: x is colinear with v1, so every non-dominant triple
 * vanishes, and u1's positive/negative mass is bisected until the
 * GELU-side value hits act_value. Infeasible targets (|w.u1| > w_norm)
 * raise ContractError.
 */
PlantedColinearFixture plant_colinear(size_t m, size_t n, const ColinearityTargets& t,
                                      uint64_t seed);

// Installs an amplification channel group into one block's MLP: R identical
// up-rows along a direction v1, a down column collecting them into stream
// dim 0, and a pre-MLP norm bias along v1 so the group fires with a stable
// sign on every token. Nominal block-output peak ~= amplitude. GELU MLPs only.
struct TrainingPlant {
  size_t layer = 0;
  size_t out_dim = 0;        // residual dimension carrying the outlier
  size_t first_channel = 0;  // planted channels [first, first+channels)
  size_t channels = 0;
  double f = 0;     // per-weight magnitude solved from the amplitude
  double beta = 0;  // norm-bias magnitude along v1
  double amplitude = 0;
  std::vector<float> v1;
};
TrainingPlant apply_planted_outlier(ModelWeights<float>& w, size_t layer, double amplitude,
                                    double bias, uint64_t seed);

// ----------------------------- stethoscope -----------------------------

enum class DataMode { REAL, RANDOM_GAUSSIAN, RANDOM_TOKENS };
DataMode data_mode_from_name(const std::string& name);
const char* data_mode_name(DataMode m);

struct StethoscopeCell {
  std::string label;
  std::vector<double> per_layer_peak;
  double global_peak = 0;
};

// Runs the probe batches through the model and records per-layer block-output
// peaks. RANDOM_GAUSSIAN swaps the embedded stream for seeded unit noise;
// RANDOM_TOKENS keeps embeddings but draws uniform ids. Deterministic for a
// fixed seed.
StethoscopeCell stethoscope_run(const ModelWeights<float>& w, const std::vector<Batch>& probes,
                                DataMode dm, uint64_t noise_seed, const std::string& label);

}  // namespace tweo
