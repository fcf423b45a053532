#pragma once

#include <functional>
#include <string>
#include <vector>

#include "tweo/corpus.hpp"
#include "tweo/fp8.hpp"
#include "tweo/model.hpp"
#include "tweo/tweo_loss.hpp"

namespace tweo {

enum class Precision { FULL, FP8_EMULATED };

Precision precision_from_name(const std::string& name);
const char* precision_name(Precision p);

struct OptimConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;  // decoupled, rank-2 weights only
  int64_t warmup = -1;        // optimizer steps; -1 resolves to 5% of total
  size_t total_steps = 1000;
};

// Linear warmup to lr, then cosine decay to a 0.1*lr floor.
double lr_at(const OptimConfig& oc, size_t step);

struct RunConfig {
  ModelConfig model;
  bool tweo_enabled = false;  // off = baseline run, regularizer absent
  TweoConfig tweo;
  Precision precision = Precision::FULL;
  fp8::Fp8Config fp8;  // overflow mode lives here; used when precision is FP8_EMULATED
  OptimConfig optim;
  size_t batch_size = 8;
  uint64_t seed = 1;
  std::string corpus_path;
  size_t telemetry_every = 10;
  size_t eval_batches = 64;  // validation batches for the final metric; 0 = all
  size_t checkpoint_every = 0;  // 0 = final checkpoint only
  int64_t dump_taps_step = -1;  // save that step's raw taps for offline checks
  std::string init_checkpoint;  // continue from these weights instead of fresh init
  std::string out_dir;          // empty = in-memory run, no artifacts

  void validate_and_resolve();  // fills auto warmup, checks invariants
};

struct TelemetryRecord {
  size_t step = 0;
  double lr = 0.0;
  double task_loss = 0.0;
  double tweo_loss = 0.0;  // raw penalty, before lambda
  double lambda = 0.0;
  std::vector<double> layer_top1;
  double global_peak = 0.0;   // max over layer_top1
  uint64_t saturation = 0;    // FP8 overflow count at this step
};

std::string telemetry_to_json(const TelemetryRecord& r);

struct TrainResult {
  size_t steps_done = 0;
  bool collapsed = false;
  CollapseSignal collapse;  // meaningful only when collapsed
  double final_train_loss = 0.0;
  double final_peak = 0.0;      // last recorded global activation peak
  double run_max_peak = 0.0;
  uint64_t saturation_total = 0;
  EvalResult final_eval;
  double wall_seconds = 0.0;
  std::vector<TelemetryRecord> telemetry;
  std::string checkpoint_dir;  // empty when out_dir was empty
  std::string telemetry_path;
};

using ProgressFn = std::function<void(const TelemetryRecord&)>;

/**
 * Runs the full loop: AdamW over the corpus with optional activation
 * regularization and optional emulated-FP8 matmuls. Deterministic from the
 * seed. A strict-mode FP8 overflow ends the run early with a collapse record
 * instead of an exception escaping; a non-finite loss in full precision
 * aborts with a tap dump. When `corpus` is non-null it is used instead of
 * reading cfg.corpus_path (test injection).
 */
TrainResult train(const RunConfig& cfg, const Corpus* corpus = nullptr,
                  const ProgressFn& progress = nullptr);

// Writes steps/collapse/metrics as JSON to out_dir/summary.json.
void write_summary(const std::string& out_dir, const RunConfig& cfg, const TrainResult& res);

}  // namespace tweo
