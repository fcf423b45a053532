#include "tweo/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "tweo/diagnostics.hpp"
#include "tweo/ops.hpp"
#include "tweo/serialize.hpp"

namespace fs = std::filesystem;

namespace tweo {

Precision precision_from_name(const std::string& name) {
  if (name == "full" || name == "FULL") return Precision::FULL;
  if (name == "fp8" || name == "fp8_emulated" || name == "FP8_EMULATED")
    return Precision::FP8_EMULATED;
  throw ContractError(strf("unknown precision '%s' (use full or fp8_emulated)", name.c_str()));
}

const char* precision_name(Precision p) {
  return p == Precision::FULL ? "full" : "fp8_emulated";
}

double lr_at(const OptimConfig& oc, size_t step) {
  const size_t warm = oc.warmup < 0 ? oc.total_steps / 20 : static_cast<size_t>(oc.warmup);
  if (step < warm) return oc.lr * double(step + 1) / double(warm);
  if (oc.total_steps <= warm + 1) return oc.lr;
  double prog = double(step - warm) / double(oc.total_steps - 1 - warm);
  prog = std::min(prog, 1.0);
  constexpr double kFloor = 0.1;  // decay bottoms out at 10% of peak lr
  constexpr double kPi = 3.14159265358979323846;
  return oc.lr * (kFloor + (1.0 - kFloor) * 0.5 * (1.0 + std::cos(kPi * prog)));
}

void RunConfig::validate_and_resolve() {
  model.validate();
  if (tweo_enabled) tweo.validate();
  if (!(optim.lr > 0.0)) throw ContractError(strf("lr must be positive, got %g", optim.lr));
  if (!(optim.beta1 >= 0.0 && optim.beta1 < 1.0) || !(optim.beta2 >= 0.0 && optim.beta2 < 1.0))
    throw ContractError("AdamW betas must lie in [0, 1)");
  if (!(optim.eps > 0.0)) throw ContractError("AdamW eps must be positive");
  if (optim.weight_decay < 0.0) throw ContractError("weight decay cannot be negative");
  if (optim.warmup < 0) optim.warmup = static_cast<int64_t>(optim.total_steps / 20);
  // A zero-step run (checkpoint == init) is allowed; otherwise warmup must
  // leave at least one decay step.
  if (optim.total_steps > 0 && static_cast<size_t>(optim.warmup) >= optim.total_steps)
    throw ContractError(strf("warmup (%lld) must be shorter than the run (%zu steps)",
                             static_cast<long long>(optim.warmup), optim.total_steps));
  if (batch_size == 0) throw ContractError("batch size must be positive");
  if (telemetry_every == 0) throw ContractError("telemetry cadence must be positive");
  if (model.vocab < kByteVocab)
    throw ContractError(strf("byte-level training needs vocab >= %zu, got %zu", kByteVocab,
                             model.vocab));
  if (precision == Precision::FP8_EMULATED) fp8.enabled = true;
}

std::string telemetry_to_json(const TelemetryRecord& r) {
  nlohmann::json j;
  j["step"] = r.step;
  j["lr"] = r.lr;
  j["task_loss"] = r.task_loss;
  j["tweo_loss"] = r.tweo_loss;
  j["lambda"] = r.lambda;
  j["layer_top1"] = r.layer_top1;
  j["global_peak"] = r.global_peak;
  j["saturation"] = r.saturation;
  return j.dump();
}

namespace {

void dump_taps(const std::string& dir, const std::vector<Tensor<float>>& taps) {
  fs::create_directories(dir);
  for (size_t l = 0; l < taps.size(); ++l)
    save_tnsr(strf("%s/tap%zu.tnsr", dir.c_str(), l), taps[l]);
}

struct ParamSlot {
  Tensor<float> t;
  std::vector<float> m, v;
  bool decay = false;
};

}  // namespace

TrainResult train(const RunConfig& cfg_in, const Corpus* corpus_in, const ProgressFn& progress) {
  RunConfig cfg = cfg_in;
  cfg.validate_and_resolve();
  const auto t0 = std::chrono::steady_clock::now();

  Corpus local;
  const Corpus* corpus = corpus_in;
  if (!corpus) {
    local = load_corpus(cfg.corpus_path);
    corpus = &local;
  }
  CorpusSplit split = split_corpus(*corpus, cfg.model.context);
  // Batch order depends only on the run seed, so a baseline/regularized pair
  // sharing a seed sees identical data.
  TrainSampler sampler(*corpus, split, cfg.batch_size, cfg.seed ^ 0x5A4D9E21ull);

  ModelWeights<float> w;
  if (!cfg.init_checkpoint.empty()) {
    LoadedModel lm = load_model(cfg.init_checkpoint);
    w = std::move(lm.w);
    if (w.cfg.vocab != cfg.model.vocab || w.cfg.d_model != cfg.model.d_model ||
        w.cfg.n_layers != cfg.model.n_layers || w.cfg.context != cfg.model.context ||
        w.cfg.mlp != cfg.model.mlp)
      throw ContractError(strf("checkpoint %s disagrees with the run's model shape",
                               cfg.init_checkpoint.c_str()));
    // Any planted fixture is already baked into these weights.
  } else {
    w = init_weights<float>(cfg.model);
    if (cfg.model.plant_layer >= 0)
      apply_planted_outlier(w, static_cast<size_t>(cfg.model.plant_layer),
                            cfg.model.plant_amplitude, cfg.model.plant_bias, cfg.model.seed);
  }
  w.set_requires_grad(true);

  std::vector<ParamSlot> slots;
  for (auto& [name, t] : w.named())
    slots.push_back({t, std::vector<float>(t.numel(), 0.0f),
                     std::vector<float>(t.numel(), 0.0f), t.rank() == 2});

  const bool emulated = cfg.precision == Precision::FP8_EMULATED;
  Fp8ModelState fstate;
  fp8::Fp8RunCtx fctx;
  if (emulated) {
    fstate = Fp8ModelState::make(w.cfg, cfg.fp8);
    fctx.fwd_format = cfg.fp8.fwd_format;
    fctx.grad_format = cfg.fp8.grad_format;
    fctx.overflow = cfg.fp8.overflow;
    fctx.lossless = cfg.fp8.lossless;
  }

  const bool artifacts = !cfg.out_dir.empty();
  std::ofstream tele;
  if (artifacts) {
    fs::create_directories(cfg.out_dir);
    tele.open(cfg.out_dir + "/telemetry.jsonl", std::ios::trunc);
    if (!tele) throw IoError(strf("cannot write telemetry under %s", cfg.out_dir.c_str()));
  }

  TrainResult res;
  // The baseline logs the same penalty statistic with default knobs so the
  // two curves of a pair are directly comparable.
  const TweoConfig logged_tweo = cfg.tweo_enabled ? cfg.tweo : TweoConfig{};

  auto record = [&](size_t step, double task, const std::vector<Tensor<float>>& taps,
                    uint64_t sat) {
    TelemetryRecord r;
    r.step = step;
    r.lr = lr_at(cfg.optim, step);
    r.task_loss = task;
    r.tweo_loss = tweo_penalty_value(taps, logged_tweo);
    r.lambda = cfg.tweo_enabled ? tweo_lambda(cfg.tweo, step, cfg.optim.total_steps) : 0.0;
    OutlierReport rep = outlier_scan(taps, step);
    for (const auto& l : rep.layers) r.layer_top1.push_back(l.top1);
    r.global_peak = rep.global_peak;
    r.saturation = sat;
    res.final_peak = r.global_peak;
    res.run_max_peak = std::max(res.run_max_peak, r.global_peak);
    if (tele.is_open()) tele << telemetry_to_json(r) << "\n";
    if (progress) progress(r);
    res.telemetry.push_back(std::move(r));
  };

  size_t step = 0;
  for (; step < cfg.optim.total_steps; ++step) {
    Batch batch = sampler.next();
    w.zero_grads();

    ForwardOpts<float> opts;
    opts.want_taps = true;
    if (emulated) {
      fctx.step = step;
      opts.fp8 = &fstate;
      opts.fp8_ctx = &fctx;
    }
    const uint64_t sat_before = fctx.sat_total;

    ForwardOut<float> out;
    try {
      out = forward(w, batch, opts);
      const double task = out.loss.item();
      if (cfg.precision == Precision::FULL && !std::isfinite(task)) {
        std::string where = "(no dump, out_dir unset)";
        if (artifacts) {
          where = cfg.out_dir + "/abort";
          dump_taps(where, out.taps);
        }
        throw NumericError(strf("non-finite loss %g at step %zu; taps in %s", task, step,
                                where.c_str()));
      }
      const double lam =
          cfg.tweo_enabled ? tweo_lambda(cfg.tweo, step, cfg.optim.total_steps) : 0.0;
      Tensor<float> total = out.loss;
      if (lam > 0.0)
        total = add(out.loss, mul_scalar(tweo_penalty(out.taps, cfg.tweo), float(lam)));
      backward(total);
    } catch (const CollapseSignal& cs) {
      res.collapsed = true;
      res.collapse = cs;
      if (artifacts) {
        nlohmann::json j;
        j["step"] = cs.step;
        j["site"] = cs.site;
        j["amax"] = cs.amax;
        std::ofstream cj(cfg.out_dir + "/collapse.json", std::ios::trunc);
        cj << j.dump(2) << "\n";
      }
      break;
    }

    const double task = out.loss.item();
    res.final_train_loss = task;

    if (step % cfg.telemetry_every == 0 || step + 1 == cfg.optim.total_steps)
      record(step, task, out.taps, fctx.sat_total - sat_before);
    if (artifacts && cfg.dump_taps_step >= 0 && static_cast<size_t>(cfg.dump_taps_step) == step)
      dump_taps(strf("%s/taps_step%zu", cfg.out_dir.c_str(), step), out.taps);

    const double lr = lr_at(cfg.optim, step);
    const double bc1 = 1.0 - std::pow(cfg.optim.beta1, double(step + 1));
    const double bc2 = 1.0 - std::pow(cfg.optim.beta2, double(step + 1));
    for (ParamSlot& s : slots) {
      std::vector<float>& val = s.t.mut_data();
      const std::vector<float>& g = s.t.node()->grad;
      if (g.size() != val.size()) continue;  // parameter untouched this step
      for (size_t i = 0; i < val.size(); ++i) {
        const double gi = g[i];
        const double m = cfg.optim.beta1 * s.m[i] + (1.0 - cfg.optim.beta1) * gi;
        const double v = cfg.optim.beta2 * s.v[i] + (1.0 - cfg.optim.beta2) * gi * gi;
        s.m[i] = static_cast<float>(m);
        s.v[i] = static_cast<float>(v);
        double upd = (m / bc1) / (std::sqrt(v / bc2) + cfg.optim.eps);
        if (s.decay) upd += cfg.optim.weight_decay * double(val[i]);
        val[i] = static_cast<float>(double(val[i]) - lr * upd);
      }
    }

    if (artifacts && cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 &&
        step + 1 < cfg.optim.total_steps)
      save_model(strf("%s/checkpoint_%zu", cfg.out_dir.c_str(), step + 1), w, step + 1);
  }
  res.steps_done = step;

  w.set_requires_grad(false);
  std::vector<Batch> vb = val_batches(*corpus, split, cfg.batch_size);
  if (cfg.eval_batches > 0 && vb.size() > cfg.eval_batches) vb.resize(cfg.eval_batches);
  res.final_eval = evaluate(w, vb);

  if (artifacts) {
    res.checkpoint_dir = cfg.out_dir + "/checkpoint";
    save_model(res.checkpoint_dir, w, res.steps_done);
    res.telemetry_path = cfg.out_dir + "/telemetry.jsonl";
  }
  res.saturation_total = fctx.sat_total;
  res.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (artifacts) write_summary(cfg.out_dir, cfg, res);
  return res;
}

void write_summary(const std::string& out_dir, const RunConfig& cfg, const TrainResult& res) {
  nlohmann::json j;
  j["steps_done"] = res.steps_done;
  j["total_steps"] = cfg.optim.total_steps;
  j["seed"] = cfg.seed;
  j["precision"] = precision_name(cfg.precision);
  j["tweo_enabled"] = cfg.tweo_enabled;
  if (cfg.tweo_enabled) {
    j["tau"] = cfg.tweo.tau;
    j["p"] = cfg.tweo.p;
    j["lambda0"] = cfg.tweo.lambda0;
    j["schedule"] = schedule_name(cfg.tweo.schedule);
  }
  j["collapsed"] = res.collapsed;
  if (res.collapsed) {
    j["collapse"] = {{"step", res.collapse.step},
                     {"site", res.collapse.site},
                     {"amax", res.collapse.amax}};
  }
  j["final_train_loss"] = res.final_train_loss;
  j["final_peak"] = res.final_peak;
  j["run_max_peak"] = res.run_max_peak;
  j["saturation_total"] = res.saturation_total;
  j["eval"] = {{"mean_nll", res.final_eval.mean_nll},
               {"ppl", res.final_eval.ppl},
               {"tokens", res.final_eval.tokens}};
  j["wall_seconds"] = res.wall_seconds;
  std::ofstream out(out_dir + "/summary.json", std::ios::trunc);
  if (!out) throw IoError(strf("cannot write %s/summary.json", out_dir.c_str()));
  out << j.dump(2) << "\n";
}

}  // namespace tweo
