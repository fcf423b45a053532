// Acceptance suite: one self-contained check per criterion, one PASS/FAIL
// line each. Heavyweight training runs are cached under the work directory
// keyed by a config fingerprint, so re-runs only retrain what changed.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "tweo/common.hpp"
#include "tweo/corpus.hpp"
#include "tweo/diagnostics.hpp"
#include "tweo/fp8.hpp"
#include "tweo/model.hpp"
#include "tweo/quantizer.hpp"
#include "tweo/rng.hpp"
#include "tweo/tensor.hpp"
#include "tweo/trainer.hpp"
#include "tweo/tweo_loss.hpp"

using namespace tweo;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ----------------------------- pinned tolerances -----------------------------

constexpr double kSvdRelTol = 1e-8;          // A1 reconstruction identity
constexpr double kDominantTarget = 938.28;   // A2 dominant triple
constexpr double kDominantTol = 0.05;
constexpr double kActTarget = 884.29;        // A2 activation-aware value
constexpr double kActRelTol = 0.005;
constexpr double kUnitRelTol = 1e-3;         // A3 unit penalties
constexpr double kGradRelTol = 1e-4;         // A3 finite differences
constexpr double kDeskTau = 4.0;             // regularizer ceiling for desk runs
constexpr double kPeakCeil = 5.0 * kDeskTau; // A6 (i)
constexpr double kValRelTol = 0.05;          // A6 (ii)
constexpr double kPeakRatio = 2.0;           // A6 (iii)
constexpr size_t kDeskSteps = 5000;
constexpr size_t kCollapseBudget = 200;      // A7 baseline continuation
constexpr size_t kSurviveSteps = 2000;       // A7 regularized continuation
constexpr double kDeqRelTol = 1e-6;          // A8 dequantized values (float)
constexpr double kSmoothRelTol = 1e-8;       // A10 logit drift
constexpr double kNearRatio = 10.0;          // A11 trained+gauss vs trained+real
constexpr double kFarRatio = 10.0;           // A11 trained+real vs random init

// per-criterion wall budgets, seconds
const std::map<std::string, double> kBudget = {
    {"A1", 60}, {"A2", 5},    {"A3", 5},   {"A4", 1},  {"A5", 1},  {"A6", 1800},
    {"A7", 900}, {"A8", 30},  {"A9", 600}, {"A10", 10}, {"A11", 300}};

double now_s() {
  return std::chrono::duration<double>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::string& path, const std::string& s) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << s;
}

// ----------------------------- shared fixtures -----------------------------

struct Ctx {
  std::string work;
  std::string corpus_path;
  Corpus corpus;
  bool corpus_loaded = false;
};

constexpr size_t kCorpusBytes = 5 * 1024 * 1024;

void ensure_corpus(Ctx& c) {
  if (c.corpus_loaded) return;
  c.corpus_path = c.work + "/corpus.bin";
  if (!fs::exists(c.corpus_path) || fs::file_size(c.corpus_path) != kCorpusBytes) {
    std::vector<uint8_t> bytes = synthesize_text(kCorpusBytes, 11);
    std::ofstream out(c.corpus_path, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  }
  c.corpus = load_corpus(c.corpus_path);
  c.corpus_loaded = true;
}

// Desk-scale recipe shared by the paired runs: 4 blocks of width 128 over the
// byte corpus, 5k steps, one seed. The planted variant wires a 900-amplitude
// channel group into block 0 before training starts.
RunConfig desk_config(Ctx& c, bool tweo_on, bool planted) {
  ensure_corpus(c);
  RunConfig rc;
  rc.model.vocab = kByteVocab;
  rc.model.d_model = 128;
  rc.model.n_layers = 4;
  rc.model.n_heads = 4;
  rc.model.d_mlp = 256;
  rc.model.context = 48;
  rc.model.seed = 7;
  if (planted) {
    rc.model.plant_layer = 0;
    rc.model.plant_amplitude = 900.0;
    rc.model.plant_bias = 5.0;
  }
  rc.tweo_enabled = tweo_on;
  rc.tweo.tau = kDeskTau;
  rc.tweo.p = 4;
  rc.tweo.lambda0 = 0.01;
  rc.tweo.schedule = LambdaSchedule::CONSTANT;
  rc.optim.lr = 1e-3;  // planted weights must be movable within 5k steps
  rc.optim.total_steps = kDeskSteps;
  rc.batch_size = 4;
  rc.seed = 11;
  rc.telemetry_every = 50;
  rc.eval_batches = 32;
  rc.corpus_path = c.corpus_path;
  return rc;
}

std::string fingerprint(const RunConfig& rc) {
  const ModelConfig& m = rc.model;
  std::string s = strf(
      "v1|voc%zu d%zu L%zu H%zu mlp%zu ctx%zu kind%d lneps%g mseed%llu plant%lld amp%g "
      "bias%g|tweo%d tau%g p%d eps%g l0%g sch%d hor%zu|prec%d|fp8 e%d f%d g%d ov%d m%d "
      "gm%d h%zu ll%d|lr%g b1%g b2%g oeps%g wd%g wu%lld ts%zu|bs%zu seed%llu tel%zu "
      "ev%zu ck%zu dt%lld init:%s",
      m.vocab, m.d_model, m.n_layers, m.n_heads, m.d_mlp, m.context, int(m.mlp), m.ln_eps,
      (unsigned long long)m.seed, (long long)m.plant_layer, m.plant_amplitude, m.plant_bias,
      int(rc.tweo_enabled), rc.tweo.tau, rc.tweo.p, rc.tweo.eps, rc.tweo.lambda0,
      int(rc.tweo.schedule), rc.tweo.horizon, int(rc.precision), int(rc.fp8.enabled),
      int(rc.fp8.fwd_format), int(rc.fp8.grad_format), int(rc.fp8.overflow), rc.fp8.margin,
      rc.fp8.grad_margin, rc.fp8.history, int(rc.fp8.lossless), rc.optim.lr, rc.optim.beta1,
      rc.optim.beta2, rc.optim.eps, rc.optim.weight_decay, (long long)rc.optim.warmup,
      rc.optim.total_steps, rc.batch_size, (unsigned long long)rc.seed, rc.telemetry_every,
      rc.eval_batches, rc.checkpoint_every, (long long)rc.dump_taps_step,
      rc.init_checkpoint.c_str());
  return strf("%016llx", (unsigned long long)fnv1a64(s.data(), s.size()));
}

struct RunInfo {
  bool collapsed = false;
  size_t collapse_step = 0;
  size_t steps_done = 0;
  double final_peak = 0, run_max_peak = 0;
  double val_nll = 0, val_ppl = 0;
  double final_loss = 0;
  double wall = 0;
  std::string ckpt;
};

// Trains the run, or reloads its summary when the directory already holds a
// finished run with the same fingerprint.
RunInfo ensure_run(Ctx& c, const std::string& name, RunConfig rc) {
  ensure_corpus(c);
  std::string dir = c.work + "/" + name;
  rc.out_dir = dir;
  const std::string fp = fingerprint(rc);

  if (fs::exists(dir + "/config.fnv") && read_text(dir + "/config.fnv") == fp &&
      fs::exists(dir + "/summary.json")) {
    std::ifstream in(dir + "/summary.json");
    json s = json::parse(in);
    bool finished =
        s["collapsed"].get<bool>() || s["steps_done"].get<size_t>() == rc.optim.total_steps;
    if (finished) {
      RunInfo ri;
      ri.collapsed = s["collapsed"];
      if (ri.collapsed) ri.collapse_step = s["collapse"]["step"].get<size_t>();
      ri.steps_done = s["steps_done"];
      ri.final_peak = s["final_peak"];
      ri.run_max_peak = s["run_max_peak"];
      ri.val_nll = s["eval"]["mean_nll"];
      ri.val_ppl = s["eval"]["ppl"];
      ri.final_loss = s["final_train_loss"];
      ri.wall = s["wall_seconds"];
      ri.ckpt = dir + "/checkpoint";
      std::fprintf(stderr, "  [%s] cached (wall %.1fs, peak %.2f)\n", name.c_str(), ri.wall,
                   ri.final_peak);
      return ri;
    }
  }

  fs::remove_all(dir);
  std::fprintf(stderr, "  [%s] training %zu steps...\n", name.c_str(), rc.optim.total_steps);
  ProgressFn progress = [&](const TelemetryRecord& r) {
    if (r.step % 500 == 0 || r.step + 1 == rc.optim.total_steps)
      std::fprintf(stderr, "  [%s] step %zu/%zu loss %.4f peak %.2f\n", name.c_str(), r.step,
                   rc.optim.total_steps, r.task_loss, r.global_peak);
  };
  TrainResult tr = train(rc, &c.corpus, progress);
  write_text(dir + "/config.fnv", fp);

  RunInfo ri;
  ri.collapsed = tr.collapsed;
  ri.collapse_step = tr.collapse.step;
  ri.steps_done = tr.steps_done;
  ri.final_peak = tr.final_peak;
  ri.run_max_peak = tr.run_max_peak;
  ri.val_nll = tr.final_eval.mean_nll;
  ri.val_ppl = tr.final_eval.ppl;
  ri.final_loss = tr.final_train_loss;
  ri.wall = tr.wall_seconds;
  ri.ckpt = tr.checkpoint_dir.empty() ? dir + "/checkpoint" : tr.checkpoint_dir;
  std::fprintf(stderr, "  [%s] done: wall %.1fs peak %.2f val nll %.4f%s\n", name.c_str(),
               ri.wall, ri.final_peak, ri.val_nll,
               ri.collapsed ? strf(" COLLAPSED@%zu", ri.collapse_step).c_str() : "");
  return ri;
}

std::vector<Batch> first_train_batches(const Corpus& c, const CorpusSplit& sp,
                                       size_t batch_size, size_t n) {
  std::vector<Batch> out;
  for (size_t i = 0; i + 1 <= n && (i + 1) * batch_size <= sp.train_blocks.size(); ++i) {
    std::vector<size_t> blocks(sp.train_blocks.begin() + i * batch_size,
                               sp.train_blocks.begin() + (i + 1) * batch_size);
    out.push_back(assemble_batch(c, sp.seq_len, blocks));
  }
  return out;
}

// ----------------------------- criteria -----------------------------

struct Outcome {
  bool pass = false;
  double secs = 0;
  std::string detail;
};

// A1: the singular-triple sum reproduces the bilinear form w.(Ax).
Outcome a1(Ctx&) {
  double t0 = now_s();
  Rng rng(0xA1);
  double worst = 0, min_direct = 1e300;
  size_t cases = 0;
  for (size_t i = 0; i < 100; ++i) {
    size_t m, n;
    if (i == 0) {
      m = 256, n = 1024;
    } else if (i == 1) {
      m = 1024, n = 256;
    } else {
      m = size_t(rng.randint(4, 192));
      n = size_t(rng.randint(4, 320));
    }
    std::vector<double> A(m * n), w(m), x(n);
    for (double& v : A) v = rng.normal();
    for (double& v : w) v = rng.normal();
    for (double& v : x) v = rng.normal();
    ColinearityReport rep =
        svd_colinearity(A.data(), m, n, w.data(), x.data(), ProbeActivation::IDENTITY);
    worst = std::max(worst, rep.rel_err_linear);
    min_direct = std::min(min_direct, std::fabs(rep.direct_linear));
    ++cases;
  }
  double secs = now_s() - t0;
  bool pass = worst <= kSvdRelTol && secs <= kBudget.at("A1");
  return {pass, secs,
          strf("%zu/100 reconstructions within %g (worst rel %.3g, smallest |w.Ax| %.3g, "
               "largest case 256x1024)",
               cases, kSvdRelTol, worst, min_direct)};
}

// A2: planted fixture reproduces the worked dominant triple and the
// activation-aware simulation tracks the true value.
Outcome a2(Ctx&) {
  double t0 = now_s();
  ColinearityTargets t;  // defaults carry the worked-example numbers
  PlantedColinearFixture fx = plant_colinear(64, 48, t, 2024);
  ColinearityReport rep = svd_colinearity(fx.A.data(), fx.m, fx.n, fx.w.data(), fx.x.data(),
                                          ProbeActivation::GELU);
  double dom_err = std::fabs(rep.dominant - kDominantTarget);
  double act_rel = rep.rel_err_act;
  double anchor_rel = std::fabs(rep.true_act - kActTarget) / kActTarget;
  double secs = now_s() - t0;
  bool pass = dom_err <= kDominantTol && act_rel <= kActRelTol && anchor_rel <= kActRelTol &&
              secs <= kBudget.at("A2");
  return {pass, secs,
          strf("dominant %.4f (target %.2f +- %.2f), sim/true gelu rel %.3g <= %g, "
               "true %.2f vs %.2f (rel %.3g)",
               rep.dominant, kDominantTarget, kDominantTol, act_rel, kActRelTol, rep.true_act,
               kActTarget, anchor_rel)};
}

// A3: closed-form penalties at 0.5/1/10 times the ceiling, plus gradient
// agreement with central differences through the tape-free evaluator.
Outcome a3(Ctx&) {
  double t0 = now_s();
  TweoConfig tc;  // tau 3, p 4, eps 1e-6
  struct Point {
    double mult, want;
  };
  const Point pts[] = {{0.5, 0.0625}, {1.0, 1.0}, {10.0, 10000.0}};
  double worst_unit = 0;
  for (const Point& pt : pts) {
    std::vector<Tensor<double>> taps = {
        Tensor<double>::full({8, 16}, pt.mult * tc.tau),
        Tensor<double>::full({4, 4}, -pt.mult * tc.tau)};  // sign must not matter
    double v = tweo_penalty_value(taps, tc);
    worst_unit = std::max(worst_unit, std::fabs(v - pt.want) / pt.want);
  }

  Rng rng(0xA3);
  Tensor<double> t1 = Tensor<double>::randn({3, 5}, rng, 0.0, 3.0);
  Tensor<double> t2 = Tensor<double>::randn({4, 4}, rng, 0.0, 3.0);
  t1.set_requires_grad(true);
  t2.set_requires_grad(true);
  std::vector<Tensor<double>> taps = {t1, t2};
  backward(tweo_penalty(taps, tc));

  std::vector<std::vector<double>> raw = {t1.data(), t2.data()};
  std::vector<Shape> shapes = {{3, 5}, {4, 4}};
  auto loss_at = [&](size_t k, size_t i, double delta) {
    std::vector<Tensor<double>> ts;
    for (size_t j = 0; j < raw.size(); ++j) {
      std::vector<double> v = raw[j];
      if (j == k) v[i] += delta;
      ts.push_back(Tensor<double>::from(shapes[j], v));
    }
    return tweo_penalty_value(ts, tc);
  };
  double worst_grad = 0;
  for (size_t k = 0; k < raw.size(); ++k) {
    const std::vector<double>& g = (k == 0 ? t1 : t2).grad();
    for (size_t i = 0; i < raw[k].size(); ++i) {
      double h = 1e-6 * std::max(1.0, std::fabs(raw[k][i]));
      double fd = (loss_at(k, i, h) - loss_at(k, i, -h)) / (2 * h);
      double rel = std::fabs(fd - g[i]) / std::max({std::fabs(fd), std::fabs(g[i]), 1e-6});
      worst_grad = std::max(worst_grad, rel);
    }
  }
  double secs = now_s() - t0;
  bool pass =
      worst_unit <= kUnitRelTol && worst_grad <= kGradRelTol && secs <= kBudget.at("A3");
  return {pass, secs,
          strf("unit penalties worst rel %.3g <= %g; grad vs central diff worst rel %.3g <= %g",
               worst_unit, kUnitRelTol, worst_grad, kGradRelTol)};
}

// A4: exhaustive codec round trip, exact top magnitudes, monotonicity, and
// both overflow behaviors.
Outcome a4(Ctx&) {
  double t0 = now_s();
  std::string fail;

  for (fp8::Format f : {fp8::Format::E4M3, fp8::Format::E5M2}) {
    const fp8::FormatSpec& sp = fp8::spec_of(f);
    for (int c = 0; c < 256; ++c) {
      double v = fp8::decode(uint8_t(c), f);
      uint8_t c2 = fp8::encode(v, f);
      if (c2 != uint8_t(c)) {
        fail += strf("[%s round trip code %02x -> %02x]", sp.name, c, c2);
        break;
      }
    }
    // positive finite codes must decode strictly increasing
    double prev = -1;
    int top = f == fp8::Format::E4M3 ? 0x7E : 0x7B;
    for (int c = 0x00; c <= top; ++c) {
      double v = fp8::decode(uint8_t(c), f);
      if (!(v > prev)) {
        fail += strf("[%s monotonicity broken at code %02x]", sp.name, c);
        break;
      }
      prev = v;
    }
  }
  const fp8::FormatSpec& e4 = fp8::spec_of(fp8::Format::E4M3);
  const fp8::FormatSpec& e5 = fp8::spec_of(fp8::Format::E5M2);
  if (e4.max_finite != 448.0 || e4.has_inf) fail += "[E4M3 spec]";
  if (fp8::decode(0x7E, fp8::Format::E4M3) != 448.0) fail += "[E4M3 top code]";
  if (e5.max_finite != 57344.0 || !e5.has_inf) fail += "[E5M2 spec]";
  if (!std::isinf(fp8::decode(0x7C, fp8::Format::E5M2))) fail += "[E5M2 inf code]";

  // overflow behavior with a fresh (scale 1) state
  {
    std::vector<float> x = {1000.0f, 2.0f};
    fp8::ScalingState st(16, 0);
    fp8::Fp8Tensor sat = fp8_quantize_tensor(x.data(), {2}, st, fp8::Format::E4M3,
                                             fp8::Overflow::SATURATE);
    if (sat.saturated != 1 || fp8::decode(sat.codes[0], fp8::Format::E4M3) != 448.0)
      fail += "[saturate mode]";
    fp8::ScalingState st2(16, 0);
    fp8::Fp8Tensor strict = fp8_quantize_tensor(x.data(), {2}, st2, fp8::Format::E4M3,
                                                fp8::Overflow::STRICT);
    if (strict.saturated != 1 || !std::isnan(fp8::decode(strict.codes[0], fp8::Format::E4M3)))
      fail += "[strict mode]";
  }
  double secs = now_s() - t0;
  bool pass = fail.empty() && secs <= kBudget.at("A4");
  return {pass, secs,
          fail.empty() ? "512-code round trip exact; max finite 448/57344; monotone; "
                         "saturate clips, strict marks NaN"
                       : fail};
}

// A5: the scale applied at step t is blind to step t's own data, and the
// history forgets observations older than its 16-slot capacity.
Outcome a5(Ctx&) {
  double t0 = now_s();
  std::string fail;

  auto feed = [](fp8::ScalingState& st, float amax) {
    std::vector<float> x = {amax, -amax / 2};
    return fp8_quantize_tensor(x.data(), {2}, st, fp8::Format::E4M3,
                               fp8::Overflow::SATURATE);
  };
  fp8::ScalingState sa(16, 0), sb(16, 0);
  for (int s = 1; s <= 5; ++s) {
    double ka = feed(sa, float(s)).scale;
    double kb = feed(sb, float(s)).scale;
    if (ka != kb) fail += strf("[warmup scales diverged at step %d]", s);
  }
  double spike_scale = feed(sa, 400.0f).scale;  // spike enters A only
  double calm_scale = feed(sb, 5.0f).scale;
  if (spike_scale != calm_scale) fail += "[scale reacted to its own step's amax]";
  double next_a = feed(sa, 5.0f).scale;
  double next_b = feed(sb, 5.0f).scale;
  if (!(next_a < next_b)) fail += "[spike never reached the following step's scale]";

  fp8::ScalingState cap(16, 0);
  feed(cap, 1000.0f);
  for (int i = 0; i < 16; ++i) feed(cap, 1.0f);
  double healed = fp8::compute_delayed_scale(cap, fp8::Format::E4M3);
  if (std::fabs(healed - 448.0) > 1e-9) fail += strf("[capacity: scale %.6g != 448]", healed);

  fp8::AmaxHistory h(16);
  for (int i = 1; i <= 20; ++i) h.push(double(i));
  if (h.size() != 16 || h.capacity() != 16 || h.max() != 20.0) fail += "[history ring]";
  std::vector<double> snap = h.snapshot();
  if (snap.size() != 16 || snap.front() != 5.0 || snap.back() != 20.0)
    fail += "[snapshot order]";

  fp8::ScalingState margined(16, 1);
  feed(margined, 1.0f);
  if (std::fabs(fp8::compute_delayed_scale(margined, fp8::Format::E4M3) - 224.0) > 1e-9)
    fail += "[margin not honored]";

  double secs = now_s() - t0;
  bool pass = fail.empty() && secs <= kBudget.at("A5");
  return {pass, secs,
          fail.empty() ? "scale at t ignores step-t amax; spike lands at t+1; 16-slot ring "
                         "evicts; margin halves the scale"
                       : fail};
}

struct PairPick {
  RunInfo base, tweo;
  bool organic = true;
};

struct OrganicChecks {
  bool peak_ok, val_ok, ratio_ok;
  double val_rel;
};

OrganicChecks organic_checks(const RunInfo& base, const RunInfo& tweo) {
  OrganicChecks c{};
  c.peak_ok = tweo.final_peak <= kPeakCeil;
  c.val_rel = std::fabs(tweo.val_nll - base.val_nll) / base.val_nll;
  c.val_ok = c.val_rel <= kValRelTol;
  c.ratio_ok = base.final_peak >= kPeakRatio * tweo.final_peak;
  return c;
}

// The pair a directional criterion should run on: the organic pair when it
// certified on its own, otherwise the planted variant.
PairPick certified_pair(Ctx& c) {
  RunInfo ob = ensure_run(c, "desk_base", desk_config(c, false, false));
  RunInfo ot = ensure_run(c, "desk_tweo", desk_config(c, true, false));
  OrganicChecks oc = organic_checks(ob, ot);
  if (oc.peak_ok && oc.val_ok && oc.ratio_ok) return {ob, ot, true};
  RunInfo pb = ensure_run(c, "desk_base_planted", desk_config(c, false, true));
  RunInfo pt = ensure_run(c, "desk_tweo_planted", desk_config(c, true, true));
  return {pb, pt, false};
}

// A6: paired runs; the regularized model caps its peak, costs at most 5% in
// validation loss, and halves the baseline's peak (planted variant may stand
// in for the ratio when the organic contrast is too weak).
Outcome a6(Ctx& c) {
  RunInfo ob = ensure_run(c, "desk_base", desk_config(c, false, false));
  RunInfo ot = ensure_run(c, "desk_tweo", desk_config(c, true, false));
  if (ob.collapsed || ot.collapsed)
    return {false, ob.wall + ot.wall, "organic pair collapsed in full precision"};
  OrganicChecks oc = organic_checks(ob, ot);

  double wall = ob.wall + ot.wall;
  std::string detail = strf(
      "organic: tweo peak %.2f (ceil %.0f), val nll %.4f vs %.4f (rel %.3f), base peak %.2f "
      "(%sx%.1f)",
      ot.final_peak, kPeakCeil, ot.val_nll, ob.val_nll, oc.val_rel, ob.final_peak,
      oc.ratio_ok ? ">=" : "<", ot.final_peak > 0 ? ob.final_peak / ot.final_peak : 0.0);

  bool ratio_ok = oc.ratio_ok;
  if (!ratio_ok) {
    RunInfo pb = ensure_run(c, "desk_base_planted", desk_config(c, false, true));
    RunInfo pt = ensure_run(c, "desk_tweo_planted", desk_config(c, true, true));
    wall += pb.wall + pt.wall;
    bool planted_ratio = !pb.collapsed && !pt.collapsed &&
                         pb.final_peak >= kPeakRatio * pt.final_peak &&
                         pt.final_peak <= kPeakCeil;
    detail += strf("; planted fallback: base %.2f vs tweo %.2f (%s)", pb.final_peak,
                   pt.final_peak, planted_ratio ? "certifies" : "fails");
    ratio_ok = planted_ratio;
  }
  bool pass = oc.peak_ok && oc.val_ok && ratio_ok && wall <= kBudget.at("A6");
  return {pass, wall, detail};
}

// A7: strict-overflow FP8 kills the outlier-bearing baseline within 200
// steps, while the regularized twin trains 2k steps to a finite loss.
Outcome a7(Ctx& c) {
  RunInfo pb = ensure_run(c, "desk_base_planted", desk_config(c, false, true));
  RunInfo pt = ensure_run(c, "desk_tweo_planted", desk_config(c, true, true));

  auto strict_cont = [&](bool tweo_on, const std::string& from, size_t steps) {
    RunConfig rc = desk_config(c, tweo_on, false);  // plant arrives via the checkpoint
    rc.init_checkpoint = from;
    rc.precision = Precision::FP8_EMULATED;
    rc.fp8.enabled = true;
    rc.fp8.overflow = fp8::Overflow::STRICT;
    rc.fp8.margin = 1;
    rc.fp8.grad_margin = 3;
    rc.optim.total_steps = steps;
    return rc;
  };
  RunInfo cb = ensure_run(c, "fp8_strict_base",
                          strict_cont(false, pb.ckpt, kCollapseBudget));
  RunInfo ct = ensure_run(c, "fp8_strict_tweo", strict_cont(true, pt.ckpt, kSurviveSteps));

  bool base_ok = cb.collapsed && cb.collapse_step < kCollapseBudget;
  bool tweo_ok = !ct.collapsed && ct.steps_done == kSurviveSteps &&
                 std::isfinite(ct.final_loss) && std::isfinite(ct.val_nll);
  double wall = cb.wall + ct.wall;
  bool pass = base_ok && tweo_ok && wall <= kBudget.at("A7");
  return {pass, wall,
          strf("baseline %s at step %zu (budget %zu); regularized run %zu/%zu steps, final "
               "loss %.4f, peak %.2f, %s",
               cb.collapsed ? "collapsed" : "NEVER collapsed", cb.collapse_step,
               kCollapseBudget, ct.steps_done, kSurviveSteps, ct.final_loss, ct.final_peak,
               ct.collapsed ? "COLLAPSED" : "no collapse")};
}

// scalar reference quantizer: s = amax+eps per group, codes rounded half away
// from zero and clamped, values rebuilt as q*s/Q
void ref_qdq_group(const float* x, size_t n, int bits, std::vector<int32_t>& codes,
                   std::vector<float>& deq, double& scale) {
  const int q = (1 << (bits - 1)) - 1;
  double amax = 0;
  for (size_t i = 0; i < n; ++i) amax = std::max(amax, std::fabs(double(x[i])));
  scale = amax + 1e-6;
  codes.resize(n);
  deq.resize(n);
  for (size_t i = 0; i < n; ++i) {
    double t = double(x[i]) / scale * q;
    double r = t >= 0 ? std::floor(t + 0.5) : std::ceil(t - 0.5);
    r = std::min(std::max(r, double(-q)), double(q));
    codes[i] = int32_t(r);
    deq[i] = float(r * scale / q);
  }
}

// A8: library quantizer against the scalar reference over 1000 random
// tensors covering every width and granularity.
Outcome a8(Ctx&) {
  double t0 = now_s();
  Rng rng(0xA8);
  const int bits_cycle[] = {4, 6, 8};
  const QuantGran gran_cycle[] = {QuantGran::PER_TENSOR, QuantGran::PER_CHANNEL,
                                  QuantGran::PER_TOKEN};
  size_t checked = 0, code_mismatch = 0;
  double worst_deq = 0, worst_scale = 0;

  for (size_t t = 0; t < 1000; ++t) {
    int bits = bits_cycle[t % 3];
    QuantGran gran = gran_cycle[(t / 3) % 3];
    QuantRole role = gran == QuantGran::PER_CHANNEL ? QuantRole::WEIGHT
                     : gran == QuantGran::PER_TOKEN ? QuantRole::ACTIVATION
                     : (t % 2 ? QuantRole::WEIGHT : QuantRole::ACTIVATION);
    size_t rows = size_t(rng.randint(1, 24));
    size_t cols = size_t(rng.randint(1, 48));
    Shape shape{rows, cols};
    std::vector<float> x(rows * cols);
    double mag = std::pow(10.0, rng.uniform() * 6.0 - 3.0);
    for (float& v : x) v = float(rng.normal() * mag);
    if (t % 50 == 0) std::fill(x.begin(), x.end(), 0.0f);  // all-zero guard path

    Quantized qt = absmax_quantize(x.data(), shape, bits, gran, role);
    std::vector<float> lib_deq = absmax_dequantize(qt);

    size_t groups = gran == QuantGran::PER_TENSOR ? 1 : rows;
    size_t glen = x.size() / groups;
    for (size_t g = 0; g < groups; ++g) {
      std::vector<int32_t> rcodes;
      std::vector<float> rdeq;
      double rscale;
      ref_qdq_group(x.data() + g * glen, glen, bits, rcodes, rdeq, rscale);
      worst_scale = std::max(worst_scale, std::fabs(qt.scales[g] - rscale) /
                                              std::max(rscale, 1e-30));
      for (size_t i = 0; i < glen; ++i) {
        if (qt.q[g * glen + i] != rcodes[i]) ++code_mismatch;
        double denom = std::max(1.0, std::fabs(double(rdeq[i])));
        worst_deq = std::max(
            worst_deq, std::fabs(double(lib_deq[g * glen + i]) - double(rdeq[i])) / denom);
      }
    }
    ++checked;
  }
  double secs = now_s() - t0;
  bool pass = code_mismatch == 0 && worst_scale <= 1e-12 && worst_deq <= kDeqRelTol &&
              secs <= kBudget.at("A8");
  return {pass, secs,
          strf("%zu tensors: %zu code mismatches, worst scale rel %.3g, worst dequant rel "
               "%.3g <= %g",
               checked, code_mismatch, worst_scale, worst_deq, kDeqRelTol)};
}

// A9: on the certified pair, W8(T)A8(T) with the stream quantized degrades
// the regularized model less, sitewise and on the eval metric.
Outcome a9(Ctx& c) {
  PairPick pick = certified_pair(c);
  double t0 = now_s();
  LoadedModel lb = load_model(pick.base.ckpt);
  LoadedModel lt = load_model(pick.tweo.ckpt);

  QuantScheme scheme = scheme_from_name("W8TA8T");
  scheme.quantize_residual = true;
  CorpusSplit split = split_corpus(c.corpus, lb.w.cfg.context);
  std::vector<Batch> calib = first_train_batches(c.corpus, split, 4, 8);
  std::vector<Batch> vb = val_batches(c.corpus, split, 4);
  if (vb.size() > 16) vb.resize(16);

  auto degrade = [&](const ModelWeights<float>& w, CalibrationStats& stats,
                     std::map<std::string, SiteError>& sites) {
    stats = calibrate_static(w, scheme, calib);
    EvalResult before = evaluate(w, vb);
    QuantEvalOptions qo;
    qo.stats = &stats;
    QuantEvalResult after = fake_quant_eval(w, scheme, vb, qo);
    sites = after.site_errors;
    return after.mean_nll - before.mean_nll;
  };
  CalibrationStats sb, st;
  std::map<std::string, SiteError> sites_b, sites_t;
  double deg_b = degrade(lb.w, sb, sites_b);
  double deg_t = degrade(lt.w, st, sites_t);

  size_t lower = 0, total = 0;
  std::string worst_site;
  for (const std::string& site : residual_sites(lb.w.cfg)) {
    ++total;
    double mb = sites_b.at(site).mse, mt = sites_t.at(site).mse;
    if (mt < mb) ++lower;
    else worst_site = strf("%s (%.3g vs %.3g)", site.c_str(), mt, mb);
  }
  double secs = now_s() - t0;
  bool pass = lower == total && deg_t < deg_b && secs <= kBudget.at("A9");
  return {pass, secs,
          strf("%s pair, %s: regularized site MSE lower at %zu/%zu stream sites%s%s; nll "
               "degradation %.4f vs %.4f",
               pick.organic ? "organic" : "planted", scheme.name().c_str(), lower, total,
               worst_site.empty() ? "" : ", worst ", worst_site.c_str(), deg_t, deg_b)};
}

// A10: offline smoothing leaves the full-precision function unchanged,
// verified on the 64-bit path where rounding noise cannot mask a bug.
Outcome a10(Ctx& c) {
  ensure_corpus(c);
  double t0 = now_s();
  ModelConfig mc = desk_config(c, false, false).model;
  ModelWeights<float> w = init_weights<float>(mc);

  QuantScheme scheme = scheme_from_name("W8TA8T");
  CorpusSplit split = split_corpus(c.corpus, mc.context);
  std::vector<Batch> calib = first_train_batches(c.corpus, split, 4, 4);
  CalibrationStats stats = calibrate_static(w, scheme, calib);
  SmoothResult sm = smooth_offline(w, stats, 0.5);

  Batch probe = val_batches(c.corpus, split, 4).front();
  ModelWeights<double> wd = widen(w);
  ModelWeights<double> wsd = widen(sm.w);

  ForwardOut<double> base = forward(wd, probe);

  ForwardHooks hooks;
  hooks.at_activation_f64 = [&](const std::string& site, double* p, size_t rows, size_t d) {
    auto it = sm.act_divisors.find(site);
    if (it == sm.act_divisors.end()) return;
    const std::vector<double>& div = it->second;
    for (size_t r = 0; r < rows; ++r)
      for (size_t j = 0; j < d; ++j) p[r * d + j] /= div[j];
  };
  ForwardOpts<double> opts;
  opts.hooks = &hooks;
  ForwardOut<double> smoothed = forward(wsd, probe, opts);

  const std::vector<double>& a = base.logits.data();
  const std::vector<double>& b = smoothed.logits.data();
  double peak = 0, worst = 0;
  for (double v : a) peak = std::max(peak, std::fabs(v));
  for (size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::fabs(a[i] - b[i]));
  double rel = worst / std::max(peak, 1e-12);
  double secs = now_s() - t0;
  bool pass = rel <= kSmoothRelTol && secs <= kBudget.at("A10");
  return {pass, secs,
          strf("alpha 0.5 over %zu smoothed sites: worst logit drift %.3g of peak %.3g "
               "(rel %.3g <= %g)",
               sm.act_divisors.size(), worst, peak, rel, kSmoothRelTol)};
}

// A11: the stethoscope separates weight-borne outliers (survive random data)
// from data-borne ones (vanish under random weights).
Outcome a11(Ctx& c) {
  RunInfo pb = ensure_run(c, "desk_base_planted", desk_config(c, false, true));
  double t0 = now_s();
  LoadedModel lm = load_model(pb.ckpt);

  CorpusSplit split = split_corpus(c.corpus, lm.w.cfg.context);
  std::vector<Batch> probes = val_batches(c.corpus, split, 4);
  if (probes.size() > 4) probes.resize(4);
  for (Batch& b : probes) b.y.clear();

  StethoscopeCell real = stethoscope_run(lm.w, probes, DataMode::REAL, 77, "trained+real");
  StethoscopeCell gauss =
      stethoscope_run(lm.w, probes, DataMode::RANDOM_GAUSSIAN, 77, "trained+gauss");

  ModelConfig rc = lm.w.cfg;
  rc.seed = 1234;
  rc.plant_layer = -1;
  ModelWeights<float> wr = init_weights<float>(rc);
  StethoscopeCell rnd = stethoscope_run(wr, probes, DataMode::REAL, 77, "random_init+real");

  double near = std::max(real.global_peak, gauss.global_peak) /
                std::max(1e-12, std::min(real.global_peak, gauss.global_peak));
  double far = real.global_peak / std::max(1e-12, rnd.global_peak);
  double secs = now_s() - t0;
  bool pass = near <= kNearRatio && far >= kFarRatio && secs <= kBudget.at("A11");
  return {pass, secs,
          strf("peaks: trained+real %.1f, trained+gauss %.1f (x%.2f <= %g), "
               "random_init+real %.2f (%.1fx smaller >= %g)",
               real.global_peak, gauss.global_peak, near, kNearRatio, rnd.global_peak, far,
               kFarRatio)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance suite"};
  std::string work = "acceptance_work";
  std::string only;
  app.add_option("--work", work, "cache directory for trained runs");
  app.add_option("--only", only, "comma-separated criteria ids, e.g. A1,A6");
  CLI11_PARSE(app, argc, argv);

  Ctx ctx;
  ctx.work = work;
  fs::create_directories(work);

  using Fn = std::function<Outcome(Ctx&)>;
  const std::vector<std::pair<std::string, Fn>> table = {
      {"A1", a1}, {"A2", a2}, {"A3", a3},   {"A4", a4},   {"A5", a5},  {"A6", a6},
      {"A7", a7}, {"A8", a8}, {"A9", a9},   {"A10", a10}, {"A11", a11}};

  std::set<std::string> wanted;
  if (!only.empty()) {
    std::stringstream ss(only);
    std::string id;
    while (std::getline(ss, id, ',')) wanted.insert(id);
    for (const std::string& w : wanted) {
      bool known = false;
      for (const auto& [k, fn] : table) known = known || k == w;
      if (!known) {
        std::fprintf(stderr, "unknown criterion id %s\n", w.c_str());
        return 1;
      }
    }
  }

  size_t passed = 0, ran = 0;
  for (const auto& [id, fn] : table) {
    if (!wanted.empty() && !wanted.count(id)) continue;
    ++ran;
    Outcome oc;
    double t0 = now_s();
    try {
      oc = fn(ctx);
    } catch (const std::exception& e) {
      oc = {false, now_s() - t0, strf("exception: %s", e.what())};
    }
    passed += oc.pass ? 1 : 0;
    std::printf("%-4s %-4s %8.1fs  %s\n", id.c_str(), oc.pass ? "PASS" : "FAIL", oc.secs,
                oc.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("acceptance: %zu/%zu passed\n", passed, ran);
  return passed == ran ? 0 : 1;
}
