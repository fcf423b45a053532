#include "tweo/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "tweo/config_file.hpp"
#include "tweo/corpus.hpp"
#include "tweo/diagnostics.hpp"
#include "tweo/quantizer.hpp"
#include "tweo/report.hpp"
#include "tweo/serialize.hpp"
#include "tweo/svd.hpp"
#include "tweo/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace tweo {

namespace {

void write_json_file(const std::string& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(strf("cannot write %s", path.c_str()));
  out << j.dump(2) << "\n";
}

// Every artifact under the output directory, content-hashed, in path order.
void write_manifest(const std::string& out_dir, const std::string& command,
                    const json& inputs) {
  std::vector<std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(out_dir))
    if (e.is_regular_file() && e.path().filename() != "run.json")
      files.push_back(fs::relative(e.path(), out_dir).generic_string());
  std::sort(files.begin(), files.end());

  json j;
  j["command"] = command;
  j["inputs"] = inputs;
  json arts = json::array();
  for (const std::string& rel : files) {
    uint64_t h = file_fnv1a64((fs::path(out_dir) / rel).string());
    arts.push_back({{"path", rel}, {"fnv64", strf("%016llx", (unsigned long long)h)}});
  }
  j["artifacts"] = arts;
  write_json_file(out_dir + "/run.json", j);
}

ModelWeights<float> load_checkpoint_for_bytes(const std::string& dir) {
  LoadedModel lm = load_model(dir);
  if (lm.w.cfg.vocab < kByteVocab)
    throw ContractError(strf("checkpoint %s has vocab %zu; byte-level data needs %zu",
                             dir.c_str(), lm.w.cfg.vocab, kByteVocab));
  return std::move(lm.w);
}

std::vector<Batch> train_split_batches(const Corpus& c, const CorpusSplit& split,
                                       size_t batch_size, size_t max_batches) {
  std::vector<Batch> out;
  for (size_t i = 0; i + 1 <= split.train_blocks.size() && out.size() < max_batches;
       i += batch_size) {
    const size_t hi = std::min(i + batch_size, split.train_blocks.size());
    std::vector<size_t> blocks(split.train_blocks.begin() + i, split.train_blocks.begin() + hi);
    out.push_back(assemble_batch(c, split.seq_len, blocks));
  }
  if (out.empty()) throw ContractError("no calibration batches available");
  return out;
}

json calibration_to_json(const CalibrationStats& st) {
  json sites = json::object();
  for (const auto& [name, sc] : st.sites)
    sites[name] = {{"amax", sc.amax},
                   {"batches", sc.batches},
                   {"channel_amax", sc.channel_amax}};
  return json{{"batches", st.batches}, {"sites", sites}};
}

CalibrationStats calibration_from_json(const json& j) {
  CalibrationStats st;
  st.batches = j.at("batches").get<size_t>();
  for (const auto& [name, sc] : j.at("sites").items()) {
    SiteCalibration s;
    s.amax = sc.at("amax").get<double>();
    s.batches = sc.at("batches").get<size_t>();
    s.channel_amax = sc.at("channel_amax").get<std::vector<double>>();
    st.sites[name] = std::move(s);
  }
  return st;
}

json site_errors_to_json(const std::map<std::string, SiteError>& m) {
  json out = json::object();
  for (const auto& [site, se] : m)
    out[site] = {{"mse", se.mse}, {"amax", se.amax}, {"scale", se.scale}, {"elems", se.elems}};
  return out;
}

// ----------------------------- train -----------------------------

struct TrainArgs {
  std::string config, corpus, out;
  std::vector<std::string> sets;
};

int cmd_train(const TrainArgs& a) {
  ConfigMap cm;
  if (!a.config.empty()) cm = load_config_file(a.config);
  RunConfig rc = build_run_config(cm, a.sets);
  if (!a.corpus.empty()) rc.corpus_path = a.corpus;
  rc.out_dir = a.out;
  if (rc.corpus_path.empty())
    throw ContractError("no corpus given (use --corpus or data.corpus in the config)");

  size_t printed = 0;
  ProgressFn progress = [&](const TelemetryRecord& r) {
    if (printed++ % 10 == 0)
      std::fprintf(stderr, "step %zu  task %.4f  reg %.4g  peak %.3f  lr %.3g\n", r.step,
                   r.task_loss, r.tweo_loss, r.global_peak, r.lr);
  };
  TrainResult res = train(rc, nullptr, progress);

  json inputs = {{"config", a.config}, {"corpus", rc.corpus_path}, {"overrides", a.sets}};
  write_manifest(a.out, "train", inputs);

  std::printf("steps %zu  final task loss %.5f  val ppl %.4f  peak %.4f\n", res.steps_done,
              res.final_train_loss, res.final_eval.ppl, res.final_peak);
  if (res.collapsed) {
    std::fprintf(stderr, "run collapsed at step %zu (site %s, amax %.4g)\n",
                 res.collapse.step, res.collapse.site.c_str(), res.collapse.amax);
    json trailer = {{"error", "collapse"},
                    {"message", res.collapse.what()},
                    {"step", res.collapse.step},
                    {"site", res.collapse.site},
                    {"exit", 2}};
    std::fprintf(stderr, "%s\n", trailer.dump().c_str());
    return 2;
  }
  return 0;
}

// ----------------------------- eval -----------------------------

struct EvalArgs {
  std::string checkpoint, corpus, out;
  size_t batch_size = 16, batches = 0;
};

int cmd_eval(const EvalArgs& a) {
  ModelWeights<float> w = load_checkpoint_for_bytes(a.checkpoint);
  Corpus c = load_corpus(a.corpus);
  CorpusSplit split = split_corpus(c, w.cfg.context);
  std::vector<Batch> vb = val_batches(c, split, a.batch_size);
  if (a.batches > 0 && vb.size() > a.batches) vb.resize(a.batches);
  EvalResult er = evaluate(w, vb);

  json j = {{"mean_nll", er.mean_nll}, {"ppl", er.ppl}, {"tokens", er.tokens}};
  std::printf("%s\n", j.dump().c_str());
  if (!a.out.empty()) {
    fs::create_directories(a.out);
    write_json_file(a.out + "/eval.json", j);
    write_manifest(a.out, "eval", {{"checkpoint", a.checkpoint}, {"corpus", a.corpus}});
  }
  return 0;
}

// ----------------------------- stethoscope -----------------------------

struct StethArgs {
  std::string checkpoint, corpus, out;
  size_t batches = 4, batch_size = 8;
  uint64_t seed = 7;
};

int cmd_stethoscope(const StethArgs& a) {
  ModelWeights<float> w = load_checkpoint_for_bytes(a.checkpoint);
  Corpus c = load_corpus(a.corpus);
  CorpusSplit split = split_corpus(c, w.cfg.context);
  std::vector<Batch> probes = val_batches(c, split, a.batch_size);
  if (probes.size() > a.batches) probes.resize(a.batches);

  ModelWeights<float> fresh = init_weights<float>(w.cfg);  // same shape, untrained

  std::vector<StethoscopeCell> cells;
  cells.push_back(stethoscope_run(w, probes, DataMode::REAL, a.seed, "trained+real"));
  cells.push_back(
      stethoscope_run(w, probes, DataMode::RANDOM_GAUSSIAN, a.seed, "trained+gauss"));
  cells.push_back(stethoscope_run(fresh, probes, DataMode::REAL, a.seed, "random_init+real"));

  fs::create_directories(a.out);
  json jc = json::array();
  for (const auto& cell : cells)
    jc.push_back({{"label", cell.label},
                  {"per_layer_peak", cell.per_layer_peak},
                  {"global_peak", cell.global_peak}});
  write_json_file(a.out + "/stethoscope.json", {{"cells", jc}});

  std::vector<std::string> headers = {"layer"};
  std::vector<std::vector<double>> cols(1);
  for (size_t l = 0; l < w.cfg.n_layers; ++l) cols[0].push_back(double(l));
  for (const auto& cell : cells) {
    headers.push_back(cell.label);
    cols.push_back(cell.per_layer_peak);
  }
  write_csv(a.out + "/stethoscope.csv", headers, cols);
  write_manifest(a.out, "stethoscope",
                 {{"checkpoint", a.checkpoint}, {"corpus", a.corpus}, {"seed", a.seed}});

  for (const auto& cell : cells)
    std::printf("%-18s global peak %.5f\n", cell.label.c_str(), cell.global_peak);
  return 0;
}

// ----------------------------- svd-diagnose -----------------------------

struct SvdArgs {
  std::string checkpoint, corpus, out, act = "gelu";
  long long layer = 0;
  long long row = -1;  // -1 = pick the row with the largest dominant term
  long long token = -1;
  size_t budget = 8, screen_top = 8;
};

int cmd_svd_diagnose(const SvdArgs& a) {
  ModelWeights<float> w = load_checkpoint_for_bytes(a.checkpoint);
  if (a.layer < 0 || size_t(a.layer) >= w.cfg.n_layers)
    throw ContractError(strf("layer %lld out of range [0, %zu)", a.layer, w.cfg.n_layers));
  ProbeActivation act = probe_activation_from_name(a.act);

  // Probe stream: the MLP input at one token of a real validation sequence.
  Corpus c = load_corpus(a.corpus);
  CorpusSplit split = split_corpus(c, w.cfg.context);
  Batch probe = assemble_batch(c, split.seq_len, {split.val_blocks.front()});
  probe.y.clear();

  const std::string want_site = strf("layer%lld.mlp_in", a.layer);
  std::vector<double> x;
  size_t token = a.token < 0 ? probe.T - 1 : size_t(a.token);
  if (token >= probe.T) throw ContractError(strf("token %zu out of range [0, %zu)", token, probe.T));
  ForwardHooks hooks;
  hooks.at_activation = [&](const std::string& site, float* p, size_t rows, size_t d) {
    if (site != want_site) return;
    if (token >= rows) throw ContractError("probe token index out of range");
    x.assign(p + token * d, p + (token + 1) * d);
  };
  ForwardOpts<float> opts;
  opts.hooks = &hooks;
  forward(w, probe, opts);
  if (x.empty()) throw ContractError(strf("site %s never fired", want_site.c_str()));

  const BlockWeights<float>& blk = w.blocks[size_t(a.layer)];
  const size_t d2 = blk.up_w.dim(0), d1 = blk.up_w.dim(1);
  const size_t d1b = blk.down_w.dim(0);
  std::vector<double> up(blk.up_w.data().begin(), blk.up_w.data().end());
  std::vector<double> down(blk.down_w.data().begin(), blk.down_w.data().end());

  std::vector<RowScreenEntry> screened =
      screen_rows(up.data(), d2, d1, down.data(), d1b, x.data(), act);

  long long row = a.row >= 0 ? a.row : (long long)screened.front().row;
  if (row < 0 || size_t(row) >= d1b)
    throw ContractError(strf("row %lld out of range [0, %zu)", row, d1b));
  std::vector<double> wrow(down.begin() + row * (long long)d2,
                           down.begin() + (row + 1) * (long long)d2);

  ColinearityReport rep = svd_colinearity(up.data(), d2, d1, wrow.data(), x.data(), act,
                                          a.budget);
  rep.layer = a.layer;
  rep.row = row;

  json jt = json::array();
  for (const auto& t : rep.triples)
    jt.push_back({{"s", t.s}, {"w_u", t.w_u}, {"v_x", t.v_x}, {"product", t.product}});
  json js = json::array();
  for (size_t i = 0; i < std::min(a.screen_top, screened.size()); ++i)
    js.push_back({{"row", screened[i].row},
                  {"dominant", screened[i].dominant},
                  {"true_act", screened[i].true_act}});
  json j = {{"layer", rep.layer},
            {"row", rep.row},
            {"act", probe_activation_name(rep.act)},
            {"token", token},
            {"triples", jt},
            {"sum_linear", rep.sum_linear},
            {"direct_linear", rep.direct_linear},
            {"dominant", rep.dominant},
            {"dominant_i", rep.dominant_i},
            {"dominant_share", rep.dominant_share},
            {"sim_act", rep.sim_act},
            {"true_act", rep.true_act},
            {"rel_err_linear", rep.rel_err_linear},
            {"rel_err_act", rep.rel_err_act},
            {"screened", js}};
  std::printf("%s\n", j.dump(2).c_str());
  if (!a.out.empty()) {
    fs::create_directories(a.out);
    write_json_file(a.out + "/colinearity.json", j);
    write_manifest(a.out, "svd-diagnose",
                   {{"checkpoint", a.checkpoint},
                    {"corpus", a.corpus},
                    {"layer", a.layer},
                    {"row", row}});
  }
  return 0;
}

// ----------------------------- calibrate -----------------------------

struct CalibArgs {
  std::string checkpoint, corpus, out, scheme = "W8TA8T";
  size_t batches = 8, batch_size = 8;
};

int cmd_calibrate(const CalibArgs& a) {
  ModelWeights<float> w = load_checkpoint_for_bytes(a.checkpoint);
  QuantScheme scheme = scheme_from_name(a.scheme);
  Corpus c = load_corpus(a.corpus);
  CorpusSplit split = split_corpus(c, w.cfg.context);
  std::vector<Batch> cb = train_split_batches(c, split, a.batch_size, a.batches);
  CalibrationStats st = calibrate_static(w, scheme, cb);

  fs::create_directories(a.out);
  json j = calibration_to_json(st);
  j["scheme"] = scheme.name();
  write_json_file(a.out + "/calibration.json", j);
  write_manifest(a.out, "calibrate",
                 {{"checkpoint", a.checkpoint},
                  {"corpus", a.corpus},
                  {"scheme", scheme.name()},
                  {"batches", a.batches}});
  std::printf("calibrated %zu sites over %zu batches\n", st.sites.size(), st.batches);
  return 0;
}

// ----------------------------- quantize -----------------------------

struct QuantArgs {
  std::vector<std::string> checkpoints;
  std::string corpus, out, scheme = "W8TA8T", calibration;
  bool residual = false;
  size_t calib_batches = 8, eval_batches = 16, batch_size = 8;
  double smooth_alpha = -1.0;  // < 0 = smoothing off
};

int cmd_quantize(const QuantArgs& a) {
  QuantScheme scheme = scheme_from_name(a.scheme);
  if (a.residual) scheme.quantize_residual = true;
  Corpus c = load_corpus(a.corpus);

  fs::create_directories(a.out);
  json jruns = json::array();
  struct Column {
    std::string label;
    std::map<std::string, SiteError> sites;
    double ppl_before = 0, ppl_after = 0;
  };
  std::vector<Column> cols;

  for (const std::string& ckpt : a.checkpoints) {
    ModelWeights<float> w = load_checkpoint_for_bytes(ckpt);
    CorpusSplit split = split_corpus(c, w.cfg.context);
    std::vector<Batch> vb = val_batches(c, split, a.batch_size);
    if (a.eval_batches > 0 && vb.size() > a.eval_batches) vb.resize(a.eval_batches);

    CalibrationStats stats;
    bool have_stats = false;
    const bool needs_stats =
        scheme.a_bits != 32 && scheme.a_gran == QuantGran::PER_TENSOR;
    if (!a.calibration.empty()) {
      std::ifstream in(a.calibration);
      if (!in) throw IoError(strf("cannot open calibration file %s", a.calibration.c_str()));
      json j = json::parse(in, nullptr, true, true);
      stats = calibration_from_json(j);
      have_stats = true;
    } else if (needs_stats || a.smooth_alpha >= 0.0) {
      std::vector<Batch> cb = train_split_batches(c, split, a.batch_size, a.calib_batches);
      stats = calibrate_static(w, scheme, cb);
      have_stats = true;
    }

    EvalResult before = evaluate(w, vb);

    QuantEvalOptions qo;
    if (have_stats) qo.stats = &stats;
    SmoothResult smoothed;
    const ModelWeights<float>* target = &w;
    if (a.smooth_alpha >= 0.0) {
      smoothed = smooth_offline(w, stats, a.smooth_alpha);
      qo.act_divisors = &smoothed.act_divisors;
      target = &smoothed.w;
    }
    QuantEvalResult qr = fake_quant_eval(*target, scheme, vb, qo);

    std::string label = fs::path(ckpt).filename().string();
    if (label.empty()) label = ckpt;
    jruns.push_back({{"checkpoint", ckpt},
                     {"label", label},
                     {"ppl_before", before.ppl},
                     {"mean_nll_before", before.mean_nll},
                     {"ppl_after", qr.ppl},
                     {"mean_nll_after", qr.mean_nll},
                     {"sites_per_forward", qr.sites_per_forward},
                     {"sites", site_errors_to_json(qr.site_errors)},
                     {"weights", site_errors_to_json(qr.weight_errors)}});
    cols.push_back({label, qr.site_errors, before.ppl, qr.ppl});
  }

  json j = {{"scheme", scheme.name()},
            {"smooth_alpha", a.smooth_alpha},
            {"eval_batches", a.eval_batches},
            {"calib_batches", a.calib_batches},
            {"runs", jruns}};
  write_json_file(a.out + "/quant_report.json", j);

  // Site-by-model MSE table, metrics appended as extra rows.
  {
    std::ofstream t(a.out + "/quant_table.csv", std::ios::trunc);
    if (!t) throw IoError(strf("cannot write %s/quant_table.csv", a.out.c_str()));
    t << "site";
    for (const Column& col : cols) t << "," << col.label;
    t << "\n";
    std::vector<std::string> site_names;
    if (!cols.empty())
      for (const auto& [site, se] : cols[0].sites) site_names.push_back(site);
    for (const std::string& site : site_names) {
      t << site;
      for (const Column& col : cols) {
        auto it = col.sites.find(site);
        t << "," << strf("%.10g", it == col.sites.end() ? 0.0 : it->second.mse);
      }
      t << "\n";
    }
    t << "ppl_before";
    for (const Column& col : cols) t << "," << strf("%.10g", col.ppl_before);
    t << "\nppl_after";
    for (const Column& col : cols) t << "," << strf("%.10g", col.ppl_after);
    t << "\n";
  }

  write_manifest(a.out, "quantize",
                 {{"checkpoints", a.checkpoints},
                  {"corpus", a.corpus},
                  {"scheme", scheme.name()},
                  {"residual", a.residual},
                  {"smooth_alpha", a.smooth_alpha},
                  {"calibration", a.calibration}});
  for (const Column& col : cols)
    std::printf("%-20s ppl %.4f -> %.4f\n", col.label.c_str(), col.ppl_before, col.ppl_after);
  return 0;
}

// ----------------------------- report -----------------------------

struct ReportArgs {
  std::vector<std::string> runs;
  std::string out;
  size_t bins = 64;
};

int cmd_report(const ReportArgs& a) {
  fs::create_directories(a.out);

  std::vector<Series> peak_series, loss_series, reg_series;
  for (const std::string& dir : a.runs) {
    std::string label = fs::path(dir).filename().string();
    if (label.empty()) label = dir;
    std::vector<TelemetryRecord> recs = read_telemetry(dir + "/telemetry.jsonl");
    if (recs.empty()) throw IoError(strf("telemetry log in %s is empty", dir.c_str()));

    Series peaks{label, {}, {}}, loss{label, {}, {}}, reg{label + " reg", {}, {}};
    size_t layers = recs.front().layer_top1.size();
    std::vector<std::vector<double>> cols(2 + layers + 2);
    for (const TelemetryRecord& r : recs) {
      peaks.x.push_back(double(r.step));
      peaks.y.push_back(r.global_peak);
      loss.x.push_back(double(r.step));
      loss.y.push_back(r.task_loss);
      reg.x.push_back(double(r.step));
      reg.y.push_back(r.tweo_loss);
      cols[0].push_back(double(r.step));
      cols[1].push_back(r.global_peak);
      for (size_t l = 0; l < layers; ++l)
        cols[2 + l].push_back(l < r.layer_top1.size() ? r.layer_top1[l] : 0.0);
      cols[2 + layers].push_back(r.task_loss);
      cols[3 + layers].push_back(r.tweo_loss);
    }
    std::vector<std::string> headers = {"step", "global_peak"};
    for (size_t l = 0; l < layers; ++l) headers.push_back(strf("layer%zu_top1", l));
    headers.push_back("task_loss");
    headers.push_back("tweo_loss");
    write_csv(strf("%s/%s_telemetry.csv", a.out.c_str(), label.c_str()), headers, cols);

    peak_series.push_back(std::move(peaks));
    loss_series.push_back(std::move(loss));
    reg_series.push_back(std::move(reg));

    // histogram grid from dumped taps, when the run saved any
    for (const auto& e : fs::directory_iterator(dir)) {
      if (!e.is_directory()) continue;
      std::string name = e.path().filename().string();
      if (name.rfind("taps_step", 0) != 0) continue;
      for (const auto& tf : fs::directory_iterator(e.path())) {
        if (tf.path().extension() != ".tnsr") continue;
        LoadedTensor lt = load_tnsr(tf.path().string());
        if (lt.dtype != 0) continue;
        HistogramReport h = activation_histogram(lt.f32.data(), lt.f32.size(), a.bins);
        std::string stem = tf.path().stem().string();
        std::string base = strf("%s/%s_%s_%s", a.out.c_str(), label.c_str(), name.c_str(),
                                stem.c_str());
        std::vector<std::vector<double>> hcols(3);
        for (size_t b = 0; b < h.counts.size(); ++b) {
          hcols[0].push_back(h.edges[b]);
          hcols[1].push_back(h.edges[b + 1]);
          hcols[2].push_back(double(h.counts[b]));
        }
        write_csv(base + "_hist.csv", {"bin_lo", "bin_hi", "count"}, hcols);
        write_text_file(base + "_hist.svg",
                        svg_histogram(strf("%s %s %s", label.c_str(), name.c_str(),
                                           stem.c_str()),
                                      h));
      }
    }
  }

  write_text_file(a.out + "/peaks.svg",
                  svg_line_chart("Activation peak over training", "step", "peak",
                                 peak_series, true));
  write_text_file(a.out + "/loss.svg",
                  svg_line_chart("Task loss", "step", "loss", loss_series, false));
  write_text_file(a.out + "/regularizer.svg",
                  svg_line_chart("Regularizer penalty", "step", "penalty", reg_series, true));
  write_manifest(a.out, "report", {{"runs", a.runs}});
  std::printf("report written to %s (%zu runs)\n", a.out.c_str(), a.runs.size());
  return 0;
}

int emit_trailer(const char* kind, const std::string& msg, int code) {
  std::fprintf(stderr, "error: %s\n", msg.c_str());
  json trailer = {{"error", kind}, {"message", msg}, {"exit", code}};
  std::fprintf(stderr, "%s\n", trailer.dump().c_str());
  return code;
}

}  // namespace

int cli_main(int argc, char** argv) {
  CLI::App app{"Outlier-aware training and quantization lab"};
  app.require_subcommand(1);

  TrainArgs ta;
  CLI::App* train_cmd = app.add_subcommand("train", "run a training job");
  train_cmd->add_option("--config", ta.config, "run config file");
  train_cmd->add_option("--set", ta.sets, "override, section.key=value (repeatable)");
  train_cmd->add_option("--corpus", ta.corpus, "byte corpus (overrides data.corpus)");
  train_cmd->add_option("--out", ta.out, "output directory")->required();

  EvalArgs ea;
  CLI::App* eval_cmd = app.add_subcommand("eval", "perplexity of a checkpoint");
  eval_cmd->add_option("--checkpoint", ea.checkpoint)->required();
  eval_cmd->add_option("--corpus", ea.corpus)->required();
  eval_cmd->add_option("--batch-size", ea.batch_size);
  eval_cmd->add_option("--batches", ea.batches, "0 = the whole validation split");
  eval_cmd->add_option("--out", ea.out, "optional output directory");

  StethArgs sa;
  CLI::App* steth_cmd =
      app.add_subcommand("stethoscope", "probe activation peaks under three input regimes");
  steth_cmd->add_option("--checkpoint", sa.checkpoint)->required();
  steth_cmd->add_option("--corpus", sa.corpus)->required();
  steth_cmd->add_option("--batches", sa.batches);
  steth_cmd->add_option("--batch-size", sa.batch_size);
  steth_cmd->add_option("--seed", sa.seed, "noise seed for the gaussian regime");
  steth_cmd->add_option("--out", sa.out)->required();

  SvdArgs va;
  CLI::App* svd_cmd =
      app.add_subcommand("svd-diagnose", "factor one MLP through its SVD triples");
  svd_cmd->add_option("--checkpoint", va.checkpoint)->required();
  svd_cmd->add_option("--corpus", va.corpus)->required();
  svd_cmd->add_option("--layer", va.layer)->required();
  svd_cmd->add_option("--row", va.row, "output row; -1 screens for the largest dominant");
  svd_cmd->add_option("--token", va.token, "probe token; -1 = last of the first val sequence");
  svd_cmd->add_option("--budget", va.budget, "triples to keep in the report");
  svd_cmd->add_option("--screen-top", va.screen_top);
  svd_cmd->add_option("--act", va.act, "gelu, silu, or identity");
  svd_cmd->add_option("--out", va.out, "optional output directory");

  CalibArgs ca;
  CLI::App* calib_cmd = app.add_subcommand("calibrate", "record per-site activation ranges");
  calib_cmd->add_option("--checkpoint", ca.checkpoint)->required();
  calib_cmd->add_option("--corpus", ca.corpus)->required();
  calib_cmd->add_option("--scheme", ca.scheme);
  calib_cmd->add_option("--batches", ca.batches);
  calib_cmd->add_option("--batch-size", ca.batch_size);
  calib_cmd->add_option("--out", ca.out)->required();

  QuantArgs qa;
  CLI::App* quant_cmd =
      app.add_subcommand("quantize", "fake-quantized eval of one or more checkpoints");
  quant_cmd->add_option("--checkpoint", qa.checkpoints, "repeatable")->required();
  quant_cmd->add_option("--corpus", qa.corpus)->required();
  quant_cmd->add_option("--scheme", qa.scheme, "e.g. W8TA8T, W4(C)A8(K)");
  quant_cmd->add_flag("--residual", qa.residual, "also quantize the residual stream");
  quant_cmd->add_option("--calibration", qa.calibration, "reuse a calibration.json");
  quant_cmd->add_option("--calib-batches", qa.calib_batches);
  quant_cmd->add_option("--eval-batches", qa.eval_batches);
  quant_cmd->add_option("--batch-size", qa.batch_size);
  quant_cmd->add_option("--smooth-alpha", qa.smooth_alpha, "offline smoothing; < 0 = off");
  quant_cmd->add_option("--out", qa.out)->required();

  ReportArgs ra;
  CLI::App* report_cmd = app.add_subcommand("report", "charts and tables from run dirs");
  report_cmd->add_option("--run", ra.runs, "run directory (repeatable)")->required();
  report_cmd->add_option("--bins", ra.bins, "histogram bins");
  report_cmd->add_option("--out", ra.out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    json trailer = {{"error", "usage"}, {"message", e.what()}, {"exit", rc ? rc : 1}};
    std::fprintf(stderr, "%s\n", trailer.dump().c_str());
    return rc ? rc : 1;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(ta);
    if (eval_cmd->parsed()) return cmd_eval(ea);
    if (steth_cmd->parsed()) return cmd_stethoscope(sa);
    if (svd_cmd->parsed()) return cmd_svd_diagnose(va);
    if (calib_cmd->parsed()) return cmd_calibrate(ca);
    if (quant_cmd->parsed()) return cmd_quantize(qa);
    if (report_cmd->parsed()) return cmd_report(ra);
  } catch (const CollapseSignal& cs) {
    return emit_trailer("collapse", cs.what(), 2);
  } catch (const ContractError& e) {
    return emit_trailer("contract", e.what(), 1);
  } catch (const DimError& e) {
    return emit_trailer("dim", e.what(), 1);
  } catch (const IoError& e) {
    return emit_trailer("io", e.what(), 1);
  } catch (const NumericError& e) {
    return emit_trailer("numeric", e.what(), 1);
  } catch (const std::exception& e) {
    return emit_trailer("internal", e.what(), 1);
  }
  return 0;
}

}  // namespace tweo
