#include "tweo/model.hpp"

#include <cmath>
#include <cstring>
#include <type_traits>

#include <json.hpp>

#include "tweo/common.hpp"
#include "tweo/ops.hpp"
#include "tweo/rng.hpp"
#include "tweo/serialize.hpp"

namespace tweo {

MlpKind mlp_kind_from_name(const std::string& name) {
  if (name == "gelu") return MlpKind::GELU_CLASSIC;
  if (name == "glu") return MlpKind::GLU;
  throw ContractError(strf("unknown mlp kind '%s' (expected gelu or glu)", name.c_str()));
}

const char* mlp_kind_name(MlpKind k) {
  return k == MlpKind::GELU_CLASSIC ? "gelu" : "glu";
}

void ModelConfig::validate() const {
  if (vocab < 2) throw ContractError("vocab must be at least 2");
  if (d_model == 0 || n_layers == 0 || n_heads == 0 || d_mlp == 0 || context == 0)
    throw ContractError("model dimensions must all be positive");
  if (d_model % n_heads != 0)
    throw ContractError(strf("d_model %zu is not divisible by n_heads %zu", d_model, n_heads));
  if (!(ln_eps > 0.0)) throw ContractError("ln_eps must be positive");
  if (plant_layer >= 0 && size_t(plant_layer) >= n_layers)
    throw ContractError(strf("plant_layer %d out of range for %zu layers", plant_layer, n_layers));
}

std::string config_to_json_string(const ModelConfig& cfg) {
  nlohmann::json j;
  j["vocab"] = cfg.vocab;
  j["d_model"] = cfg.d_model;
  j["n_layers"] = cfg.n_layers;
  j["n_heads"] = cfg.n_heads;
  j["d_mlp"] = cfg.d_mlp;
  j["context"] = cfg.context;
  j["mlp"] = mlp_kind_name(cfg.mlp);
  j["ln_eps"] = cfg.ln_eps;
  j["seed"] = cfg.seed;
  j["plant_layer"] = cfg.plant_layer;
  j["plant_amplitude"] = cfg.plant_amplitude;
  j["plant_bias"] = cfg.plant_bias;
  return j.dump();
}

ModelConfig config_from_json_string(const std::string& text) {
  try {
    nlohmann::json j = nlohmann::json::parse(text);
    ModelConfig cfg;
    cfg.vocab = j.at("vocab").get<size_t>();
    cfg.d_model = j.at("d_model").get<size_t>();
    cfg.n_layers = j.at("n_layers").get<size_t>();
    cfg.n_heads = j.at("n_heads").get<size_t>();
    cfg.d_mlp = j.at("d_mlp").get<size_t>();
    cfg.context = j.at("context").get<size_t>();
    cfg.mlp = mlp_kind_from_name(j.at("mlp").get<std::string>());
    cfg.ln_eps = j.at("ln_eps").get<double>();
    cfg.seed = j.at("seed").get<uint64_t>();
    cfg.plant_layer = j.value("plant_layer", -1);
    cfg.plant_amplitude = j.value("plant_amplitude", 900.0);
    cfg.plant_bias = j.value("plant_bias", 5.0);
    cfg.validate();
    return cfg;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(strf("bad model config json: %s", e.what()));
  }
}

// ----------------------------- parameters -----------------------------

template <typename T>
ModelWeights<T> make_weights(const ModelConfig& cfg) {
  cfg.validate();
  const size_t D = cfg.d_model, V = cfg.vocab, M = cfg.d_mlp;
  ModelWeights<T> w;
  w.cfg = cfg;
  w.wte = Tensor<T>::zeros({V, D});
  w.wpe = Tensor<T>::zeros({cfg.context, D});
  w.blocks.resize(cfg.n_layers);
  for (auto& b : w.blocks) {
    b.ln1_g = Tensor<T>::zeros({D});
    b.ln1_b = Tensor<T>::zeros({D});
    b.qkv_w = Tensor<T>::zeros({3 * D, D});
    b.qkv_b = Tensor<T>::zeros({3 * D});
    b.out_w = Tensor<T>::zeros({D, D});
    b.out_b = Tensor<T>::zeros({D});
    b.ln2_g = Tensor<T>::zeros({D});
    b.ln2_b = Tensor<T>::zeros({D});
    b.up_w = Tensor<T>::zeros({M, D});
    b.up_b = Tensor<T>::zeros({M});
    if (cfg.mlp == MlpKind::GLU) {
      b.gate_w = Tensor<T>::zeros({M, D});
      b.gate_b = Tensor<T>::zeros({M});
    }
    b.down_w = Tensor<T>::zeros({D, M});
    b.down_b = Tensor<T>::zeros({D});
  }
  w.lnf_g = Tensor<T>::zeros({D});
  w.lnf_b = Tensor<T>::zeros({D});
  w.head_w = Tensor<T>::zeros({V, D});
  w.head_b = Tensor<T>::zeros({V});
  return w;
}

template <typename T>
ModelWeights<T> init_weights(const ModelConfig& cfg) {
  ModelWeights<T> w = make_weights<T>(cfg);
  Rng rng(cfg.seed);
  const double sd = 0.02;
  const double resid_sd = sd / std::sqrt(2.0 * double(cfg.n_layers));
  auto fill = [&](Tensor<T>& t, double s) {
    for (auto& v : t.mut_data()) v = T(rng.normal(0.0, s));
  };
  auto ones = [](Tensor<T>& t) {
    for (auto& v : t.mut_data()) v = T(1);
  };
  // Fixed draw order; changing it silently changes every seeded run.
  fill(w.wte, sd);
  fill(w.wpe, sd);
  for (auto& b : w.blocks) {
    ones(b.ln1_g);
    fill(b.qkv_w, sd);
    fill(b.out_w, resid_sd);
    ones(b.ln2_g);
    fill(b.up_w, sd);
    if (cfg.mlp == MlpKind::GLU) fill(b.gate_w, sd);
    fill(b.down_w, resid_sd);
  }
  ones(w.lnf_g);
  fill(w.head_w, sd);
  return w;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> ModelWeights<T>::named() const {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  out.emplace_back("wte", wte);
  out.emplace_back("wpe", wpe);
  for (size_t i = 0; i < blocks.size(); ++i) {
    const auto& b = blocks[i];
    auto p = [&](const char* leaf, const Tensor<T>& t) {
      out.emplace_back(strf("block%zu.%s", i, leaf), t);
    };
    p("ln1_g", b.ln1_g);
    p("ln1_b", b.ln1_b);
    p("qkv_w", b.qkv_w);
    p("qkv_b", b.qkv_b);
    p("out_w", b.out_w);
    p("out_b", b.out_b);
    p("ln2_g", b.ln2_g);
    p("ln2_b", b.ln2_b);
    p("up_w", b.up_w);
    p("up_b", b.up_b);
    if (cfg.mlp == MlpKind::GLU) {
      p("gate_w", b.gate_w);
      p("gate_b", b.gate_b);
    }
    p("down_w", b.down_w);
    p("down_b", b.down_b);
  }
  out.emplace_back("lnf_g", lnf_g);
  out.emplace_back("lnf_b", lnf_b);
  out.emplace_back("head_w", head_w);
  out.emplace_back("head_b", head_b);
  return out;
}

template <typename T>
void ModelWeights<T>::set_requires_grad(bool rg) {
  for (auto& [name, t] : named()) t.set_requires_grad(rg);
}

template <typename T>
void ModelWeights<T>::zero_grads() {
  for (auto& [name, t] : named()) t.zero_grad();
}

template <typename T>
size_t ModelWeights<T>::param_count() const {
  size_t n = 0;
  for (const auto& [name, t] : named()) n += t.numel();
  return n;
}

template <typename T>
ModelWeights<double> widen(const ModelWeights<T>& w) {
  ModelWeights<double> out = make_weights<double>(w.cfg);
  auto src = w.named();
  auto dst = out.named();
  for (size_t i = 0; i < src.size(); ++i) {
    const auto& sv = src[i].second.data();
    auto& dv = dst[i].second.mut_data();
    for (size_t k = 0; k < sv.size(); ++k) dv[k] = double(sv[k]);
  }
  return out;
}

// ----------------------------- sites -----------------------------

std::vector<std::string> activation_sites(const ModelConfig& cfg) {
  std::vector<std::string> s;
  for (size_t l = 0; l < cfg.n_layers; ++l) {
    s.push_back(strf("layer%zu.attn_in", l));
    s.push_back(strf("layer%zu.attn_ctx", l));
    s.push_back(strf("layer%zu.mlp_in", l));
    s.push_back(strf("layer%zu.mlp_act", l));
  }
  s.push_back("lm_in");
  return s;
}

std::vector<std::string> residual_sites(const ModelConfig& cfg) {
  std::vector<std::string> s;
  for (size_t l = 0; l < cfg.n_layers; ++l) s.push_back(strf("layer%zu.resid", l));
  return s;
}

Fp8ModelState Fp8ModelState::make(const ModelConfig& cfg, const fp8::Fp8Config& fc) {
  Fp8ModelState s;
  const size_t per = cfg.mlp == MlpKind::GLU ? 5 : 4;
  s.linears.assign(cfg.n_layers * per + 1,
                   fp8::LinearFp8States(fc.history, fc.margin, fc.grad_margin));
  s.lns.assign(cfg.n_layers * 2 + 1, LnFp8States(fc.history, fc.margin));
  return s;
}

// ----------------------------- forward -----------------------------

template <typename T>
ForwardOut<T> forward(const ModelWeights<T>& w, const Batch& batch, const ForwardOpts<T>& opts) {
  const ModelConfig& cfg = w.cfg;
  const size_t B = batch.B, Tn = batch.T, D = cfg.d_model, H = cfg.n_heads, L = cfg.n_layers;
  if (B == 0 || Tn == 0 || batch.x.size() != B * Tn)
    throw DimError(strf("forward: batch of %zu ids does not match B=%zu T=%zu", batch.x.size(),
                        B, Tn));
  if (Tn > cfg.context)
    throw DimError(strf("forward: sequence length %zu exceeds context %zu", Tn, cfg.context));
  const bool fp8_on = opts.fp8 != nullptr || opts.fp8_ctx != nullptr;
  if (fp8_on && (opts.fp8 == nullptr || opts.fp8_ctx == nullptr))
    throw ContractError("forward: fp8 states and run context must be passed together");
  if constexpr (!std::is_same_v<T, float>) {
    if (fp8_on) throw ContractError("forward: emulated fp8 runs on the float instantiation");
  }
  if (opts.hooks) {
    for (const auto& [name, t] : w.named()) {
      if (t.requires_grad())
        throw ContractError("forward: activation hooks are only valid on no-grad passes");
    }
  }

  auto act_hook = [&](const std::string& site, Tensor<T>& t) {
    if constexpr (std::is_same_v<T, float>) {
      if (opts.hooks && opts.hooks->at_activation)
        opts.hooks->at_activation(site, t.mut_data().data(), t.dim(0), t.dim(1));
    } else {
      if (opts.hooks && opts.hooks->at_activation_f64)
        opts.hooks->at_activation_f64(site, t.mut_data().data(), t.dim(0), t.dim(1));
    }
  };
  auto resid_hook = [&](const std::string& site, Tensor<T>& t) {
    if constexpr (std::is_same_v<T, float>) {
      if (opts.hooks && opts.hooks->at_residual)
        opts.hooks->at_residual(site, t.mut_data().data(), t.dim(0), t.dim(1));
    } else {
      if (opts.hooks && opts.hooks->at_residual_f64)
        opts.hooks->at_residual_f64(site, t.mut_data().data(), t.dim(0), t.dim(1));
    }
  };
  auto apply_ln = [&](const Tensor<T>& x, const Tensor<T>& g, const Tensor<T>& b, size_t ln_idx,
                      const std::string& site) -> Tensor<T> {
    if constexpr (std::is_same_v<T, float>) {
      if (fp8_on) {
        auto& st = opts.fp8->lns.at(ln_idx);
        const fp8::Format f = opts.fp8_ctx->eff_fwd();
        auto xq = fp8::fp8_qdq_ste(x, st.in, f, *opts.fp8_ctx, site, "ln_in");
        auto gq = fp8::fp8_qdq_ste(g, st.gain, f, *opts.fp8_ctx, site, "ln_gain");
        auto bq = fp8::fp8_qdq_ste(b, st.bias, f, *opts.fp8_ctx, site, "ln_bias");
        return layer_norm(xq, gq, bq, cfg.ln_eps);
      }
    }
    (void)ln_idx;
    (void)site;
    return layer_norm(x, g, b, cfg.ln_eps);
  };
  auto apply_linear = [&](const Tensor<T>& x, const Tensor<T>& W, const Tensor<T>& b,
                          size_t lin_idx, const std::string& site) -> Tensor<T> {
    if constexpr (std::is_same_v<T, float>) {
      if (fp8_on)
        return fp8::fp8_linear(x, W, b, opts.fp8->linears.at(lin_idx), *opts.fp8_ctx, site);
    }
    (void)lin_idx;
    (void)site;
    return add_bias(matmul_nt(x, W), b);
  };

  ForwardOut<T> out;
  Tensor<T> x;
  if (opts.stream_override) {
    x = *opts.stream_override;
    if (x.rank() != 2 || x.dim(0) != B * Tn || x.dim(1) != D)
      throw DimError(strf("forward: stream override %s, expected [%zu,%zu]",
                          shape_str(x.shape()).c_str(), B * Tn, D));
  } else {
    Tensor<T> tok = embedding(w.wte, batch.x);
    std::vector<int32_t> pids(B * Tn);
    for (size_t b = 0; b < B; ++b) {
      for (size_t t = 0; t < Tn; ++t) pids[b * Tn + t] = int32_t(t);
    }
    Tensor<T> pos = embedding(w.wpe, pids);
    x = add(tok, pos);
  }
  out.embedded = x;

  const size_t per = cfg.mlp == MlpKind::GLU ? 5 : 4;
  const double att_scale = 1.0 / std::sqrt(double(cfg.head_dim()));
  for (size_t l = 0; l < L; ++l) {
    const auto& blk = w.blocks[l];
    const size_t lin0 = l * per;

    Tensor<T> h1 = apply_ln(x, blk.ln1_g, blk.ln1_b, 2 * l, strf("layer%zu.ln1", l));
    act_hook(strf("layer%zu.attn_in", l), h1);
    Tensor<T> qkv = apply_linear(h1, blk.qkv_w, blk.qkv_b, lin0 + 0, strf("layer%zu.qkv", l));
    Tensor<T> q = slice_cols(qkv, 0, D);
    Tensor<T> k = slice_cols(qkv, D, 2 * D);
    Tensor<T> v = slice_cols(qkv, 2 * D, 3 * D);
    Tensor<T> qh = to_heads(q, B, Tn, H);
    Tensor<T> kh = to_heads(k, B, Tn, H);
    Tensor<T> vh = to_heads(v, B, Tn, H);
    Tensor<T> scores = mul_scalar(batched_matmul_nt(qh, kh), T(att_scale));
    Tensor<T> probs = causal_softmax(scores);
    Tensor<T> ctx = from_heads(batched_matmul(probs, vh), B, Tn, H);
    act_hook(strf("layer%zu.attn_ctx", l), ctx);
    Tensor<T> ao =
        apply_linear(ctx, blk.out_w, blk.out_b, lin0 + 1, strf("layer%zu.attn_out", l));
    x = add(x, ao);
    if (opts.want_attn_stage) out.attn_stage.push_back(x);

    Tensor<T> h2 = apply_ln(x, blk.ln2_g, blk.ln2_b, 2 * l + 1, strf("layer%zu.ln2", l));
    act_hook(strf("layer%zu.mlp_in", l), h2);
    Tensor<T> a;
    if (cfg.mlp == MlpKind::GELU_CLASSIC) {
      Tensor<T> u = apply_linear(h2, blk.up_w, blk.up_b, lin0 + 2, strf("layer%zu.mlp_up", l));
      a = gelu(u);
    } else {
      Tensor<T> g =
          silu(apply_linear(h2, blk.gate_w, blk.gate_b, lin0 + 3, strf("layer%zu.mlp_gate", l)));
      Tensor<T> u = apply_linear(h2, blk.up_w, blk.up_b, lin0 + 2, strf("layer%zu.mlp_up", l));
      a = mul(g, u);
    }
    act_hook(strf("layer%zu.mlp_act", l), a);
    Tensor<T> m = apply_linear(a, blk.down_w, blk.down_b, lin0 + per - 1,
                               strf("layer%zu.mlp_down", l));
    x = add(x, m);
    // The tap observes the block output after the MLP residual add, before
    // any residual-stream post-processing a caller's hook may apply.
    if (opts.want_taps) out.taps.push_back(x);
    resid_hook(strf("layer%zu.resid", l), x);
  }

  Tensor<T> hf = apply_ln(x, w.lnf_g, w.lnf_b, 2 * L, "lnf");
  act_hook("lm_in", hf);
  out.logits = apply_linear(hf, w.head_w, w.head_b, L * per, "head");
  if (!batch.y.empty()) {
    if (batch.y.size() != B * Tn)
      throw DimError(strf("forward: %zu targets for %zu tokens", batch.y.size(), B * Tn));
    out.loss = softmax_xent_mean(out.logits, batch.y);
  }
  return out;
}

EvalResult evaluate(const ModelWeights<float>& w, const std::vector<Batch>& batches,
                    const ForwardHooks* hooks) {
  double nll_sum = 0.0;
  size_t tokens = 0;
  ForwardOpts<float> opts;
  opts.hooks = hooks;
  for (const auto& b : batches) {
    if (b.y.empty()) throw ContractError("evaluate: batch has no targets");
    ForwardOut<float> o = forward(w, b, opts);
    nll_sum += double(o.loss.item()) * double(b.x.size());
    tokens += b.x.size();
  }
  EvalResult r;
  r.tokens = tokens;
  if (tokens > 0) {
    r.mean_nll = nll_sum / double(tokens);
    r.ppl = std::exp(r.mean_nll);
  }
  return r;
}

// ----------------------------- checkpoints -----------------------------

void save_model(const std::string& dir, const ModelWeights<float>& w, size_t step) {
  NamedTensors nt;
  nt.items = w.named();
  save_named_tensors(dir, nt, config_to_json_string(w.cfg), step);
}

LoadedModel load_model(const std::string& dir) {
  LoadedCheckpoint lc = load_named_tensors(dir);
  LoadedModel lm;
  lm.step = size_t(lc.step);
  lm.w = make_weights<float>(config_from_json_string(lc.config_json));
  auto mine = lm.w.named();
  if (mine.size() != lc.tensors.items.size())
    throw IoError(strf("checkpoint at %s holds %zu tensors, model wants %zu", dir.c_str(),
                       lc.tensors.items.size(), mine.size()));
  for (auto& [name, t] : mine) {
    Tensor<float>* src = lc.tensors.find(name);
    if (!src) throw IoError(strf("checkpoint at %s is missing tensor '%s'", dir.c_str(),
                                 name.c_str()));
    if (src->shape() != t.shape())
      throw IoError(strf("checkpoint tensor '%s' is %s, model wants %s", name.c_str(),
                         shape_str(src->shape()).c_str(), shape_str(t.shape()).c_str()));
    t.mut_data() = src->data();
  }
  return lm;
}

#define TWEO_INSTANTIATE_MODEL(T)                                                   \
  template ModelWeights<T> make_weights<T>(const ModelConfig&);                     \
  template ModelWeights<T> init_weights<T>(const ModelConfig&);                     \
  template struct ModelWeights<T>;                                                  \
  template ModelWeights<double> widen<T>(const ModelWeights<T>&);                   \
  template ForwardOut<T> forward<T>(const ModelWeights<T>&, const Batch&,           \
                                    const ForwardOpts<T>&);

TWEO_INSTANTIATE_MODEL(float)
TWEO_INSTANTIATE_MODEL(double)

}  // namespace tweo
