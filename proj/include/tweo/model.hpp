#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "tweo/fp8.hpp"
#include "tweo/tensor.hpp"

namespace tweo {

enum class MlpKind { GELU_CLASSIC, GLU };

MlpKind mlp_kind_from_name(const std::string& name);
const char* mlp_kind_name(MlpKind k);

struct ModelConfig {
  size_t vocab = 257;  // 256 byte values plus BOS
  size_t d_model = 128;
  size_t n_layers = 4;
  size_t n_heads = 4;
  size_t d_mlp = 512;
  size_t context = 64;
  MlpKind mlp = MlpKind::GELU_CLASSIC;
  double ln_eps = 1e-5;
  uint64_t seed = 1;

  // Planted-outlier fixture. When plant_layer >= 0, that block's MLP gets a
  // rank-1 amplification channel and its pre-MLP norm bias is aligned with it
  // so the channel fires with a stable sign on every token.
  int plant_layer = -1;
  double plant_amplitude = 900.0;
  double plant_bias = 5.0;

  size_t head_dim() const { return d_model / n_heads; }
  void validate() const;
};

std::string config_to_json_string(const ModelConfig& cfg);
ModelConfig config_from_json_string(const std::string& text);

template <typename T>
struct BlockWeights {
  Tensor<T> ln1_g, ln1_b;
  Tensor<T> qkv_w, qkv_b;  // fused [3*d_model, d_model]
  Tensor<T> out_w, out_b;
  Tensor<T> ln2_g, ln2_b;
  Tensor<T> up_w, up_b;
  Tensor<T> gate_w, gate_b;  // GLU only
  Tensor<T> down_w, down_b;
};

template <typename T>
struct ModelWeights {
  ModelConfig cfg;
  Tensor<T> wte, wpe;
  std::vector<BlockWeights<T>> blocks;
  Tensor<T> lnf_g, lnf_b;
  Tensor<T> head_w, head_b;  // untied output projection [vocab, d_model]

  // stable names in a stable order; this is the checkpoint layout
  std::vector<std::pair<std::string, Tensor<T>>> named() const;
  void set_requires_grad(bool rg);
  void zero_grads();
  size_t param_count() const;
};

// Zero-filled parameter set with the right shapes (checkpoint loading).
template <typename T>
ModelWeights<T> make_weights(const ModelConfig& cfg);

// Seeded gaussian init, std 0.02, residual output projections scaled down by
// 1/sqrt(2*n_layers); biases zero, norm gains one. Draw order is fixed so a
// given seed always produces the same bytes.
template <typename T>
ModelWeights<T> init_weights(const ModelConfig& cfg);

template <typename T>
ModelWeights<double> widen(const ModelWeights<T>& w);  // f64 copy for grad checks

struct Batch {
  size_t B = 0, T = 0;
  std::vector<int32_t> x;  // B*T input ids
  std::vector<int32_t> y;  // B*T targets; empty for probe passes
};

// In-place activation edits on a no-grad forward; the quantizer and the
// calibrator plug in here. Sites fire after the tensor is produced and
// before any consumer reads it.
struct ForwardHooks {
  std::function<void(const std::string& site, float* p, size_t rows, size_t d)> at_activation;
  std::function<void(const std::string& site, float* p, size_t rows, size_t d)> at_residual;
  // float64 twins, fired by the double instantiation at the same sites in the
  // same order (used by forward-equivalence checks that need headroom below
  // f32 rounding)
  std::function<void(const std::string& site, double* p, size_t rows, size_t d)>
      at_activation_f64;
  std::function<void(const std::string& site, double* p, size_t rows, size_t d)>
      at_residual_f64;
};

// Tensor sites that feed a matmul, in forward order:
//   layer{l}.attn_in, layer{l}.attn_ctx, layer{l}.mlp_in, layer{l}.mlp_act, lm_in
std::vector<std::string> activation_sites(const ModelConfig& cfg);
// Block-output sites: layer{l}.resid
std::vector<std::string> residual_sites(const ModelConfig& cfg);

// Per-site scaling states for the emulated-precision path.
struct LnFp8States {
  fp8::ScalingState in, gain, bias;
  LnFp8States() = default;
  LnFp8States(size_t hist, int margin) : in(hist, margin), gain(hist, margin), bias(hist, margin) {}
};

struct Fp8ModelState {
  std::vector<fp8::LinearFp8States> linears;  // per layer: qkv, attn_out, up, (gate), down; then head
  std::vector<LnFp8States> lns;               // per layer: ln1, ln2; then lnf
  static Fp8ModelState make(const ModelConfig& cfg, const fp8::Fp8Config& fc);
};

template <typename T>
struct ForwardOpts {
  bool want_taps = false;
  bool want_attn_stage = false;
  const Tensor<T>* stream_override = nullptr;  // [B*T, d_model], replaces embeddings
  Fp8ModelState* fp8 = nullptr;                // both fp8 fields or neither
  fp8::Fp8RunCtx* fp8_ctx = nullptr;
  const ForwardHooks* hooks = nullptr;  // no-grad passes only
};

template <typename T>
struct ForwardOut {
  Tensor<T> logits;   // [B*T, vocab]
  Tensor<T> loss;     // scalar mean NLL; undefined when batch.y is empty
  Tensor<T> embedded; // the stream entering block 0
  std::vector<Tensor<T>> taps;  // block outputs after the MLP residual add
  std::vector<Tensor<T>> attn_stage;
};

template <typename T>
ForwardOut<T> forward(const ModelWeights<T>& w, const Batch& batch,
                      const ForwardOpts<T>& opts = {});

struct EvalResult {
  double mean_nll = 0.0;
  double ppl = 1.0;
  size_t tokens = 0;
};

EvalResult evaluate(const ModelWeights<float>& w, const std::vector<Batch>& batches,
                    const ForwardHooks* hooks = nullptr);

void save_model(const std::string& dir, const ModelWeights<float>& w, size_t step);

struct LoadedModel {
  ModelWeights<float> w;
  size_t step = 0;
};
LoadedModel load_model(const std::string& dir);

}  // namespace tweo
