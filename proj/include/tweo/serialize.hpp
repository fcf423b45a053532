#pragma once

#include <string>
#include <utility>
#include <vector>

#include "tweo/tensor.hpp"

namespace tweo {

/**
 * Tensor container layout, all little-endian:
 *   bytes 0..8   magic "TWEO-TNSR"
 *   byte  9      version (1)
 *   byte  10     dtype tag: 0 = f32, 1 = f64
 *   byte  11     rank
 *   then rank u64 dims, then the raw payload.
 * The reader validates magic, version, dtype and payload length.
 */
constexpr char kTnsrMagic[9] = {'T', 'W', 'E', 'O', '-', 'T', 'N', 'S', 'R'};
constexpr uint8_t kTnsrVersion = 1;

void save_tnsr(const std::string& path, const Shape& shape, const float* data);
void save_tnsr(const std::string& path, const Shape& shape, const double* data);

template <typename T>
void save_tnsr(const std::string& path, const Tensor<T>& t) {
  save_tnsr(path, t.shape(), t.data().data());
}

struct LoadedTensor {
  int dtype = -1;  // 0 f32, 1 f64
  Shape shape;
  std::vector<float> f32;
  std::vector<double> f64;
};

LoadedTensor load_tnsr(const std::string& path);

// strict dtype: mixing storage precisions silently is how subtle numeric
// drift gets into a run, so a mismatch is an error rather than a cast
template <typename T>
Tensor<T> load_tnsr_as(const std::string& path);

// named-tensor map with stable ordering, used by checkpoints
struct NamedTensors {
  std::vector<std::pair<std::string, Tensor<float>>> items;
  Tensor<float>* find(const std::string& name);
};

// writes dir/manifest.json plus dir/tensors/<name>.tnsr
void save_named_tensors(const std::string& dir, const NamedTensors& tensors,
                        const std::string& config_json, uint64_t step);

struct LoadedCheckpoint {
  NamedTensors tensors;
  std::string config_json;
  uint64_t step = 0;
};

LoadedCheckpoint load_named_tensors(const std::string& dir);

}  // namespace tweo
