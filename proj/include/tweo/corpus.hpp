#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tweo/model.hpp"
#include "tweo/rng.hpp"

namespace tweo {

// Byte-level vocabulary: ids 0..255 are the byte values, 256 is BOS.
constexpr int32_t kBosToken = 256;
constexpr size_t kByteVocab = 257;

struct Corpus {
  std::vector<uint8_t> bytes;
};

Corpus load_corpus(const std::string& path);  // empty file is rejected

/**
 * Non-overlapping seq_len-byte blocks. Block i is a validation block iff
 * fnv1a64 of its index hashes to 0 mod 16, which makes the split a pure
 * function of the file and the sequence length (no RNG involved).
 */
struct CorpusSplit {
  size_t seq_len = 0;
  std::vector<size_t> train_blocks;
  std::vector<size_t> val_blocks;
};

CorpusSplit split_corpus(const Corpus& c, size_t seq_len);

// One sample per block: x = [BOS, b0..b_{T-2}], y = [b0..b_{T-1}].
Batch assemble_batch(const Corpus& c, size_t seq_len, const std::vector<size_t>& blocks);

// Validation batches in ascending block order; the last one may be smaller.
std::vector<Batch> val_batches(const Corpus& c, const CorpusSplit& split, size_t batch_size);

/**
 * Deterministic epoch sampler: a seeded shuffle of the train blocks, re-drawn
 * each time the cursor wraps. Batches may straddle an epoch boundary.
 */
class TrainSampler {
 public:
  TrainSampler(const Corpus& c, const CorpusSplit& split, size_t batch_size, uint64_t seed);
  Batch next();
  size_t epoch() const { return epoch_; }

 private:
  void reshuffle();

  const Corpus& corpus_;
  const CorpusSplit& split_;
  size_t batch_size_;
  Rng rng_;
  std::vector<size_t> perm_;
  size_t cursor_ = 0;
  size_t epoch_ = 0;
};

// Deterministic filler text (template-driven pseudo-English) for desk-scale
// runs; the repository ships no natural-language data.
std::vector<uint8_t> synthesize_text(size_t target_bytes, uint64_t seed);

}  // namespace tweo
