#include "tweo/corpus.hpp"

#include <algorithm>
#include <fstream>

#include "tweo/common.hpp"

namespace tweo {

Corpus load_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(strf("cannot open corpus file %s", path.c_str()));
  Corpus c;
  in.seekg(0, std::ios::end);
  std::streamoff len = in.tellg();
  in.seekg(0, std::ios::beg);
  if (len > 0) {
    c.bytes.resize(static_cast<size_t>(len));
    in.read(reinterpret_cast<char*>(c.bytes.data()), len);
    if (!in) throw IoError(strf("short read on corpus file %s", path.c_str()));
  }
  if (c.bytes.empty()) throw ContractError(strf("corpus file %s is empty", path.c_str()));
  return c;
}

CorpusSplit split_corpus(const Corpus& c, size_t seq_len) {
  if (seq_len == 0) throw ContractError("sequence length must be positive");
  if (c.bytes.empty()) throw ContractError("corpus is empty");
  const size_t n_blocks = c.bytes.size() / seq_len;
  CorpusSplit s;
  s.seq_len = seq_len;
  for (size_t i = 0; i < n_blocks; ++i) {
    uint64_t idx = i;
    if (fnv1a64(&idx, sizeof(idx)) % 16 == 0)
      s.val_blocks.push_back(i);
    else
      s.train_blocks.push_back(i);
  }
  if (s.train_blocks.empty() || s.val_blocks.empty())
    throw ContractError(strf("corpus of %zu bytes yields %zu train / %zu val blocks at "
                             "sequence length %zu; both sides must be non-empty",
                             c.bytes.size(), s.train_blocks.size(), s.val_blocks.size(),
                             seq_len));
  return s;
}

Batch assemble_batch(const Corpus& c, size_t seq_len, const std::vector<size_t>& blocks) {
  if (blocks.empty()) throw ContractError("batch needs at least one block");
  Batch b;
  b.B = blocks.size();
  b.T = seq_len;
  b.x.resize(b.B * b.T);
  b.y.resize(b.B * b.T);
  for (size_t s = 0; s < blocks.size(); ++s) {
    const size_t base = blocks[s] * seq_len;
    if (base + seq_len > c.bytes.size())
      throw ContractError(strf("block %zu runs past the end of the corpus", blocks[s]));
    b.x[s * seq_len] = kBosToken;
    for (size_t t = 0; t < seq_len; ++t) {
      if (t + 1 < seq_len) b.x[s * seq_len + t + 1] = c.bytes[base + t];
      b.y[s * seq_len + t] = c.bytes[base + t];
    }
  }
  return b;
}

std::vector<Batch> val_batches(const Corpus& c, const CorpusSplit& split, size_t batch_size) {
  if (batch_size == 0) throw ContractError("batch size must be positive");
  std::vector<Batch> out;
  for (size_t i = 0; i < split.val_blocks.size(); i += batch_size) {
    const size_t hi = std::min(i + batch_size, split.val_blocks.size());
    std::vector<size_t> blocks(split.val_blocks.begin() + i, split.val_blocks.begin() + hi);
    out.push_back(assemble_batch(c, split.seq_len, blocks));
  }
  return out;
}

TrainSampler::TrainSampler(const Corpus& c, const CorpusSplit& split, size_t batch_size,
                           uint64_t seed)
    : corpus_(c), split_(split), batch_size_(batch_size), rng_(seed) {
  if (batch_size_ == 0) throw ContractError("batch size must be positive");
  if (split_.train_blocks.empty()) throw ContractError("train split is empty");
  perm_ = split_.train_blocks;
  reshuffle();
}

void TrainSampler::reshuffle() {
  // Fisher-Yates on our own RNG; std::shuffle's draw pattern is
  // implementation-defined and would break cross-toolchain determinism.
  for (size_t i = perm_.size(); i > 1; --i) {
    size_t j = static_cast<size_t>(rng_.randint(0, static_cast<int64_t>(i) - 1));
    std::swap(perm_[i - 1], perm_[j]);
  }
  cursor_ = 0;
}

Batch TrainSampler::next() {
  std::vector<size_t> blocks;
  blocks.reserve(batch_size_);
  while (blocks.size() < batch_size_) {
    if (cursor_ >= perm_.size()) {
      ++epoch_;
      reshuffle();
    }
    blocks.push_back(perm_[cursor_++]);
  }
  return assemble_batch(corpus_, split_.seq_len, blocks);
}

// ----------------------------- synthetic text -----------------------------

namespace {

const char* const kNouns[] = {
    "river",  "window", "engine", "garden", "signal",  "market", "castle", "forest",
    "bridge", "letter", "mirror", "harbor", "station", "meadow", "circle", "lantern",
    "valley", "winter", "summer", "stone",  "shadow",  "road",   "door",   "mountain",
    "paper",  "clock",  "voice",  "storm",  "island",  "field",  "light",  "teacher",
    "sailor", "farmer", "writer", "child",  "city",    "village"};

const char* const kVerbs[] = {"carried", "opened",   "followed", "crossed",  "watched",
                              "found",   "built",    "painted",  "remembered", "reached",
                              "held",    "gathered", "turned",   "repaired", "measured",
                              "counted", "covered",  "filled",   "moved",    "answered"};

const char* const kAdjectives[] = {"quiet",  "narrow", "bright", "heavy",  "distant",
                                   "early",  "gentle", "broken", "golden", "silent",
                                   "steady", "cold",   "warm",   "small",  "old",
                                   "long",   "pale",   "deep",   "simple", "wide"};

const char* const kConnectors[] = {"and then", "but soon", "while nearby", "because",
                                   "although", "and so",   "until",        "before"};

template <size_t N>
const char* pick(Rng& rng, const char* const (&arr)[N]) {
  return arr[static_cast<size_t>(rng.randint(0, static_cast<int64_t>(N) - 1))];
}

void append_clause(std::string& s, Rng& rng) {
  s += "the ";
  if (rng.uniform() < 0.6) {
    s += pick(rng, kAdjectives);
    s += ' ';
  }
  s += pick(rng, kNouns);
  s += ' ';
  s += pick(rng, kVerbs);
  s += " the ";
  if (rng.uniform() < 0.3) {
    s += pick(rng, kAdjectives);
    s += ' ';
  }
  s += pick(rng, kNouns);
}

}  // namespace

std::vector<uint8_t> synthesize_text(size_t target_bytes, uint64_t seed) {
  if (target_bytes == 0) throw ContractError("cannot synthesize an empty corpus");
  Rng rng(seed);
  std::string text;
  text.reserve(target_bytes + 256);
  while (text.size() < target_bytes) {
    const int sentences = static_cast<int>(rng.randint(3, 7));
    for (int s = 0; s < sentences && text.size() < target_bytes; ++s) {
      std::string sentence;
      append_clause(sentence, rng);
      if (rng.uniform() < 0.45) {
        sentence += rng.uniform() < 0.5 ? ", " : " ";
        sentence += pick(rng, kConnectors);
        sentence += ' ';
        append_clause(sentence, rng);
      }
      sentence[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(sentence[0])));
      sentence += rng.uniform() < 0.06 ? "? " : ". ";
      text += sentence;
    }
    text += "\n\n";
  }
  text.resize(target_bytes);
  return std::vector<uint8_t>(text.begin(), text.end());
}

}  // namespace tweo
