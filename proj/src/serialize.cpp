#include "tweo/serialize.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace tweo {

static_assert(std::endian::native == std::endian::little,
              "container i/o assumes a little-endian host");

namespace {

void write_bytes(std::ofstream& f, const void* p, size_t n) {
  f.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void save_tnsr_impl(const std::string& path, const Shape& shape, const void* data,
                    uint8_t dtype, size_t elem_size) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path);
  write_bytes(f, kTnsrMagic, sizeof(kTnsrMagic));
  write_bytes(f, &kTnsrVersion, 1);
  write_bytes(f, &dtype, 1);
  const uint8_t rank = static_cast<uint8_t>(shape.size());
  write_bytes(f, &rank, 1);
  for (size_t d : shape) {
    const uint64_t d64 = d;
    write_bytes(f, &d64, 8);
  }
  write_bytes(f, data, numel(shape) * elem_size);
  if (!f) throw IoError("short write to " + path);
}

}  // namespace

void save_tnsr(const std::string& path, const Shape& shape, const float* data) {
  save_tnsr_impl(path, shape, data, 0, sizeof(float));
}

void save_tnsr(const std::string& path, const Shape& shape, const double* data) {
  save_tnsr_impl(path, shape, data, 1, sizeof(double));
}

LoadedTensor load_tnsr(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  char magic[9];
  uint8_t version = 0, dtype = 0, rank = 0;
  f.read(magic, 9);
  f.read(reinterpret_cast<char*>(&version), 1);
  f.read(reinterpret_cast<char*>(&dtype), 1);
  f.read(reinterpret_cast<char*>(&rank), 1);
  if (!f || std::memcmp(magic, kTnsrMagic, 9) != 0)
    throw IoError("bad tensor container magic in " + path);
  if (version != kTnsrVersion)
    throw IoError(strf("unsupported container version %u in %s", version, path.c_str()));
  if (dtype > 1) throw IoError(strf("unknown dtype tag %u in %s", dtype, path.c_str()));
  LoadedTensor out;
  out.dtype = dtype;
  out.shape.resize(rank);
  for (size_t i = 0; i < rank; ++i) {
    uint64_t d = 0;
    f.read(reinterpret_cast<char*>(&d), 8);
    out.shape[i] = static_cast<size_t>(d);
  }
  if (!f) throw IoError("truncated header in " + path);
  const size_t n = numel(out.shape);
  if (dtype == 0) {
    out.f32.resize(n);
    f.read(reinterpret_cast<char*>(out.f32.data()), static_cast<std::streamsize>(n * 4));
  } else {
    out.f64.resize(n);
    f.read(reinterpret_cast<char*>(out.f64.data()), static_cast<std::streamsize>(n * 8));
  }
  if (!f) throw IoError("truncated payload in " + path);
  return out;
}

template <>
Tensor<float> load_tnsr_as<float>(const std::string& path) {
  LoadedTensor t = load_tnsr(path);
  if (t.dtype != 0) throw IoError("expected f32 payload in " + path);
  return Tensor<float>::from(t.shape, std::move(t.f32));
}

template <>
Tensor<double> load_tnsr_as<double>(const std::string& path) {
  LoadedTensor t = load_tnsr(path);
  if (t.dtype != 1) throw IoError("expected f64 payload in " + path);
  return Tensor<double>::from(t.shape, std::move(t.f64));
}

Tensor<float>* NamedTensors::find(const std::string& name) {
  for (auto& [n, t] : items)
    if (n == name) return &t;
  return nullptr;
}

void save_named_tensors(const std::string& dir, const NamedTensors& tensors,
                        const std::string& config_json, uint64_t step) {
  fs::create_directories(fs::path(dir) / "tensors");
  json manifest;
  manifest["step"] = step;
  manifest["config"] = json::parse(config_json);
  json entries = json::array();
  for (const auto& [name, t] : tensors.items) {
    const std::string rel = "tensors/" + name + ".tnsr";
    save_tnsr((fs::path(dir) / rel).string(), t);
    entries.push_back({{"name", name}, {"file", rel}, {"shape", t.shape()}});
  }
  manifest["tensors"] = entries;
  std::ofstream f(fs::path(dir) / "manifest.json");
  if (!f) throw IoError("cannot write checkpoint manifest in " + dir);
  f << manifest.dump(2) << "\n";
}

LoadedCheckpoint load_named_tensors(const std::string& dir) {
  std::ifstream f(fs::path(dir) / "manifest.json");
  if (!f) throw IoError("no checkpoint manifest in " + dir);
  json manifest;
  try {
    f >> manifest;
  } catch (const json::exception& e) {
    throw IoError(strf("bad checkpoint manifest in %s: %s", dir.c_str(), e.what()));
  }
  LoadedCheckpoint out;
  out.step = manifest.at("step").get<uint64_t>();
  out.config_json = manifest.at("config").dump();
  for (const auto& e : manifest.at("tensors")) {
    const std::string name = e.at("name").get<std::string>();
    const std::string rel = e.at("file").get<std::string>();
    out.tensors.items.emplace_back(name,
                                   load_tnsr_as<float>((fs::path(dir) / rel).string()));
  }
  return out;
}

}  // namespace tweo
