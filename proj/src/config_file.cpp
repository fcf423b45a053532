#include "tweo/config_file.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <functional>
#include <sstream>

namespace tweo {

namespace {

std::string trim(const std::string& s) {
  size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    unsigned long long r = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ContractError(strf("%s: '%s' is not a non-negative integer", key.c_str(), v.c_str()));
  }
}

int64_t parse_i64(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    long long r = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ContractError(strf("%s: '%s' is not an integer", key.c_str(), v.c_str()));
  }
}

double parse_f64(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    double r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ContractError(strf("%s: '%s' is not a number", key.c_str(), v.c_str()));
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  std::string t = v;
  std::transform(t.begin(), t.end(), t.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  if (t == "true" || t == "1" || t == "yes" || t == "on") return true;
  if (t == "false" || t == "0" || t == "no" || t == "off") return false;
  throw ContractError(strf("%s: '%s' is not a boolean", key.c_str(), v.c_str()));
}

struct KeySpec {
  const char* name;  // dotted
  const char* dflt;
  const char* doc;
  std::function<void(RunConfig&, const std::string&, const std::string&)> apply;
};

const std::vector<KeySpec>& registry() {
  static const std::vector<KeySpec> kKeys = {
      {"model.vocab", "257", "token vocabulary (256 bytes + BOS)",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.model.vocab = parse_u64(k, v);
       }},
      {"model.d_model", "128", "stream width",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.model.d_model = parse_u64(k, v);
       }},
      {"model.n_layers", "4", "transformer blocks",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.model.n_layers = parse_u64(k, v);
       }},
      {"model.n_heads", "4", "attention heads",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.model.n_heads = parse_u64(k, v);
       }},
      {"model.d_mlp", "512", "MLP hidden width",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.model.d_mlp = parse_u64(k, v);
       }},
      {"model.context", "64", "sequence length in tokens",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.model.context = parse_u64(k, v);
       }},
      {"model.mlp", "gelu", "MLP flavor: gelu or glu",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         (void)k;
         c.model.mlp = mlp_kind_from_name(v);
       }},
      {"model.ln_eps", "1e-5", "LayerNorm epsilon",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.model.ln_eps = parse_f64(k, v);
       }},
      {"model.plant_layer", "-1", "block index for the planted outlier channel; -1 = none",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.model.plant_layer = static_cast<int>(parse_i64(k, v));
       }},
      {"model.plant_amplitude", "900", "target activation magnitude of the plant",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.model.plant_amplitude = parse_f64(k, v);
       }},
      {"model.plant_bias", "5", "norm-bias alignment strength of the plant",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.model.plant_bias = parse_f64(k, v);
       }},

      {"tweo.enabled", "false", "turn the activation regularizer on",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.tweo_enabled = parse_bool(k, v);
       }},
      {"tweo.tau", "3", "activation threshold",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.tweo.tau = parse_f64(k, v);
       }},
      {"tweo.p", "4", "penalty exponent (even, >= 2)",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.tweo.p = static_cast<int>(parse_i64(k, v));
       }},
      {"tweo.eps", "1e-6", "denominator epsilon",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.tweo.eps = parse_f64(k, v);
       }},
      {"tweo.lambda0", "0.01", "penalty weight",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.tweo.lambda0 = parse_f64(k, v);
       }},
      {"tweo.schedule", "constant", "lambda schedule: constant or cosine",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         (void)k;
         c.tweo.schedule = schedule_from_name(v);
       }},
      {"tweo.horizon", "0", "cosine decay horizon in steps; 0 = full run",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.tweo.horizon = parse_u64(k, v);
       }},

      {"optim.lr", "3e-4", "peak learning rate",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.optim.lr = parse_f64(k, v);
       }},
      {"optim.beta1", "0.9", "AdamW beta1",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.optim.beta1 = parse_f64(k, v);
       }},
      {"optim.beta2", "0.95", "AdamW beta2",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.optim.beta2 = parse_f64(k, v);
       }},
      {"optim.eps", "1e-8", "AdamW epsilon",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.optim.eps = parse_f64(k, v);
       }},
      {"optim.weight_decay", "0.1", "decoupled decay on rank-2 weights",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.optim.weight_decay = parse_f64(k, v);
       }},
      {"optim.warmup", "-1", "linear warmup steps; -1 = 5% of total",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.optim.warmup = parse_i64(k, v);
       }},
      {"optim.total_steps", "1000", "optimizer steps",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.optim.total_steps = parse_u64(k, v);
       }},
      {"optim.precision", "full", "full or fp8_emulated",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         (void)k;
         c.precision = precision_from_name(v);
       }},
      {"optim.seed", "1", "run seed (weights init and batch order)",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.seed = parse_u64(k, v);
       }},
      {"optim.telemetry_every", "10", "telemetry cadence in steps",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.telemetry_every = parse_u64(k, v);
       }},
      {"optim.checkpoint_every", "0", "periodic checkpoint cadence; 0 = final only",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.checkpoint_every = parse_u64(k, v);
       }},
      {"optim.dump_taps_step", "-1", "save that step's taps for offline checks; -1 = never",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.dump_taps_step = parse_i64(k, v);
       }},
      {"optim.init_checkpoint", "", "start from these weights instead of a fresh init",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         (void)k;
         c.init_checkpoint = v;
       }},

      {"fp8.fwd_format", "E4M3", "forward-tensor format (E4M3, E5M2, LOSSLESS)",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         (void)k;
         c.fp8.fwd_format = fp8::format_from_name(v);
       }},
      {"fp8.grad_format", "E5M2", "gradient format",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         (void)k;
         c.fp8.grad_format = fp8::format_from_name(v);
       }},
      {"fp8.overflow", "saturate", "saturate or strict",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         (void)k;
         c.fp8.overflow = fp8::overflow_from_name(v);
       }},
      {"fp8.margin", "0", "extra powers of two of forward-scale headroom",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.fp8.margin = static_cast<int>(parse_i64(k, v));
       }},
      {"fp8.grad_margin", "0", "extra headroom for gradient scales",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.fp8.grad_margin = static_cast<int>(parse_i64(k, v));
       }},
      {"fp8.history", "16", "delayed-scaling amax window",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.fp8.history = parse_u64(k, v);
       }},
      {"fp8.lossless", "false", "route every site through the bypass format (plumbing tests)",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.fp8.lossless = parse_bool(k, v);
       }},

      {"data.corpus", "", "path to the byte-level corpus file",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         (void)k;
         c.corpus_path = v;
       }},
      {"data.batch_size", "8", "sequences per step",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.batch_size = parse_u64(k, v);
       }},
      {"data.eval_batches", "64", "validation batches for the final metric; 0 = all",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.eval_batches = parse_u64(k, v);
       }},
  };
  return kKeys;
}

const KeySpec* find_key(const std::string& name) {
  for (const KeySpec& k : registry())
    if (name == k.name) return &k;
  return nullptr;
}

[[noreturn]] void reject_key(const std::string& name) {
  std::string valid;
  for (const KeySpec& k : registry()) {
    if (!valid.empty()) valid += ", ";
    valid += k.name;
  }
  throw ContractError(strf("unknown config key '%s'; valid keys: %s", name.c_str(),
                           valid.c_str()));
}

}  // namespace

ConfigMap parse_config_text(const std::string& text) {
  static const char* kSections[] = {"model", "tweo", "optim", "fp8", "data"};
  ConfigMap cm;
  std::istringstream in(text);
  std::string line, section;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']')
        throw ContractError(strf("config line %zu: unterminated section header", lineno));
      section = trim(t.substr(1, t.size() - 2));
      bool ok = false;
      for (const char* s : kSections) ok = ok || section == s;
      if (!ok)
        throw ContractError(strf("config line %zu: unknown section [%s]; sections are "
                                 "[model], [tweo], [optim], [fp8], [data]",
                                 lineno, section.c_str()));
      continue;
    }
    size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ContractError(strf("config line %zu: expected key = value", lineno));
    if (section.empty())
      throw ContractError(strf("config line %zu: key outside any section", lineno));
    std::string key = trim(t.substr(0, eq));
    std::string val = trim(t.substr(eq + 1));
    if (key.empty()) throw ContractError(strf("config line %zu: empty key", lineno));
    cm.values[section + "." + key] = val;
  }
  return cm;
}

ConfigMap load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(strf("cannot open config file %s", path.c_str()));
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

RunConfig build_run_config(const ConfigMap& file, const std::vector<std::string>& overrides) {
  RunConfig rc;
  for (const auto& [key, val] : file.values) {
    const KeySpec* spec = find_key(key);
    if (!spec) reject_key(key);
    spec->apply(rc, key, val);
  }
  for (const std::string& ov : overrides) {
    size_t eq = ov.find('=');
    if (eq == std::string::npos)
      throw ContractError(strf("override '%s' is not of the form section.key=value",
                               ov.c_str()));
    std::string key = trim(ov.substr(0, eq));
    std::string val = trim(ov.substr(eq + 1));
    const KeySpec* spec = find_key(key);
    if (!spec) reject_key(key);
    spec->apply(rc, key, val);
  }
  // One seed drives the whole run; the model draws from it too.
  rc.model.seed = rc.seed;
  return rc;
}

std::vector<std::string> known_config_keys() {
  std::vector<std::string> out;
  for (const KeySpec& k : registry()) out.push_back(k.name);
  return out;
}

std::string config_reference() {
  std::string out;
  std::string section;
  for (const KeySpec& k : registry()) {
    std::string name = k.name;
    std::string sec = name.substr(0, name.find('.'));
    if (sec != section) {
      section = sec;
      out += strf("[%s]\n", sec.c_str());
    }
    out += strf("  %-24s default %-10s %s\n", name.substr(name.find('.') + 1).c_str(),
                k.dflt[0] ? k.dflt : "(empty)", k.doc);
  }
  return out;
}

}  // namespace tweo
