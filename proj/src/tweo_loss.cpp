#include "tweo/tweo_loss.hpp"

#include <cmath>
#include <numbers>

#include "tweo/common.hpp"
#include "tweo/ops.hpp"

namespace tweo {

LambdaSchedule schedule_from_name(const std::string& name) {
  if (name == "constant") return LambdaSchedule::CONSTANT;
  if (name == "cosine") return LambdaSchedule::COSINE;
  throw ContractError(strf("unknown lambda schedule '%s' (expected constant or cosine)",
                           name.c_str()));
}

const char* schedule_name(LambdaSchedule s) {
  return s == LambdaSchedule::CONSTANT ? "constant" : "cosine";
}

void TweoConfig::validate() const {
  if (p < 2 || p % 2 != 0)
    throw ContractError(strf("penalty exponent p must be a positive even integer, got %d", p));
  if (!(tau > 0.0)) throw ContractError("tau must be positive");
  if (!(eps > 0.0)) throw ContractError("eps must be positive");
  if (lambda0 < 0.0) throw ContractError("lambda0 must be non-negative");
}

std::string tweo_config_warning(const TweoConfig& cfg) {
  if (cfg.tau < 2.0 || cfg.tau > 5.0) {
    return strf("tau=%.3g is outside the tuned range [2, 5]; the penalty wall may be "
                "too tight or too loose",
                cfg.tau);
  }
  return "";
}

double tweo_lambda(const TweoConfig& cfg, size_t step, size_t total_steps) {
  cfg.validate();
  if (cfg.schedule == LambdaSchedule::CONSTANT) return cfg.lambda0;
  const size_t T = cfg.horizon ? cfg.horizon : total_steps;
  if (T == 0) throw ContractError("cosine lambda schedule needs a horizon or a total step count");
  if (step >= T) return 0.0;
  return cfg.lambda0 * 0.5 * (1.0 + std::cos(std::numbers::pi * double(step) / double(T)));
}

template <typename T>
Tensor<T> tweo_penalty(const std::vector<Tensor<T>>& taps, const TweoConfig& cfg) {
  cfg.validate();
  if (taps.empty()) throw ContractError("tweo_penalty: no taps");
  const double denom = std::pow(cfg.tau + cfg.eps, double(cfg.p));
  Tensor<T> acc;
  for (const auto& tap : taps) {
    Tensor<T> sq = mul(tap, tap);
    Tensor<T> powered = cfg.p == 2 ? sq : ipow(sq, cfg.p / 2);
    Tensor<T> m = mean_all(mul_scalar(powered, T(1.0 / denom)));
    acc = acc.defined() ? add(acc, m) : m;
  }
  return mul_scalar(acc, T(1.0 / double(taps.size())));
}

template <typename T>
double tweo_penalty_value(const std::vector<Tensor<T>>& taps, const TweoConfig& cfg) {
  cfg.validate();
  if (taps.empty()) throw ContractError("tweo_penalty_value: no taps");
  const double denom = std::pow(cfg.tau + cfg.eps, double(cfg.p));
  const int half = cfg.p / 2;
  double total = 0.0;
  for (const auto& tap : taps) {
    double sum = 0.0;
    for (const T v : tap.data()) {
      const double s = double(v) * double(v);
      double pw = s;
      for (int i = 1; i < half; ++i) pw *= s;
      sum += pw;
    }
    total += sum / (double(tap.numel()) * denom);
  }
  return total / double(taps.size());
}

template Tensor<float> tweo_penalty<float>(const std::vector<Tensor<float>>&, const TweoConfig&);
template Tensor<double> tweo_penalty<double>(const std::vector<Tensor<double>>&,
                                             const TweoConfig&);
template double tweo_penalty_value<float>(const std::vector<Tensor<float>>&, const TweoConfig&);
template double tweo_penalty_value<double>(const std::vector<Tensor<double>>&, const TweoConfig&);

}  // namespace tweo
