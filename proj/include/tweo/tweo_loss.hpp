#pragma once

#include <string>
#include <vector>

#include "tweo/tensor.hpp"

namespace tweo {

enum class LambdaSchedule { CONSTANT, COSINE };

LambdaSchedule schedule_from_name(const std::string& name);
const char* schedule_name(LambdaSchedule s);

struct TweoConfig {
  double tau = 3.0;       // activation ceiling the penalty is normalized by
  int p = 4;              // even exponent; steepness of the wall
  double eps = 1e-6;      // keeps the normalizer away from zero
  double lambda0 = 0.01;  // weight at step 0; 0 disables the term entirely
  LambdaSchedule schedule = LambdaSchedule::CONSTANT;
  size_t horizon = 0;  // cosine decay length; 0 means "the full run"

  void validate() const;
};

// Non-fatal advisory when tau sits outside the range the penalty was tuned
// for; empty string when there is nothing to say.
std::string tweo_config_warning(const TweoConfig& cfg);

// Weight applied at a given step. Cosine decays to zero across the horizon
// (or total_steps when no horizon is set) and stays zero afterwards.
double tweo_lambda(const TweoConfig& cfg, size_t step, size_t total_steps);

// Mean over taps of E[(|a| / (tau+eps))^p], differentiable. The magnitude is
// raised through a^2 repeated p/2 times, so no fabs shows up in the graph.
template <typename T>
Tensor<T> tweo_penalty(const std::vector<Tensor<T>>& taps, const TweoConfig& cfg);

// Same number computed tape-free in double; telemetry calls this every
// logging step even when the penalty is not part of the loss.
template <typename T>
double tweo_penalty_value(const std::vector<Tensor<T>>& taps, const TweoConfig& cfg);

}  // namespace tweo
