#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fusionq/numerics/params.hpp"

namespace fusionq::nn {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled (AdamW)
};

struct AdamState {
  std::uint64_t step = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
};

/// One AdamW update over every parameter in the store. Throws TrainingError
/// on a non-finite gradient, leaving parameters untouched.
void adam_step(ParamStore& params, AdamState& state, const AdamConfig& cfg);

/// Cosine annealing from base_lr at step 0 to min_lr at total_steps.
double cosine_lr(double base_lr, double min_lr, std::uint64_t step, std::uint64_t total_steps);

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
};

/// Compares the reverse-mode gradient of a scalar function of the store's
/// parameters with central differences (f(t+h)-f(t-h))/2h, coordinate by
/// coordinate. Relative error is |a-n| / max(|a|, |n|, floor).
GradCheckResult grad_check(const std::function<Var()>& f, ParamStore& params, double h = 1e-5, double floor = 1e-4);

}  // namespace fusionq::nn
