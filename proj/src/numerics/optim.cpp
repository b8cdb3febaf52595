#include "fusionq/numerics/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "fusionq/errors.hpp"

namespace fusionq::nn {

void adam_step(ParamStore& params, AdamState& state, const AdamConfig& cfg) {
  if (!(cfg.lr >= 0.0)) throw ConfigError("adam: learning rate must be non-negative");
  auto& entries = params.entries();
  if (state.m.size() != entries.size()) {
    state.m.clear();
    state.v.clear();
    for (const auto& e : entries) {
      state.m.emplace_back(e.var.value().shape(), 0.0);
      state.v.emplace_back(e.var.value().shape(), 0.0);
    }
  }
  for (const auto& e : entries) {
    if (!e.var.grad().empty() && !e.var.grad().all_finite())
      throw TrainingError("adam: non-finite gradient in " + e.name);
  }

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  const double decay = 1.0 - cfg.lr * cfg.weight_decay;
  for (std::size_t p = 0; p < entries.size(); ++p) {
    Tensor& w = entries[p].var.mutable_value();
    const Tensor& g = entries[p].var.grad();
    Tensor& m = state.m[p];
    Tensor& v = state.v[p];
    if (m.size() != w.size()) throw ShapeError("adam: state does not match parameter " + entries[p].name);
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g.empty() ? 0.0 : g[i];
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      w[i] = w[i] * decay - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

double cosine_lr(double base_lr, double min_lr, std::uint64_t step, std::uint64_t total_steps) {
  if (total_steps == 0) return base_lr;
  const double frac = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps));
  return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + std::cos(std::numbers::pi * frac));
}

GradCheckResult grad_check(const std::function<Var()>& f, ParamStore& params, double h, double floor) {
  if (!(h > 0.0)) throw ConfigError("grad_check: step must be positive");
  params.zero_grad();
  const Var loss = f();
  if (!loss.value().all_finite()) throw DomainError("grad_check: non-finite evaluation");
  backward(loss);

  GradCheckResult res;
  for (auto& e : params.entries()) {
    Tensor& w = e.var.mutable_value();
    const Tensor analytic = e.var.grad().empty() ? Tensor(w.shape(), 0.0) : e.var.grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double orig = w[i];
      w[i] = orig + h;
      const double fp = f().value()[0];
      w[i] = orig - h;
      const double fm = f().value()[0];
      w[i] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm)) throw DomainError("grad_check: non-finite evaluation");
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[i];
      const double denom = std::max({std::fabs(a), std::fabs(numeric), floor});
      const double rel = std::fabs(a - numeric) / denom;
      ++res.checked;
      if (res.checked == 1 || rel > res.max_relative_error) {
        res.max_relative_error = rel;
        res.worst_parameter = e.name;
        res.worst_index = i;
        res.analytic = a;
        res.numeric = numeric;
      }
    }
  }
  return res;
}

}  // namespace fusionq::nn
