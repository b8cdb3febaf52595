#include "fusionq/numerics/params.hpp"

#include <cmath>

#include "fusionq/errors.hpp"

namespace fusionq::nn {

Var ParamStore::add(std::string name, Tensor init) {
  if (find(name)) throw ConfigError("parameter registered twice: " + name);
  Var v = Var::parameter(std::move(init));
  entries_.push_back({std::move(name), v});
  return v;
}

Var ParamStore::add_xavier(std::string name, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor w({fan_in, fan_out}, 0.0);
  for (auto& x : w.values()) x = dist(rng);
  return add(std::move(name), std::move(w));
}

Var ParamStore::add_zeros(std::string name, Tensor::Shape shape) { return add(std::move(name), Tensor(std::move(shape), 0.0)); }

Var ParamStore::add_filled(std::string name, Tensor::Shape shape, double value) {
  return add(std::move(name), Tensor(std::move(shape), value));
}

std::size_t ParamStore::scalar_count() const noexcept {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.var.value().size();
  return n;
}

const Var* ParamStore::find(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return &e.var;
  return nullptr;
}

void ParamStore::zero_grad() {
  for (auto& e : entries_) e.var.zero_grad();
}

}  // namespace fusionq::nn
