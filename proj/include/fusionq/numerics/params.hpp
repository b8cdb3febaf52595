#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "fusionq/numerics/autograd.hpp"

namespace fusionq::nn {

using Rng = std::mt19937_64;

/// Ordered registry of trainable parameters. Registration order fixes the
/// checkpoint layout and the optimizer state layout.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Var var;
  };

  Var add(std::string name, Tensor init);
  /// Weight matrix [fan_in, fan_out], uniform in +-sqrt(6/(fan_in+fan_out)).
  Var add_xavier(std::string name, std::size_t fan_in, std::size_t fan_out, Rng& rng);
  Var add_zeros(std::string name, Tensor::Shape shape);
  Var add_filled(std::string name, Tensor::Shape shape, double value);

  const std::vector<Entry>& entries() const noexcept { return entries_; }
  std::vector<Entry>& entries() noexcept { return entries_; }
  std::size_t scalar_count() const noexcept;
  const Var* find(const std::string& name) const;
  void zero_grad();

 private:
  std::vector<Entry> entries_;
};

}  // namespace fusionq::nn
