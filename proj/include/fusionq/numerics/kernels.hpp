#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "fusionq/numerics/autograd.hpp"
#include "fusionq/numerics/params.hpp"

namespace fusionq::nn {

/// For each scalar x_j emits (sin(x_j/T^{i/k}), cos(x_j/T^{i/k})) for
/// i = 0..k-1, where 2k = channels_per_scalar; blocks are concatenated in
/// input order.
Tensor sinpos_encode(std::span<const double> x, std::size_t channels_per_scalar, double temperature);

std::vector<double> softmax(std::span<const double> logits);

/// Population-variance layer norm of a single vector.
std::vector<double> layer_norm(std::span<const double> x, std::span<const double> gain, std::span<const double> bias,
                               double eps);

enum class Activation { kRelu, kIdentity };

/// Stack of affine layers; rectifier on hidden layers, linear output.
class Mlp {
 public:
  Mlp() = default;
  Mlp(ParamStore& store, const std::string& prefix, std::vector<std::size_t> widths, Rng& rng);
  /// Builds an MLP from explicit parameters (weights [in,out], biases [out]).
  Mlp(std::vector<std::size_t> widths, std::vector<Var> weights, std::vector<Var> biases);

  Var forward(const Var& x) const;
  Tensor forward(const Tensor& x) const;

  const std::vector<std::size_t>& widths() const noexcept { return widths_; }
  std::size_t in_width() const { return widths_.front(); }
  std::size_t out_width() const { return widths_.back(); }
  std::size_t parameter_count() const noexcept;
  Activation hidden_activation() const noexcept { return Activation::kRelu; }
  const std::vector<Var>& weights() const noexcept { return weights_; }
  const std::vector<Var>& biases() const noexcept { return biases_; }

 private:
  std::vector<std::size_t> widths_;
  std::vector<Var> weights_;
  std::vector<Var> biases_;
};

Tensor mlp_forward(const Mlp& spec, const Tensor& x);

/// Multi-head scaled dot-product attention with input and output
/// projections (all width x width, with biases).
class Attention {
 public:
  Attention() = default;
  Attention(ParamStore& store, const std::string& prefix, std::size_t width, std::size_t heads, Rng& rng);

  /// q: [m, C]; k, v: [n, C]. Scores scaled by 1/sqrt(C/h).
  Var forward(const Var& q, const Var& k, const Var& v) const;

  std::size_t width() const noexcept { return width_; }
  std::size_t heads() const noexcept { return heads_; }

  Var wq, bq, wk, bk, wv, bv, wo, bo;

 private:
  std::size_t width_ = 0;
  std::size_t heads_ = 1;
};

Tensor multi_head_attention(const Attention& spec, const Tensor& q, const Tensor& k, const Tensor& v);

/// Layer-norm gain and bias pair registered in a store.
struct NormParams {
  NormParams() = default;
  NormParams(ParamStore& store, const std::string& prefix, std::size_t width);
  Var apply(const Var& x, double eps = 1e-5) const { return layer_norm_rows(x, gain, bias, eps); }
  Var gain, bias;
};

/// Dense layer registered in a store.
struct LinearParams {
  LinearParams() = default;
  LinearParams(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng);
  Var apply(const Var& x) const { return linear(x, weight, bias); }
  Var weight, bias;
};

}  // namespace fusionq::nn
