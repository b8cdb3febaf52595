#include "fusionq/numerics/kernels.hpp"

#include <algorithm>
#include <cmath>

#include "fusionq/errors.hpp"

namespace fusionq::nn {

Tensor sinpos_encode(std::span<const double> x, std::size_t channels_per_scalar, double temperature) {
  Tensor row({1, x.size()}, 0.0);
  std::copy(x.begin(), x.end(), row.data());
  Tensor enc = sinpos_rows(Var(std::move(row)), channels_per_scalar, temperature).value();
  return enc.reshaped({enc.size()});
}

std::vector<double> softmax(std::span<const double> logits) {
  if (logits.empty()) throw DomainError("softmax: empty logits");
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) z += (out[i] = std::exp(logits[i] - mx));
  for (auto& v : out) v /= z;
  return out;
}

std::vector<double> layer_norm(std::span<const double> x, std::span<const double> gain, std::span<const double> bias,
                               double eps) {
  if (gain.size() != x.size() || bias.size() != x.size()) throw ShapeError("layer_norm: length mismatch");
  if (x.empty()) return {};
  Tensor X({1, x.size()}, 0.0);
  std::copy(x.begin(), x.end(), X.data());
  Tensor G({x.size()}, 0.0), B({x.size()}, 0.0);
  std::copy(gain.begin(), gain.end(), G.data());
  std::copy(bias.begin(), bias.end(), B.data());
  const Tensor y = layer_norm_rows(Var(std::move(X)), Var(std::move(G)), Var(std::move(B)), eps).value();
  return {y.values().begin(), y.values().end()};
}

// --------------------------------------------------------------------------

Mlp::Mlp(ParamStore& store, const std::string& prefix, std::vector<std::size_t> widths, Rng& rng)
    : widths_(std::move(widths)) {
  if (widths_.size() < 2) throw ConfigError("mlp: need at least input and output widths");
  for (std::size_t i = 0; i + 1 < widths_.size(); ++i) {
    const auto tag = prefix + ".l" + std::to_string(i);
    weights_.push_back(store.add_xavier(tag + ".w", widths_[i], widths_[i + 1], rng));
    biases_.push_back(store.add_zeros(tag + ".b", {widths_[i + 1]}));
  }
}

Mlp::Mlp(std::vector<std::size_t> widths, std::vector<Var> weights, std::vector<Var> biases)
    : widths_(std::move(widths)), weights_(std::move(weights)), biases_(std::move(biases)) {
  if (widths_.size() < 2 || weights_.size() + 1 != widths_.size() || biases_.size() != weights_.size())
    throw ConfigError("mlp: inconsistent layer description");
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    const auto& w = weights_[i].value();
    if (w.rows() != widths_[i] || w.cols() != widths_[i + 1] || biases_[i].value().size() != widths_[i + 1])
      throw ShapeError("mlp: layer " + std::to_string(i) + " parameters do not match widths");
  }
}

Var Mlp::forward(const Var& x) const {
  if (x.cols() != widths_.front())
    throw ShapeError("mlp: input width " + std::to_string(x.cols()) + " != " + std::to_string(widths_.front()));
  Var h = x;
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    h = linear(h, weights_[i], biases_[i]);
    if (i + 1 < weights_.size()) h = relu(h);
  }
  return h;
}

Tensor Mlp::forward(const Tensor& x) const { return forward(Var(x)).value(); }

std::size_t Mlp::parameter_count() const noexcept {
  std::size_t n = 0;
  for (std::size_t i = 0; i + 1 < widths_.size(); ++i) n += widths_[i] * widths_[i + 1] + widths_[i + 1];
  return n;
}

Tensor mlp_forward(const Mlp& spec, const Tensor& x) { return spec.forward(x); }

// --------------------------------------------------------------------------

Attention::Attention(ParamStore& store, const std::string& prefix, std::size_t width, std::size_t heads, Rng& rng)
    : width_(width), heads_(heads) {
  if (heads == 0 || width % heads != 0) throw ConfigError("attention: width must be divisible by head count");
  wq = store.add_xavier(prefix + ".wq", width, width, rng);
  bq = store.add_zeros(prefix + ".bq", {width});
  wk = store.add_xavier(prefix + ".wk", width, width, rng);
  bk = store.add_zeros(prefix + ".bk", {width});
  wv = store.add_xavier(prefix + ".wv", width, width, rng);
  bv = store.add_zeros(prefix + ".bv", {width});
  wo = store.add_xavier(prefix + ".wo", width, width, rng);
  bo = store.add_zeros(prefix + ".bo", {width});
}

Var Attention::forward(const Var& q, const Var& k, const Var& v) const {
  if (q.cols() != width_ || k.cols() != width_ || v.cols() != width_)
    throw ShapeError("attention: token width must equal " + std::to_string(width_));
  if (k.rows() != v.rows()) throw ShapeError("attention: key and value counts differ");
  if (k.rows() == 0) throw DomainError("attention: no keys");
  const Var Q = linear(q, wq, bq);
  const Var K = linear(k, wk, bk);
  const Var V = linear(v, wv, bv);
  const std::size_t dh = width_ / heads_;
  const double s = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Var> outs;
  outs.reserve(heads_);
  for (std::size_t h = 0; h < heads_; ++h) {
    const Var qh = heads_ == 1 ? Q : slice_cols(Q, h * dh, (h + 1) * dh);
    const Var kh = heads_ == 1 ? K : slice_cols(K, h * dh, (h + 1) * dh);
    const Var vh = heads_ == 1 ? V : slice_cols(V, h * dh, (h + 1) * dh);
    const Var p = softmax_rows(scale(matmul_nt(qh, kh), s));
    outs.push_back(matmul(p, vh));
  }
  const Var joined = heads_ == 1 ? outs.front() : concat_cols(outs);
  return linear(joined, wo, bo);
}

Tensor multi_head_attention(const Attention& spec, const Tensor& q, const Tensor& k, const Tensor& v) {
  return spec.forward(Var(q), Var(k), Var(v)).value();
}

NormParams::NormParams(ParamStore& store, const std::string& prefix, std::size_t width)
    : gain(store.add_filled(prefix + ".gain", {width}, 1.0)), bias(store.add_zeros(prefix + ".bias", {width})) {}

LinearParams::LinearParams(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng)
    : weight(store.add_xavier(prefix + ".w", in, out, rng)), bias(store.add_zeros(prefix + ".b", {out})) {}

}  // namespace fusionq::nn
