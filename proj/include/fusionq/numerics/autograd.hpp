#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "fusionq/numerics/tensor.hpp"

namespace fusionq::nn {

namespace detail {

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Tensor& grad_buffer() {
    if (grad.empty() && !value.empty()) grad = Tensor(value.shape(), 0.0);
    return grad;
  }
};

}  // namespace detail

/// Handle to a node of the reverse-mode graph. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  /// Leaf that accumulates gradients across backward passes.
  static Var parameter(Tensor value) { return Var(std::move(value), true); }
  static Var constant(Tensor value) { return Var(std::move(value), false); }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  /// Accumulated gradient; empty tensor when nothing flowed back.
  const Tensor& grad() const { return node_->grad; }
  void zero_grad();

  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }

  detail::Node* node() const noexcept { return node_.get(); }
  const std::shared_ptr<detail::Node>& shared_node() const noexcept { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Builds an operation result. The backward closure is recorded only when
/// some parent requires gradients; otherwise the result is a constant.
Var make_result(Tensor value, std::vector<Var> parents, std::function<void(detail::Node&)> backward);

/// Runs reverse-mode accumulation from a scalar root (seed gradient 1).
void backward(const Var& root);

// --- matrix algebra -------------------------------------------------------
Var matmul(const Var& a, const Var& b);     // [m,k]·[k,n]
Var matmul_nt(const Var& a, const Var& b);  // [m,k]·[n,k]^T
Var linear(const Var& x, const Var& weight, const Var& bias);  // x·W + b, W is [in,out]

// --- elementwise ----------------------------------------------------------
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var add_row(const Var& a, const Var& row);  // broadcast a [m,n] + row [n]
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var relu(const Var& a);
Var sigmoid(const Var& a);
Var tanh(const Var& a);
Var exp(const Var& a);
Var log_floor(const Var& a, double floor);
Var abs(const Var& a);

// --- row-wise -------------------------------------------------------------
Var softmax_rows(const Var& a);
Var log_softmax_rows(const Var& a);
Var layer_norm_rows(const Var& x, const Var& gain, const Var& bias, double eps);
/// Mean of consecutive groups of `group` rows: [g*m, n] -> [m, n].
Var group_mean_rows(const Var& a, std::size_t group);
/// Row i of the result is sum_j u[i,j] * s[i, 3j:3j+3].
Var expected_positions(const Var& u, const Var& s);
/// points[i, 3k:3k+3] = anchors[i,:] + offsets[i, 3k:3k+3].
Var add_anchor_offsets(const Var& anchors, const Var& offsets);
/// Sinusoidal encoding of every scalar of every row; see sinpos_encode.
Var sinpos_rows(const Var& x, std::size_t channels_per_scalar, double temperature);

// --- structure ------------------------------------------------------------
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var slice_cols(const Var& a, std::size_t begin, std::size_t end);
Var slice_rows(const Var& a, std::size_t begin, std::size_t end);
Var gather_rows(const Var& a, std::span<const std::size_t> rows);
Var reshape(const Var& a, Tensor::Shape shape);

// --- reductions -----------------------------------------------------------
Var sum(const Var& a);
Var mean(const Var& a);
Var weighted_sum(std::span<const Var> scalars, std::span<const double> weights);

}  // namespace fusionq::nn
