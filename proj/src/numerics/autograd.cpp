#include "fusionq/numerics/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>
#include <unordered_set>

#include "fusionq/errors.hpp"

namespace fusionq::nn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

MapC as_mat(const Tensor& t) { return MapC(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())); }
Map as_mat(Tensor& t) { return Map(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())); }

Tensor mat(std::size_t r, std::size_t c) { return Tensor({r, c}, 0.0); }

void require(bool ok, const char* op, const std::string& what) {
  if (!ok) throw ShapeError(std::string(op) + ": " + what);
}

std::string dims(const Tensor& t) { return std::to_string(t.rows()) + "x" + std::to_string(t.cols()); }

detail::Node& parent(detail::Node& n, std::size_t i) { return *n.parents[i]; }

}  // namespace

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<detail::Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

void Var::zero_grad() {
  if (node_ && !node_->grad.empty()) node_->grad.fill(0.0);
}

Var make_result(Tensor value, std::vector<Var> parents, std::function<void(detail::Node&)> backward) {
  const bool needs = std::any_of(parents.begin(), parents.end(), [](const Var& p) { return p.requires_grad(); });
  Var out(std::move(value), needs);
  if (needs) {
    auto* node = out.node();
    node->parents.reserve(parents.size());
    for (const auto& p : parents) node->parents.push_back(p.shared_node());
    node->backward = std::move(backward);
  }
  return out;
}

void backward(const Var& root) {
  if (!root.defined()) return;
  if (root.value().size() != 1) throw ShapeError("backward: root must be a scalar");
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* p = node->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

// --------------------------------------------------------------------------
// matrix algebra

Var matmul(const Var& a, const Var& b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require(A.cols() == B.rows(), "matmul", dims(A) + " * " + dims(B));
  Tensor out = mat(A.rows(), B.cols());
  if (A.cols() > 0) as_mat(out).noalias() = as_mat(A) * as_mat(B);
  return make_result(std::move(out), {a, b}, [](detail::Node& n) {
    auto& pa = parent(n, 0);
    auto& pb = parent(n, 1);
    auto g = as_mat(static_cast<const Tensor&>(n.grad));
    if (pa.requires_grad) as_mat(pa.grad_buffer()).noalias() += g * as_mat(static_cast<const Tensor&>(pb.value)).transpose();
    if (pb.requires_grad) as_mat(pb.grad_buffer()).noalias() += as_mat(static_cast<const Tensor&>(pa.value)).transpose() * g;
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require(A.cols() == B.cols(), "matmul_nt", dims(A) + " * (" + dims(B) + ")^T");
  Tensor out = mat(A.rows(), B.rows());
  if (A.cols() > 0) as_mat(out).noalias() = as_mat(A) * as_mat(B).transpose();
  return make_result(std::move(out), {a, b}, [](detail::Node& n) {
    auto& pa = parent(n, 0);
    auto& pb = parent(n, 1);
    auto g = as_mat(static_cast<const Tensor&>(n.grad));
    if (pa.requires_grad) as_mat(pa.grad_buffer()).noalias() += g * as_mat(static_cast<const Tensor&>(pb.value));
    if (pb.requires_grad) as_mat(pb.grad_buffer()).noalias() += g.transpose() * as_mat(static_cast<const Tensor&>(pa.value));
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  const Tensor& X = x.value();
  const Tensor& W = weight.value();
  const Tensor& b = bias.value();
  require(X.cols() == W.rows(), "linear", "input " + dims(X) + " vs weight " + dims(W));
  require(b.size() == W.cols(), "linear", "bias length " + std::to_string(b.size()) + " vs " + std::to_string(W.cols()));
  Tensor out = mat(X.rows(), W.cols());
  auto O = as_mat(out);
  if (X.cols() > 0) O.noalias() = as_mat(X) * as_mat(W);
  const Eigen::Map<const Eigen::RowVectorXd> brow(b.data(), static_cast<Eigen::Index>(b.size()));
  O.rowwise() += brow;
  return make_result(std::move(out), {x, weight, bias}, [](detail::Node& n) {
    auto& px = parent(n, 0);
    auto& pw = parent(n, 1);
    auto& pb = parent(n, 2);
    auto g = as_mat(static_cast<const Tensor&>(n.grad));
    if (px.requires_grad) as_mat(px.grad_buffer()).noalias() += g * as_mat(static_cast<const Tensor&>(pw.value)).transpose();
    if (pw.requires_grad) as_mat(pw.grad_buffer()).noalias() += as_mat(static_cast<const Tensor&>(px.value)).transpose() * g;
    if (pb.requires_grad) {
      Tensor& gb = pb.grad_buffer();
      Eigen::Map<Eigen::RowVectorXd> gbrow(gb.data(), static_cast<Eigen::Index>(gb.size()));
      gbrow += g.colwise().sum();
    }
  });
}

// --------------------------------------------------------------------------
// elementwise

namespace {

template <class Fwd, class Dfdx>
Var unary(const Var& a, Fwd fwd, Dfdx dfdx) {
  const Tensor& A = a.value();
  Tensor out(A.shape(), 0.0);
  for (std::size_t i = 0; i < A.size(); ++i) out[i] = fwd(A[i]);
  return make_result(std::move(out), {a}, [dfdx](detail::Node& n) {
    auto& pa = parent(n, 0);
    Tensor& g = pa.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * dfdx(pa.value[i], n.value[i]);
  });
}

void same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.size() == b.size() && a.cols() == b.cols(), op, dims(a) + " vs " + dims(b));
}

}  // namespace

Var add(const Var& a, const Var& b) {
  same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return make_result(std::move(out), {a, b}, [](detail::Node& n) {
    for (std::size_t k = 0; k < 2; ++k) {
      auto& p = parent(n, k);
      if (!p.requires_grad) continue;
      Tensor& g = p.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return make_result(std::move(out), {a, b}, [](detail::Node& n) {
    auto& pa = parent(n, 0);
    auto& pb = parent(n, 1);
    if (pa.requires_grad) {
      Tensor& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
    if (pb.requires_grad) {
      Tensor& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return make_result(std::move(out), {a, b}, [](detail::Node& n) {
    auto& pa = parent(n, 0);
    auto& pb = parent(n, 1);
    if (pa.requires_grad) {
      Tensor& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      Tensor& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * pa.value[i];
    }
  });
}

Var add_row(const Var& a, const Var& row) {
  const Tensor& A = a.value();
  const Tensor& R = row.value();
  require(R.size() == A.cols(), "add_row", dims(A) + " + row of " + std::to_string(R.size()));
  Tensor out = A;
  const std::size_t c = A.cols();
  for (std::size_t r = 0; r < A.rows(); ++r)
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] += R[j];
  return make_result(std::move(out), {a, row}, [](detail::Node& n) {
    auto& pa = parent(n, 0);
    auto& pr = parent(n, 1);
    const std::size_t c = n.value.cols();
    if (pa.requires_grad) {
      Tensor& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
    if (pr.requires_grad) {
      Tensor& g = pr.grad_buffer();
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i % c] += n.grad[i];
    }
  });
}

Var scale(const Var& a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Var add_scalar(const Var& a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var relu(const Var& a) {
  return unary(a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var sigmoid(const Var& a) {
  return unary(
      a,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var tanh(const Var& a) {
  return unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var exp(const Var& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log_floor(const Var& a, double floor) {
  return unary(
      a, [floor](double x) { return std::log(std::max(x, floor)); },
      [floor](double x, double) { return x > floor ? 1.0 / x : 0.0; });
}

Var abs(const Var& a) {
  return unary(
      a, [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

// --------------------------------------------------------------------------
// row-wise

Var softmax_rows(const Var& a) {
  const Tensor& A = a.value();
  Tensor out(A.shape(), 0.0);
  const std::size_t c = A.cols();
  require(c > 0, "softmax_rows", "empty rows");
  for (std::size_t r = 0; r < A.rows(); ++r) {
    const double* x = A.data() + r * c;
    double* y = out.data() + r * c;
    const double mx = *std::max_element(x, x + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < c; ++j) y[j] /= z;
  }
  return make_result(std::move(out), {a}, [](detail::Node& n) {
    auto& pa = parent(n, 0);
    Tensor& g = pa.grad_buffer();
    const std::size_t c = n.value.cols();
    for (std::size_t r = 0; r < n.value.rows(); ++r) {
      const double* y = n.value.data() + r * c;
      const double* gy = n.grad.data() + r * c;
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += y[j] * gy[j];
      for (std::size_t j = 0; j < c; ++j) g[r * c + j] += y[j] * (gy[j] - dot);
    }
  });
}

Var log_softmax_rows(const Var& a) {
  const Tensor& A = a.value();
  Tensor out(A.shape(), 0.0);
  const std::size_t c = A.cols();
  require(c > 0, "log_softmax_rows", "empty rows");
  for (std::size_t r = 0; r < A.rows(); ++r) {
    const double* x = A.data() + r * c;
    double* y = out.data() + r * c;
    const double mx = *std::max_element(x, x + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(x[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) y[j] = x[j] - lse;
  }
  return make_result(std::move(out), {a}, [](detail::Node& n) {
    auto& pa = parent(n, 0);
    Tensor& g = pa.grad_buffer();
    const std::size_t c = n.value.cols();
    for (std::size_t r = 0; r < n.value.rows(); ++r) {
      const double* y = n.value.data() + r * c;
      const double* gy = n.grad.data() + r * c;
      double s = 0.0;
      for (std::size_t j = 0; j < c; ++j) s += gy[j];
      for (std::size_t j = 0; j < c; ++j) g[r * c + j] += gy[j] - std::exp(y[j]) * s;
    }
  });
}

Var layer_norm_rows(const Var& x, const Var& gain, const Var& bias, double eps) {
  const Tensor& X = x.value();
  const std::size_t c = X.cols();
  require(gain.value().size() == c && bias.value().size() == c, "layer_norm_rows",
          "gain/bias length must equal " + std::to_string(c));
  if (!(eps >= 0.0)) throw DomainError("layer_norm_rows: eps must be non-negative");
  const std::size_t m = X.rows();
  Tensor out(X.shape(), 0.0);
  // Normalized values and inverse std are needed by the backward pass.
  auto xhat = std::make_shared<Tensor>(X.shape(), 0.0);
  auto inv_std = std::make_shared<std::vector<double>>(m);
  for (std::size_t r = 0; r < m; ++r) {
    const double* xr = X.data() + r * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += xr[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(c);
    const double denom = var + eps;
    const double is = denom > 0.0 ? 1.0 / std::sqrt(denom) : 0.0;
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (xr[j] - mu) * is;
      (*xhat)[r * c + j] = h;
      out[r * c + j] = h * gain.value()[j] + bias.value()[j];
    }
  }
  return make_result(std::move(out), {x, gain, bias}, [xhat, inv_std](detail::Node& n) {
    auto& px = parent(n, 0);
    auto& pg = parent(n, 1);
    auto& pb = parent(n, 2);
    const std::size_t c = n.value.cols();
    const std::size_t m = n.value.rows();
    const auto& H = *xhat;
    if (pg.requires_grad || pb.requires_grad) {
      Tensor* gg = pg.requires_grad ? &pg.grad_buffer() : nullptr;
      Tensor* gb = pb.requires_grad ? &pb.grad_buffer() : nullptr;
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t j = 0; j < c; ++j) {
          const double gy = n.grad[r * c + j];
          if (gg) (*gg)[j] += gy * H[r * c + j];
          if (gb) (*gb)[j] += gy;
        }
    }
    if (px.requires_grad) {
      Tensor& gx = px.grad_buffer();
      const double inv_c = 1.0 / static_cast<double>(c);
      for (std::size_t r = 0; r < m; ++r) {
        double s1 = 0.0, s2 = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          const double gh = n.grad[r * c + j] * pg.value[j];
          s1 += gh;
          s2 += gh * H[r * c + j];
        }
        const double is = (*inv_std)[r];
        for (std::size_t j = 0; j < c; ++j) {
          const double gh = n.grad[r * c + j] * pg.value[j];
          gx[r * c + j] += is * (gh - inv_c * s1 - H[r * c + j] * inv_c * s2);
        }
      }
    }
  });
}

Var group_mean_rows(const Var& a, std::size_t group) {
  const Tensor& A = a.value();
  require(group > 0 && A.rows() % group == 0, "group_mean_rows",
          std::to_string(A.rows()) + " rows not divisible by " + std::to_string(group));
  const std::size_t m = A.rows() / group;
  const std::size_t c = A.cols();
  Tensor out = mat(m, c);
  const double w = 1.0 / static_cast<double>(group);
  for (std::size_t r = 0; r < A.rows(); ++r)
    for (std::size_t j = 0; j < c; ++j) out[(r / group) * c + j] += w * A[r * c + j];
  return make_result(std::move(out), {a}, [group, w](detail::Node& n) {
    auto& pa = parent(n, 0);
    Tensor& g = pa.grad_buffer();
    const std::size_t c = n.value.cols();
    for (std::size_t r = 0; r < pa.value.rows(); ++r)
      for (std::size_t j = 0; j < c; ++j) g[r * c + j] += w * n.grad[(r / group) * c + j];
  });
}

Var expected_positions(const Var& u, const Var& s) {
  const Tensor& U = u.value();
  const Tensor& S = s.value();
  const std::size_t m = U.rows();
  const std::size_t nd = U.cols();
  require(S.rows() == m && S.cols() == 3 * nd, "expected_positions", dims(U) + " vs positions " + dims(S));
  Tensor out = mat(m, 3);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < nd; ++j)
      for (std::size_t d = 0; d < 3; ++d) out[i * 3 + d] += U[i * nd + j] * S[i * 3 * nd + 3 * j + d];
  return make_result(std::move(out), {u, s}, [](detail::Node& n) {
    auto& pu = parent(n, 0);
    auto& ps = parent(n, 1);
    const std::size_t m = pu.value.rows();
    const std::size_t nd = pu.value.cols();
    if (pu.requires_grad) {
      Tensor& g = pu.grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < nd; ++j) {
          double acc = 0.0;
          for (std::size_t d = 0; d < 3; ++d) acc += n.grad[i * 3 + d] * ps.value[i * 3 * nd + 3 * j + d];
          g[i * nd + j] += acc;
        }
    }
    if (ps.requires_grad) {
      Tensor& g = ps.grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < nd; ++j)
          for (std::size_t d = 0; d < 3; ++d) g[i * 3 * nd + 3 * j + d] += n.grad[i * 3 + d] * pu.value[i * nd + j];
    }
  });
}

Var add_anchor_offsets(const Var& anchors, const Var& offsets) {
  const Tensor& A = anchors.value();
  const Tensor& O = offsets.value();
  require(A.cols() == 3 && O.rows() == A.rows() && O.cols() % 3 == 0, "add_anchor_offsets",
          dims(A) + " vs offsets " + dims(O));
  Tensor out = O;
  const std::size_t c = O.cols();
  for (std::size_t i = 0; i < O.rows(); ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] += A[i * 3 + j % 3];
  return make_result(std::move(out), {anchors, offsets}, [](detail::Node& n) {
    auto& pa = parent(n, 0);
    auto& po = parent(n, 1);
    const std::size_t c = n.value.cols();
    if (pa.requires_grad) {
      Tensor& g = pa.grad_buffer();
      for (std::size_t i = 0; i < n.value.rows(); ++i)
        for (std::size_t j = 0; j < c; ++j) g[i * 3 + j % 3] += n.grad[i * c + j];
    }
    if (po.requires_grad) {
      Tensor& g = po.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
  });
}

Var sinpos_rows(const Var& x, std::size_t channels_per_scalar, double temperature) {
  if (channels_per_scalar == 0 || channels_per_scalar % 2 != 0)
    throw ConfigError("sinpos: channels per scalar must be a positive even count");
  if (!(temperature > 0.0)) throw ConfigError("sinpos: temperature must be positive");
  const Tensor& X = x.value();
  const std::size_t k = channels_per_scalar / 2;
  const std::size_t d = X.cols();
  const std::size_t width = d * channels_per_scalar;
  auto freq = std::make_shared<std::vector<double>>(k);
  for (std::size_t i = 0; i < k; ++i)
    (*freq)[i] = 1.0 / std::pow(temperature, static_cast<double>(i) / static_cast<double>(k));
  Tensor out = mat(X.rows(), width);
  for (std::size_t r = 0; r < X.rows(); ++r)
    for (std::size_t j = 0; j < d; ++j) {
      const double v = X[r * d + j];
      for (std::size_t i = 0; i < k; ++i) {
        const double arg = v * (*freq)[i];
        out[r * width + j * channels_per_scalar + 2 * i] = std::sin(arg);
        out[r * width + j * channels_per_scalar + 2 * i + 1] = std::cos(arg);
      }
    }
  return make_result(std::move(out), {x}, [freq, channels_per_scalar](detail::Node& n) {
    auto& px = parent(n, 0);
    Tensor& g = px.grad_buffer();
    const std::size_t d = px.value.cols();
    const std::size_t k = freq->size();
    const std::size_t width = n.value.cols();
    for (std::size_t r = 0; r < px.value.rows(); ++r)
      for (std::size_t j = 0; j < d; ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i < k; ++i) {
          const std::size_t base = r * width + j * channels_per_scalar + 2 * i;
          // d sin = cos * f, d cos = -sin * f
          acc += (*freq)[i] * (n.grad[base] * n.value[base + 1] - n.grad[base + 1] * n.value[base]);
        }
        g[r * d + j] += acc;
      }
  });
}

// --------------------------------------------------------------------------
// structure

Var concat_cols(std::span<const Var> parts) {
  require(!parts.empty(), "concat_cols", "no inputs");
  const std::size_t m = parts[0].rows();
  std::size_t width = 0;
  for (const auto& p : parts) {
    require(p.rows() == m, "concat_cols", "row count mismatch");
    width += p.cols();
  }
  Tensor out = mat(m, width);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t c = p.cols();
    for (std::size_t r = 0; r < m; ++r)
      std::copy_n(p.value().data() + r * c, c, out.data() + r * width + off);
    off += c;
  }
  std::vector<Var> parents(parts.begin(), parts.end());
  return make_result(std::move(out), std::move(parents), [](detail::Node& n) {
    const std::size_t width = n.value.cols();
    const std::size_t m = n.value.rows();
    std::size_t off = 0;
    for (auto& pp : n.parents) {
      const std::size_t c = pp->value.cols();
      if (pp->requires_grad) {
        Tensor& g = pp->grad_buffer();
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t j = 0; j < c; ++j) g[r * c + j] += n.grad[r * width + off + j];
      }
      off += c;
    }
  });
}

Var concat_rows(std::span<const Var> parts) {
  require(!parts.empty(), "concat_rows", "no inputs");
  std::size_t c = 0;
  bool have_c = false;
  std::size_t m = 0;
  for (const auto& p : parts) {
    if (p.value().empty()) continue;
    if (!have_c) {
      c = p.cols();
      have_c = true;
    }
    require(p.cols() == c, "concat_rows", "column count mismatch");
    m += p.rows();
  }
  if (!have_c) c = parts[0].cols();
  Tensor out = mat(m, c);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy_n(p.value().data(), p.value().size(), out.data() + off);
    off += p.value().size();
  }
  std::vector<Var> parents(parts.begin(), parts.end());
  return make_result(std::move(out), std::move(parents), [](detail::Node& n) {
    std::size_t off = 0;
    for (auto& pp : n.parents) {
      const std::size_t sz = pp->value.size();
      if (pp->requires_grad && sz > 0) {
        Tensor& g = pp->grad_buffer();
        for (std::size_t i = 0; i < sz; ++i) g[i] += n.grad[off + i];
      }
      off += sz;
    }
  });
}

Var slice_cols(const Var& a, std::size_t begin, std::size_t end) {
  const Tensor& A = a.value();
  require(begin <= end && end <= A.cols(), "slice_cols", "range out of bounds");
  const std::size_t m = A.rows();
  const std::size_t c = A.cols();
  const std::size_t w = end - begin;
  Tensor out = mat(m, w);
  for (std::size_t r = 0; r < m; ++r) std::copy_n(A.data() + r * c + begin, w, out.data() + r * w);
  return make_result(std::move(out), {a}, [begin](detail::Node& n) {
    auto& pa = parent(n, 0);
    Tensor& g = pa.grad_buffer();
    const std::size_t c = pa.value.cols();
    const std::size_t w = n.value.cols();
    for (std::size_t r = 0; r < n.value.rows(); ++r)
      for (std::size_t j = 0; j < w; ++j) g[r * c + begin + j] += n.grad[r * w + j];
  });
}

Var slice_rows(const Var& a, std::size_t begin, std::size_t end) {
  const Tensor& A = a.value();
  require(begin <= end && end <= A.rows(), "slice_rows", "range out of bounds");
  const std::size_t c = A.cols();
  Tensor out = mat(end - begin, c);
  std::copy_n(A.data() + begin * c, (end - begin) * c, out.data());
  return make_result(std::move(out), {a}, [begin](detail::Node& n) {
    auto& pa = parent(n, 0);
    Tensor& g = pa.grad_buffer();
    const std::size_t c = pa.value.cols();
    for (std::size_t i = 0; i < n.grad.size(); ++i) g[begin * c + i] += n.grad[i];
  });
}

Var gather_rows(const Var& a, std::span<const std::size_t> rows) {
  const Tensor& A = a.value();
  const std::size_t c = A.cols();
  auto idx = std::make_shared<std::vector<std::size_t>>(rows.begin(), rows.end());
  Tensor out = mat(idx->size(), c);
  for (std::size_t i = 0; i < idx->size(); ++i) {
    require((*idx)[i] < A.rows(), "gather_rows", "row index out of range");
    std::copy_n(A.data() + (*idx)[i] * c, c, out.data() + i * c);
  }
  return make_result(std::move(out), {a}, [idx](detail::Node& n) {
    auto& pa = parent(n, 0);
    Tensor& g = pa.grad_buffer();
    const std::size_t c = pa.value.cols();
    for (std::size_t i = 0; i < idx->size(); ++i)
      for (std::size_t j = 0; j < c; ++j) g[(*idx)[i] * c + j] += n.grad[i * c + j];
  });
}

Var reshape(const Var& a, Tensor::Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return make_result(std::move(out), {a}, [](detail::Node& n) {
    auto& pa = parent(n, 0);
    Tensor& g = pa.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
  });
}

// --------------------------------------------------------------------------
// reductions

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return make_result(Tensor({1}, s), {a}, [](detail::Node& n) {
    auto& pa = parent(n, 0);
    Tensor& g = pa.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[0];
  });
}

Var mean(const Var& a) {
  const std::size_t n = a.value().size();
  if (n == 0) return Var(Tensor({1}, 0.0));
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var weighted_sum(std::span<const Var> scalars, std::span<const double> weights) {
  require(scalars.size() == weights.size(), "weighted_sum", "weight count mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    require(scalars[i].value().size() == 1, "weighted_sum", "inputs must be scalars");
    s += weights[i] * scalars[i].value()[0];
  }
  auto w = std::make_shared<std::vector<double>>(weights.begin(), weights.end());
  std::vector<Var> parents(scalars.begin(), scalars.end());
  return make_result(Tensor({1}, s), std::move(parents), [w](detail::Node& n) {
    for (std::size_t i = 0; i < n.parents.size(); ++i) {
      auto& p = *n.parents[i];
      if (p.requires_grad) p.grad_buffer()[0] += (*w)[i] * n.grad[0];
    }
  });
}

}  // namespace fusionq::nn
