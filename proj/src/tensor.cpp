#include "relformer/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include <Eigen/Core>

#include "relformer/errors.hpp"

namespace relformer {

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  bool leaf = true;
  bool consumed = false;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn fn;
};

}  // namespace detail

namespace {

thread_local bool g_grad_enabled = true;

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

ConstMatMap as_matrix(std::span<const double> v, std::size_t rows, std::size_t cols) {
  return ConstMatMap(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

MatMap as_matrix(std::span<double> v, std::size_t rows, std::size_t cols) {
  return MatMap(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* operand) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": operand '" + operand + "' must have rank " +
                     std::to_string(rank) + ", got " + shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

// Rows = product of all leading dimensions, cols = trailing dimension.
std::pair<std::size_t, std::size_t> as_rows_cols(const Shape& s) {
  if (s.empty()) return {1, 1};
  std::size_t cols = s.back();
  return {cols == 0 ? 0 : shape_numel(s) / cols, cols};
}

void accumulate(const Tensor& t, std::span<const double> g) {
  auto dst = t.mutable_grad();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ---- Tensor ----------------------------------------------------------------

Tensor::Tensor(Shape shape) : node_(std::make_shared<detail::Node>()) {
  node_->data.assign(shape_numel(shape), 0.0);
  node_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : node_(std::make_shared<detail::Node>()) {
  if (data.size() != shape_numel(shape)) {
    throw ShapeError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  }
  node_->shape = std::move(shape);
  node_->data = std::move(data);
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

Tensor Tensor::parameter(Shape shape, std::vector<double> data) {
  Tensor t(std::move(shape), std::move(data));
  t.node_->requires_grad = true;
  return t;
}

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::size(std::size_t axis) const {
  if (axis >= rank()) throw ShapeError("axis " + std::to_string(axis) + " out of range");
  return node_->shape[axis];
}

std::size_t Tensor::numel() const { return node_->data.size(); }

std::span<const double> Tensor::data() const { return node_->data; }

std::span<double> Tensor::mutable_data() {
  if (!node_->leaf) throw UsageError("mutable_data() on a non-leaf tensor");
  return node_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

double Tensor::at(std::size_t i) const { return node_->data.at(i); }

double Tensor::at(std::size_t i, std::size_t j) const {
  return node_->data.at(i * node_->shape.at(1) + j);
}

double Tensor::at(std::size_t i, std::size_t j, std::size_t k) const {
  const auto& s = node_->shape;
  return node_->data.at((i * s.at(1) + j) * s.at(2) + k);
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
bool Tensor::is_leaf() const { return node_->leaf; }
bool Tensor::has_grad() const { return !node_->grad.empty() || node_->data.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw UsageError("tensor has no gradient");
  return node_->grad;
}

std::span<double> Tensor::mutable_grad() const {
  if (node_->grad.size() != node_->data.size()) node_->grad.assign(node_->data.size(), 0.0);
  return node_->grad;
}

void Tensor::clear_grad() {
  node_->grad.clear();
  node_->grad.shrink_to_fit();
}

Tensor Tensor::detach() const { return Tensor(shape(), node_->data); }

// ---- graph -----------------------------------------------------------------

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor record_op(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                 BackwardFn fn) {
  Tensor out(std::move(shape), std::move(data));
  if (!g_grad_enabled) return out;
  bool needs = std::any_of(inputs.begin(), inputs.end(),
                           [](const Tensor& t) { return t.requires_grad(); });
  if (!needs) return out;
  auto& node = *out.node_;
  node.requires_grad = true;
  node.leaf = false;
  node.parents.reserve(inputs.size());
  for (auto& in : inputs) {
    if (in.requires_grad()) node.parents.push_back(in.node_);
  }
  node.fn = std::move(fn);
  return out;
}

void backward(const Tensor& loss) {
  if (!loss.defined()) throw UsageError("backward() on an undefined tensor");
  auto root = loss.node_;
  if (root->consumed) {
    throw UsageError("backward() called twice on the same loss; re-run the forward pass first");
  }
  if (root->data.size() != 1) {
    throw ShapeError("backward() requires a scalar loss, got " + shape_str(root->shape));
  }
  root->consumed = true;
  if (!root->requires_grad) return;

  // Iterative post-order DFS.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{root.get(), 0}};
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* p = node->parents[next++].get();
      if (visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->grad.assign(1, 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->leaf || !node->fn || node->grad.empty()) continue;
    node->fn(node->grad);
  }
  for (detail::Node* node : order) {
    if (node->leaf) continue;
    node->fn = nullptr;
    node->parents.clear();
    node->grad.clear();
    node->grad.shrink_to_fit();
  }
}

// ---- ops -------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul", "a");
  require_rank(b, 2, "matmul", "b");
  const std::size_t m = a.size(0), k = a.size(1), n = b.size(1);
  if (b.size(0) != k) {
    throw ShapeError("matmul: inner dimension mismatch " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  std::vector<double> out(m * n);
  as_matrix(std::span<double>(out), m, n).noalias() =
      as_matrix(a.data(), m, k) * as_matrix(b.data(), k, n);
  return record_op({m, n}, std::move(out), {a, b}, [a, b, m, k, n](std::span<const double> g) mutable {
    auto gm = as_matrix(g, m, n);
    if (a.requires_grad())
      as_matrix(a.mutable_grad(), m, k).noalias() += gm * as_matrix(b.data(), k, n).transpose();
    if (b.requires_grad())
      as_matrix(b.mutable_grad(), k, n).noalias() += as_matrix(a.data(), m, k).transpose() * gm;
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul_nt", "a");
  require_rank(b, 2, "matmul_nt", "b");
  const std::size_t m = a.size(0), k = a.size(1), n = b.size(0);
  if (b.size(1) != k) {
    throw ShapeError("matmul_nt: inner dimension mismatch " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()) + "^T");
  }
  std::vector<double> out(m * n);
  as_matrix(std::span<double>(out), m, n).noalias() =
      as_matrix(a.data(), m, k) * as_matrix(b.data(), n, k).transpose();
  return record_op({m, n}, std::move(out), {a, b}, [a, b, m, k, n](std::span<const double> g) mutable {
    auto gm = as_matrix(g, m, n);
    if (a.requires_grad())
      as_matrix(a.mutable_grad(), m, k).noalias() += gm * as_matrix(b.data(), n, k);
    if (b.requires_grad())
      as_matrix(b.mutable_grad(), n, k).noalias() += gm.transpose() * as_matrix(a.data(), m, k);
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_rank(w, 2, "linear", "weight");
  require_rank(b, 1, "linear", "bias");
  if (x.rank() == 0 || x.shape().back() != w.size(0)) {
    throw ShapeError("linear: input 'x' trailing dimension of " + shape_str(x.shape()) +
                     " does not match weight rows " + std::to_string(w.size(0)));
  }
  if (b.size(0) != w.size(1)) throw ShapeError("linear: bias length does not match weight columns");
  const auto [rows, in] = as_rows_cols(x.shape());
  const std::size_t out_dim = w.size(1);
  std::vector<double> out(rows * out_dim);
  auto om = as_matrix(std::span<double>(out), rows, out_dim);
  om.noalias() = as_matrix(x.data(), rows, in) * as_matrix(w.data(), in, out_dim);
  om.rowwise() += as_matrix(b.data(), 1, out_dim).row(0);
  Shape shape = x.shape();
  shape.back() = out_dim;
  return record_op(std::move(shape), std::move(out), {x, w, b},
                   [x, w, b, rows = rows, in = in, out_dim](std::span<const double> g) mutable {
                     auto gm = as_matrix(g, rows, out_dim);
                     if (x.requires_grad())
                       as_matrix(x.mutable_grad(), rows, in).noalias() +=
                           gm * as_matrix(w.data(), in, out_dim).transpose();
                     if (w.requires_grad())
                       as_matrix(w.mutable_grad(), in, out_dim).noalias() +=
                           as_matrix(x.data(), rows, in).transpose() * gm;
                     if (b.requires_grad())
                       as_matrix(b.mutable_grad(), 1, out_dim) += gm.colwise().sum();
                   });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
  return record_op(a.shape(), std::move(out), {a, b}, [a, b](std::span<const double> g) mutable {
    if (a.requires_grad()) accumulate(a, g);
    if (b.requires_grad()) accumulate(b, g);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] - bd[i];
  return record_op(a.shape(), std::move(out), {a, b}, [a, b](std::span<const double> g) mutable {
    if (a.requires_grad()) accumulate(a, g);
    if (b.requires_grad()) {
      auto gb = b.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  return record_op(a.shape(), std::move(out), {a, b}, [a, b](std::span<const double> g) mutable {
    if (a.requires_grad()) {
      auto ga = a.mutable_grad();
      auto bd = b.data();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bd[i];
    }
    if (b.requires_grad()) {
      auto gb = b.mutable_grad();
      auto ad = a.data();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ad[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v *= factor;
  return record_op(a.shape(), std::move(out), {a}, [a, factor](std::span<const double> g) mutable {
    auto ga = a.mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
  });
}

Tensor add_broadcast_row(const Tensor& x, const Tensor& v) {
  require_rank(v, 1, "add_broadcast_row", "v");
  if (x.rank() == 0 || x.shape().back() != v.size(0)) {
    throw ShapeError("add_broadcast_row: trailing dimension mismatch " + shape_str(x.shape()) +
                     " vs " + shape_str(v.shape()));
  }
  const auto [rows, cols] = as_rows_cols(x.shape());
  std::vector<double> out(x.data().begin(), x.data().end());
  auto vd = v.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += vd[c];
  return record_op(x.shape(), std::move(out), {x, v},
                   [x, v, rows = rows, cols = cols](std::span<const double> g) mutable {
                     if (x.requires_grad()) accumulate(x, g);
                     if (v.requires_grad()) {
                       auto gv = v.mutable_grad();
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t c = 0; c < cols; ++c) gv[c] += g[r * cols + c];
                     }
                   });
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (double& v : out) v = v > 0.0 ? v : 0.0;
  return record_op(x.shape(), std::move(out), {x}, [x](std::span<const double> g) mutable {
    auto gx = x.mutable_grad();
    auto xd = x.data();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xd[i] > 0.0) gx[i] += g[i];
  });
}

Tensor exp(const Tensor& x) {
  std::vector<double> out(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(xd[i]);
  std::vector<double> saved = out;
  return record_op(x.shape(), std::move(out), {x},
                   [x, saved = std::move(saved)](std::span<const double> g) mutable {
                     auto gx = x.mutable_grad();
                     for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * saved[i];
                   });
}

Tensor log_clamped(const Tensor& x, double floor) {
  std::vector<double> out(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(std::max(xd[i], floor));
  return record_op(x.shape(), std::move(out), {x}, [x, floor](std::span<const double> g) mutable {
    auto gx = x.mutable_grad();
    auto xd = x.data();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xd[i] >= floor) gx[i] += g[i] / xd[i];
  });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (double& v : out) v = std::clamp(v, lo, hi);
  return record_op(x.shape(), std::move(out), {x}, [x, lo, hi](std::span<const double> g) mutable {
    auto gx = x.mutable_grad();
    auto xd = x.data();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xd[i] >= lo && xd[i] <= hi) gx[i] += g[i];
  });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  return record_op({}, {total}, {x}, [x](std::span<const double> g) mutable {
    auto gx = x.mutable_grad();
    for (double& v : gx) v += g[0];
  });
}

Tensor softmax_lastdim(const Tensor& x) {
  if (x.rank() == 0 || x.shape().back() == 0) throw ShapeError("softmax_lastdim: empty last axis");
  const auto [rows, k] = as_rows_cols(x.shape());
  std::vector<double> out(x.numel());
  auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xd.data() + r * k;
    double* o = out.data() + r * k;
    double mx = *std::max_element(in, in + k);
    double z = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      o[c] = std::exp(in[c] - mx);
      z += o[c];
    }
    for (std::size_t c = 0; c < k; ++c) o[c] /= z;
  }
  std::vector<double> saved = out;
  return record_op(x.shape(), std::move(out), {x},
                   [x, saved = std::move(saved), rows = rows, k = k](std::span<const double> g) mutable {
                     auto gx = x.mutable_grad();
                     for (std::size_t r = 0; r < rows; ++r) {
                       const double* p = saved.data() + r * k;
                       const double* gr = g.data() + r * k;
                       double dot = 0.0;
                       for (std::size_t c = 0; c < k; ++c) dot += p[c] * gr[c];
                       for (std::size_t c = 0; c < k; ++c) gx[r * k + c] += p[c] * (gr[c] - dot);
                     }
                   });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_rank(gain, 1, "layer_norm", "gain");
  require_rank(bias, 1, "layer_norm", "bias");
  if (x.rank() == 0 || x.shape().back() != gain.size(0) || bias.size(0) != gain.size(0)) {
    throw ShapeError("layer_norm: feature width mismatch for input " + shape_str(x.shape()));
  }
  const auto [rows, d] = as_rows_cols(x.shape());
  if (d == 0) throw ShapeError("layer_norm: zero feature width");
  std::vector<double> out(x.numel()), xhat(x.numel()), inv_std(rows);
  auto xd = x.data();
  auto gd = gain.data();
  auto bd = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xd.data() + r * d;
    double mean = 0.0;
    for (std::size_t c = 0; c < d; ++c) mean += in[c];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (in[c] - mean) * (in[c] - mean);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      xhat[r * d + c] = (in[c] - mean) * inv_std[r];
      out[r * d + c] = xhat[r * d + c] * gd[c] + bd[c];
    }
  }
  return record_op(
      x.shape(), std::move(out), {x, gain, bias},
      [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std), rows = rows,
       d = d](std::span<const double> g) mutable {
        auto gd = gain.data();
        if (gain.requires_grad() || bias.requires_grad()) {
          std::span<double> gg = gain.requires_grad() ? gain.mutable_grad() : std::span<double>();
          std::span<double> gb = bias.requires_grad() ? bias.mutable_grad() : std::span<double>();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < d; ++c) {
              if (!gg.empty()) gg[c] += g[r * d + c] * xhat[r * d + c];
              if (!gb.empty()) gb[c] += g[r * d + c];
            }
        }
        if (x.requires_grad()) {
          auto gx = x.mutable_grad();
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t r = 0; r < rows; ++r) {
            double sum_dy = 0.0, sum_dy_xhat = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
              double dy = g[r * d + c] * gd[c];
              sum_dy += dy;
              sum_dy_xhat += dy * xhat[r * d + c];
            }
            for (std::size_t c = 0; c < d; ++c) {
              double dy = g[r * d + c] * gd[c];
              gx[r * d + c] +=
                  inv_std[r] * (dy - inv_d * sum_dy - xhat[r * d + c] * inv_d * sum_dy_xhat);
            }
          }
        }
      });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return record_op(std::move(shape), std::move(out), {x},
                   [x](std::span<const double> g) mutable { accumulate(x, g); });
}

Tensor transpose(const Tensor& x) {
  require_rank(x, 2, "transpose", "x");
  const std::size_t r = x.size(0), c = x.size(1);
  std::vector<double> out(x.numel());
  as_matrix(std::span<double>(out), c, r) = as_matrix(x.data(), r, c).transpose();
  return record_op({c, r}, std::move(out), {x}, [x, r, c](std::span<const double> g) mutable {
    as_matrix(x.mutable_grad(), r, c) += as_matrix(g, c, r).transpose();
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no operands");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.rank() == 0 || Shape(p.shape().begin() + 1, p.shape().end()) != tail) {
      throw ShapeError("concat_rows: trailing shape mismatch " + shape_str(p.shape()));
    }
    rows += p.size(0);
  }
  std::vector<double> out;
  out.reserve(rows * shape_numel(tail));
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  Shape shape = tail;
  shape.insert(shape.begin(), rows);
  return record_op(std::move(shape), std::move(out), parts,
                   [parts](std::span<const double> g) mutable {
                     std::size_t off = 0;
                     for (auto& p : parts) {
                       if (p.requires_grad()) accumulate(p, g.subspan(off, p.numel()));
                       off += p.numel();
                     }
                   });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no operands");
  const std::size_t rows = parts[0].rank() == 2 ? parts[0].size(0) : 0;
  std::size_t cols = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_cols", "part");
    if (p.size(0) != rows) throw ShapeError("concat_cols: row count mismatch " + shape_str(p.shape()));
    widths.push_back(p.size(1));
    cols += p.size(1);
  }
  std::vector<double> out(rows * cols);
  std::size_t c0 = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto d = parts[k].data();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(d.data() + r * widths[k], widths[k], out.data() + r * cols + c0);
    c0 += widths[k];
  }
  return record_op({rows, cols}, std::move(out), parts,
                   [parts, widths, rows, cols](std::span<const double> g) mutable {
                     std::size_t c0 = 0;
                     for (std::size_t k = 0; k < parts.size(); ++k) {
                       if (parts[k].requires_grad()) {
                         auto gp = parts[k].mutable_grad();
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t c = 0; c < widths[k]; ++c)
                             gp[r * widths[k] + c] += g[r * cols + c0 + c];
                       }
                       c0 += widths[k];
                     }
                   });
}

Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t count) {
  if (x.rank() == 0 || start + count > x.size(0)) {
    throw ShapeError("slice_rows: range [" + std::to_string(start) + ", " +
                     std::to_string(start + count) + ") out of bounds for " + shape_str(x.shape()));
  }
  const std::size_t stride = x.numel() / std::max<std::size_t>(x.size(0), 1);
  std::vector<double> out(x.data().begin() + start * stride,
                          x.data().begin() + (start + count) * stride);
  Shape shape = x.shape();
  shape[0] = count;
  return record_op(std::move(shape), std::move(out), {x},
                   [x, start, stride](std::span<const double> g) mutable {
                     auto gx = x.mutable_grad();
                     for (std::size_t i = 0; i < g.size(); ++i) gx[start * stride + i] += g[i];
                   });
}

Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count) {
  require_rank(x, 2, "slice_cols", "x");
  const std::size_t rows = x.size(0), cols = x.size(1);
  if (start + count > cols) throw ShapeError("slice_cols: range out of bounds for " + shape_str(x.shape()));
  std::vector<double> out(rows * count);
  auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(xd.data() + r * cols + start, count, out.data() + r * count);
  return record_op({rows, count}, std::move(out), {x},
                   [x, rows, cols, start, count](std::span<const double> g) mutable {
                     auto gx = x.mutable_grad();
                     for (std::size_t r = 0; r < rows; ++r)
                       for (std::size_t c = 0; c < count; ++c) gx[r * cols + start + c] += g[r * count + c];
                   });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  if (x.rank() == 0) throw ShapeError("gather_rows: scalar operand");
  const std::size_t stride = x.numel() / std::max<std::size_t>(x.size(0), 1);
  std::vector<double> out;
  out.reserve(rows.size() * stride);
  auto xd = x.data();
  for (std::size_t r : rows) {
    if (r >= x.size(0)) throw ShapeError("gather_rows: row index " + std::to_string(r) + " out of range");
    out.insert(out.end(), xd.begin() + r * stride, xd.begin() + (r + 1) * stride);
  }
  Shape shape = x.shape();
  shape[0] = rows.size();
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return record_op(std::move(shape), std::move(out), {x},
                   [x, idx = std::move(idx), stride](std::span<const double> g) mutable {
                     auto gx = x.mutable_grad();
                     for (std::size_t k = 0; k < idx.size(); ++k)
                       for (std::size_t c = 0; c < stride; ++c) gx[idx[k] * stride + c] += g[k * stride + c];
                   });
}

Tensor pick(const Tensor& x, std::span<const std::size_t> flat_indices) {
  std::vector<double> out;
  out.reserve(flat_indices.size());
  auto xd = x.data();
  for (std::size_t i : flat_indices) {
    if (i >= xd.size()) throw ShapeError("pick: index " + std::to_string(i) + " out of range");
    out.push_back(xd[i]);
  }
  std::vector<std::size_t> idx(flat_indices.begin(), flat_indices.end());
  return record_op({idx.size()}, std::move(out), {x},
                   [x, idx](std::span<const double> g) mutable {
                     auto gx = x.mutable_grad();
                     for (std::size_t k = 0; k < idx.size(); ++k) gx[idx[k]] += g[k];
                   });
}

}  // namespace relformer
