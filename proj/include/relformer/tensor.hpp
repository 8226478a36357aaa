#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace relformer {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct Node;
}

// Dense row-major float64 tensor with optional reverse-mode gradient tracking.
//
// A Tensor is a cheap handle; copies alias the same storage. Tensors created
// by ops while grad mode is on remember their inputs so that backward() can
// propagate gradients to every parameter leaf they depend on.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value);
  // Leaf tensor that accumulates gradients.
  static Tensor parameter(Shape shape, std::vector<double> data);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // Only valid on leaves (parameters and constants).
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t i) const;
  double at(std::size_t i, std::size_t j) const;
  double at(std::size_t i, std::size_t j, std::size_t k) const;

  bool requires_grad() const;
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  // Allocates a zero gradient buffer on first use.
  std::span<double> mutable_grad() const;
  void clear_grad();

  // Constant copy with no history.
  Tensor detach() const;

  const detail::Node* node() const { return node_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;

  friend Tensor record_op(Shape, std::vector<double>, std::vector<Tensor>,
                          std::function<void(std::span<const double>)>);
  friend void backward(const Tensor& loss);
};

using BackwardFn = std::function<void(std::span<const double> out_grad)>;

// Creates the output of a custom op. When grad mode is on and any input
// requires grad, `fn` is called during backward with the output gradient and
// is responsible for accumulating into the inputs' mutable_grad().
Tensor record_op(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                 BackwardFn fn);

// Reverse sweep from a scalar loss. Accumulates into every reachable leaf that
// requires grad, then releases the recorded graph. A second call on the same
// loss is a UsageError.
void backward(const Tensor& loss);

bool grad_enabled();

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// ---- ops ------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k] x [k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m,k] x [n,k]^T
// x[..., in] * w[in, out] + b[out]; leading dimensions preserved.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
// x[..., c] + v[c]
Tensor add_broadcast_row(const Tensor& x, const Tensor& v);

Tensor relu(const Tensor& x);
Tensor exp(const Tensor& x);
// log(max(x, floor)); gradient is zero where x < floor.
Tensor log_clamped(const Tensor& x, double floor);
Tensor clamp(const Tensor& x, double lo, double hi);

Tensor sum(const Tensor& x);
Tensor softmax_lastdim(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);

Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose(const Tensor& x);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t count);
Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count);
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);
// Flat-index element gather; returns a rank-1 tensor.
Tensor pick(const Tensor& x, std::span<const std::size_t> flat_indices);

}  // namespace relformer
