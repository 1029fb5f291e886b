#pragma once

// Dense float64 tensors with a tape-free reverse-mode autodiff graph.
//
// Every op returns a new Tensor. When any input requires a gradient (and
// gradient recording is enabled) the result carries a Node that knows how to
// push its output gradient back into its inputs. backward() walks the
// reachable nodes in reverse creation order, then releases them; a second
// backward() on the same loss is an error.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dml {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct TensorData;

struct Node {
  std::vector<std::shared_ptr<TensorData>> inputs;
  std::function<void(const TensorData& out)> backward;
  std::uint64_t order = 0;
  bool consumed = false;
};

struct TensorData {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::shared_ptr<Node> node;

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

// Disables graph recording for its lifetime (inference, evaluation).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_enabled();

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorData> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t dim() const { return impl_->shape.size(); }
  std::size_t size(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->value.size(); }

  std::span<const double> values() const { return impl_->value; }
  // Direct writes are only valid on tensors not currently referenced by a
  // live graph (parameters between steps, fresh buffers).
  std::span<double> mutable_values() { return impl_->value; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  std::span<double> mutable_grad() { return impl_->grad_buffer(); }
  void zero_grad() { impl_->grad.clear(); }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool flag) { impl_->requires_grad = flag; }
  bool is_leaf() const { return impl_->node == nullptr; }

  double item() const;
  double at(std::size_t i) const { return impl_->value.at(i); }
  double at(std::size_t row, std::size_t col) const;

  // Independent copy of the values with no graph attachment.
  Tensor clone() const;

  const std::shared_ptr<TensorData>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorData> impl_;
};

// ---------------------------------------------------------------------------
// Graph-building helpers for op implementations.

using BackwardFn = std::function<void(const TensorData& out)>;

// Builds an op result. `backward` is attached only when some input requires
// a gradient and recording is enabled.
Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                   BackwardFn backward);

// Gradient buffer of an input, or nullptr when that input takes no gradient.
std::vector<double>* grad_sink(const std::shared_ptr<TensorData>& t);

// ---------------------------------------------------------------------------
// Ops. Matrices are rank-2 row-major; vectors are rank-1.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
// a[m×n] + b[n] added to every row (bias add, mode offset).
Tensor add_rowvec(const Tensor& a, const Tensor& b);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// Σ (a-b)², a scalar.
Tensor squared_distance(const Tensor& a, const Tensor& b);

Tensor gelu(const Tensor& a);
Tensor softmax(const Tensor& x, std::size_t axis);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// Row-major boolean matrix; `allowed[i*cols+j]` true when query i may see key j.
struct AttentionMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> allowed;

  static AttentionMask all_visible(std::size_t rows, std::size_t cols);
  static AttentionMask causal(std::size_t size);
  // Keys flagged in `key_is_pad` are hidden from every query.
  static AttentionMask key_padding(std::size_t rows, const std::vector<bool>& key_is_pad);
  bool at(std::size_t i, std::size_t j) const { return allowed[i * cols + j] != 0; }
};

// Row softmax of scores[tq×tk] where masked entries get exactly zero weight.
Tensor masked_softmax(const Tensor& scores, const AttentionMask& mask);

Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count);
Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count);
Tensor concat_rows(const Tensor& top, const Tensor& bottom);
Tensor concat_cols(const std::vector<Tensor>& parts);
// Row `index` of a matrix as a rank-1 tensor.
Tensor row(const Tensor& a, std::size_t index);
// Stacks rank-1 tensors into a matrix.
Tensor stack_rows(const std::vector<Tensor>& rows);
// Gathers table rows; gradient scatters back into the table.
Tensor embedding(const Tensor& table, std::span<const int> ids);

// Inverted dropout driven by an explicit uniform stream; identity when p == 0.
Tensor dropout(const Tensor& a, double p, const std::function<double()>& uniform01);

// Mean over non-ignored positions of the label-smoothed negative
// log-likelihood; the smoothed target puts (1-s) + s/V on the gold id and s/V
// elsewhere.
Tensor cross_entropy_smoothed(const Tensor& logits, std::span<const int> targets, double smoothing,
                              int ignore_id);
// Row-wise log-softmax values (no graph), for decoding and oracles.
std::vector<double> log_softmax_rows(const Tensor& logits);

// Same values, no gradient path.
Tensor detach(const Tensor& x);
// Forward value is q bit-for-bit; the downstream gradient goes to e unchanged
// and nothing flows to q through this path.
Tensor straight_through(const Tensor& e, const Tensor& q);

// ---------------------------------------------------------------------------

// Reverse accumulation from a scalar loss. Populates grads of every reachable
// requires_grad tensor and consumes the graph.
void backward(const Tensor& loss);

// Leaf tensors reachable from `root` through recorded nodes.
std::vector<std::shared_ptr<TensorData>> reachable_leaves(const Tensor& root);

}  // namespace dml
