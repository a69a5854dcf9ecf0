#pragma once

// Dense f64 tensor with tape-based reverse-mode differentiation.
//
// Operations record themselves on the thread's active Tape (see TapeScope)
// only when at least one input requires a gradient. With no active tape
// nothing is retained, so inference keeps only the tensors that are still
// referenced.

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace artstvg {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);

/// Raised on incompatible shapes or out-of-range axes/indices.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a forward operation produces NaN or Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TensorImpl {
  TensorImpl(Shape s, std::vector<double> d);
  ~TensorImpl();
  TensorImpl(const TensorImpl&) = delete;
  TensorImpl& operator=(const TensorImpl&) = delete;

  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient arrives
  bool requires_grad = false;

  /// Adds g (same length as data) into grad, allocating it on first use.
  void accumulate(std::span<const double> g);
  std::vector<double>& grad_buffer();
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor from(Shape shape, std::vector<double> data);
  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  /// A leaf that accumulates gradients.
  static Tensor parameter(Shape shape, std::vector<double> data);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t size() const { return impl_->data.size(); }
  /// Rows/cols of the 2-D view (rank 0 -> 1x1, rank 1 -> 1xn).
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const { return impl_->data; }
  /// Direct write access; reserved for optimizers, initializers and loaders.
  std::span<double> mutable_data() { return impl_->data; }
  std::span<const double> grad() const { return impl_->grad; }
  bool has_grad() const { return !impl_->grad.empty(); }

  double item() const;
  double at(std::size_t r, std::size_t c) const;
  double operator[](std::size_t i) const { return impl_->data[i]; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }
  void zero_grad();

  /// Copy of the values as a new leaf with no history.
  Tensor detach() const;

  TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& impl_ptr() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Ordered record of differentiable operations. Entries are appended in
/// creation order, so the list is already topologically sorted.
class Tape {
 public:
  using Backward = std::function<void()>;

  void record(std::shared_ptr<TensorImpl> output, Backward fn);

  /// Propagates d(loss)/d(x) into every requires_grad tensor reachable from
  /// loss. Gradients accumulate additively.
  void backward(const Tensor& loss);

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  struct Node {
    std::shared_ptr<TensorImpl> output;
    Backward fn;
  };
  std::vector<Node> nodes_;
};

/// Makes `tape` the active tape for the current thread for the scope's
/// lifetime. Scopes nest.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

/// Convenience wrapper for Tape::backward on the active tape.
void backward(const Tensor& loss);

/// Per-thread accounting of tensor storage, used to check that streaming
/// inference keeps activation memory bounded.
struct AllocationStats {
  std::size_t live_bytes = 0;
  std::size_t peak_bytes = 0;
};
AllocationStats allocation_stats();
/// Resets the peak to the current live size.
void reset_allocation_peak();

// ---------------------------------------------------------------------------
// Operations. Binary elementwise operations broadcast over the 2-D view of
// their operands: each dimension must match or be 1.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);
Tensor operator/(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, double s);
Tensor operator*(double s, const Tensor& a);
Tensor operator+(const Tensor& a, double s);
Tensor operator-(const Tensor& a, double s);
Tensor operator-(double s, const Tensor& a);
Tensor operator-(const Tensor& a);

Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);
/// Natural log; inputs must be positive.
Tensor log(const Tensor& x);
Tensor square(const Tensor& x);
/// Elementwise smooth-L1 (Huber with threshold beta) of x.
Tensor smooth_l1(const Tensor& x, double beta);

/// [m x k] . [k x n] -> [m x n]
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);

/// Softmax along `axis` with max subtraction.
Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax(const Tensor& x, std::size_t axis);

/// Normalizes over the last axis, then applies gamma/beta (length = last dim).
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// Row-wise structural operations on 2-D tensors.
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count);
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> indices);
/// Scales row r by the constant weights[r].
Tensor scale_rows(const Tensor& x, std::span<const double> weights);

/// Multi-head scaled dot-product attention. q: [n x C], k,v: [m x C],
/// C divisible by heads. key_bias (length m, constant) is added to every
/// score row before the softmax; use -1e9 to mask a key. When
/// weights_out is given it receives, per head, the n x m attention matrix
/// in row-major order.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                 std::span<const double> key_bias = {},
                 std::vector<std::vector<double>>* weights_out = nullptr);

inline constexpr double kMaskedScore = -1e9;

}  // namespace artstvg
