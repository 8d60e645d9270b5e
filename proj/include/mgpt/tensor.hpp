#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mgpt {

// Dense row-major 2-D tensor of doubles with an optional gradient buffer.
// Tensors are cheap shared handles; values are treated as immutable once an
// op has produced them. Gradients accumulate additively during Tape::backward.
class Tensor {
 public:
  struct Data {
    size_t rows = 0;
    size_t cols = 0;
    std::vector<double> v;
    std::vector<double> g;  // allocated lazily, same length as v
    bool requires_grad = false;
    std::string name;
  };

  Tensor() = default;

  static Tensor zeros(size_t rows, size_t cols);
  static Tensor full(size_t rows, size_t cols, double value);
  static Tensor from_values(size_t rows, size_t cols, std::vector<double> values);
  static Tensor scalar(double value);
  static Tensor identity(size_t n);
  // Leaf tensor tracked by the optimizer / gradient checks.
  static Tensor parameter(size_t rows, size_t cols, std::vector<double> values,
                          std::string name);

  bool defined() const { return d_ != nullptr; }
  size_t rows() const { return d_->rows; }
  size_t cols() const { return d_->cols; }
  size_t size() const { return d_->v.size(); }
  bool is_scalar() const { return defined() && d_->rows == 1 && d_->cols == 1; }

  double operator()(size_t i, size_t j) const { return d_->v[i * d_->cols + j]; }
  double value() const;  // 1x1 only

  std::span<const double> values() const { return d_->v; }
  std::span<const double> grad() const { return d_->g; }
  bool has_grad() const { return !d_->g.empty(); }
  bool requires_grad() const { return d_->requires_grad; }

  // Leaf access for initialization, optimizer updates and finite-difference
  // probes. Not to be used on op outputs.
  std::vector<double>& raw_values() { return d_->v; }
  std::vector<double>& raw_grad();
  void zero_grad();

  const std::string& name() const { return d_->name; }

  std::shared_ptr<Data> ptr() const { return d_; }

 private:
  explicit Tensor(std::shared_ptr<Data> d) : d_(std::move(d)) {}
  std::shared_ptr<Data> d_;

  friend Tensor make_tensor(size_t, size_t, bool);
};

Tensor make_tensor(size_t rows, size_t cols, bool requires_grad);

// Records the backward step of every differentiable op executed while the
// tape is the active one. Single-threaded per training step; independent
// forward passes may each own a tape on their own thread.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current();

  void record(std::function<void()> backward_step);
  // Seeds d(loss)/d(loss)=1 and replays recorded steps in reverse execution
  // order. Calling twice without reset() is an error.
  void backward(const Tensor& loss);
  void reset();
  size_t node_count() const { return nodes_.size(); }

 private:
  std::vector<std::function<void()>> nodes_;
  bool ran_ = false;
  Tape* prev_ = nullptr;
};

enum class Activation { LeakyRelu, Elu, Gelu, Relu };

// Element-wise and shape ops. All record gradients on the active tape when
// any input requires grad.
Tensor add(const Tensor& a, const Tensor& b);
// Adds a length-n vector to every row of a (m x n).
Tensor add_rowvec(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_const(const Tensor& a, double c);
Tensor clamp_min(const Tensor& a, double c);
// Element-wise power; for exponent < 1 all entries must be positive.
Tensor pow_elem(const Tensor& a, double exponent);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor activation(const Tensor& x, Activation kind, double leaky_slope = 0.01);
Tensor leaky_relu(const Tensor& x, double slope = 0.01);
Tensor elu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor relu(const Tensor& x);

// Row-wise softmax with per-row max subtraction.
Tensor softmax_rows(const Tensor& x);
// Row-wise normalization to zero mean / unit variance followed by the affine
// transform gain * x + bias. Variance epsilon 1e-5.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);
// Pools the rows of a (g x t) matrix of nonnegative weights into a (1 x t)
// row: out_j = (sum_v x_vj^p)^(1/p), p >= 1.
Tensor lp_pool_rows(const Tensor& x, double p);
// Divides each row (column) by denom_scale * ||row||_2, with a 1e-12 floor on
// the norm.
Tensor l2_normalize_rows(const Tensor& x, double denom_scale);
Tensor l2_normalize_cols(const Tensor& x, double denom_scale);

Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
// Rows [r0, r1).
Tensor slice_rows(const Tensor& x, size_t r0, size_t r1);
// Multiplies row i (column j) by w_i (w_j); w holds rows() (cols()) scalars.
Tensor scale_rows(const Tensor& x, const Tensor& w);
Tensor scale_cols(const Tensor& x, const Tensor& w);

Tensor sum_all(const Tensor& x);
Tensor mean_rows(const Tensor& x);  // (m x n) -> (1 x n)
Tensor row_sums(const Tensor& x);   // (m x n) -> (m x 1)
Tensor abs_sum(const Tensor& x);
Tensor square_sum(const Tensor& x);

// out_k = x[indices_k, :]; duplicate indices accumulate gradient additively.
Tensor gather_rows(const Tensor& x, const std::vector<size_t>& indices);
// Mean over rows of -log softmax(logits)[target]; targets are column indices.
Tensor cross_entropy_rows(const Tensor& logits, const std::vector<size_t>& targets);

}  // namespace mgpt
