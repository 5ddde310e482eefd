#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "ensemble/core/matrix.hpp"

namespace ensemble::nn {

struct Node {
  Matrix value;
  Matrix grad;  // allocated on first use
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Matrix& ensure_grad();
};

/// Handle to a node of the reverse-mode tape. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(Matrix value, bool requires_grad = false);
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  Matrix& mutable_grad() { return node_->ensure_grad(); }
  bool has_grad() const { return !node_->grad.empty(); }
  bool requires_grad() const { return node_->requires_grad; }
  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }
  double item() const { return node_->value.data()[0]; }
  const std::shared_ptr<Node>& node() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node> node_;
};

/// Disables tape recording on this thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_enabled();

/// Builds an op node. `backward` receives the result node and must accumulate into the parents'
/// gradients (use `Node::ensure_grad`). It is only stored when some parent requires a gradient.
Var make_op(Matrix value, std::vector<Var> parents, std::function<void(Node&)> backward);

/// Reverse sweep from a scalar (1x1) root.
void backward(const Var& root);

Var constant(Matrix value);

// Linear algebra.
Var matmul(const Var& a, const Var& b);
/// a * b^T with b stored as (n x k).
Var matmul_nt(const Var& a, const Var& b);
Var transpose(const Var& a);

// Elementwise.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
/// x + row broadcast over rows (bias is 1 x cols).
Var add_row(const Var& x, const Var& bias);
/// x * row broadcast over rows.
Var mul_row(const Var& x, const Var& row);
/// x * column broadcast over columns (col is rows x 1).
Var mul_col(const Var& x, const Var& col);
Var gelu(const Var& x);
Var silu(const Var& x);
Var tanh(const Var& x);
Var sigmoid(const Var& x);
Var exp(const Var& x);
Var square(const Var& x);

// Normalization and attention.
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var softmax_rows(const Var& x);

/// Multi-head scaled dot-product attention over `batch` independent groups.
/// q: (batch*tq) x d, k and v: (batch*tk) x d, d divisible by heads. key_len (optional, one per
/// batch item) masks keys at positions >= key_len. Scores use 1/sqrt(d/heads).
Var attention(const Var& q, const Var& k, const Var& v, std::size_t batch, std::size_t tq, std::size_t tk,
              std::size_t heads, std::span<const std::size_t> key_len = {});
/// Attention probabilities from the same computation, (batch*heads*tq) x tk, no tape.
Matrix attention_probs(const Matrix& q, const Matrix& k, std::size_t batch, std::size_t tq, std::size_t tk,
                       std::size_t heads, std::span<const std::size_t> key_len = {});

// Shape manipulation.
Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var slice_cols(const Var& x, std::size_t c0, std::size_t c1);
Var slice_rows(const Var& x, std::size_t r0, std::size_t r1);
/// Each row repeated `factor` times consecutively.
Var repeat_rows(const Var& x, std::size_t factor);
/// Same row-major storage viewed as rows x cols.
Var reshape(const Var& x, std::size_t rows, std::size_t cols);
/// Broadcast a 1 x c row to n rows.
Var broadcast_rows(const Var& row, std::size_t n);
/// Means of consecutive groups of `factor` rows (rows must divide evenly).
Var mean_row_groups(const Var& x, std::size_t factor);
/// Rows of `table` selected by index.
Var gather_rows(const Var& table, std::span<const std::size_t> index);

/// 1-D convolution over `batch` sequences stacked as rows: x is (batch*seq_in) x cin,
/// weight is (kernel*cin) x cout, bias 1 x cout. Returns (batch*seq_out) x cout.
Var conv1d(const Var& x, const Var& weight, const Var& bias, std::size_t batch, std::size_t kernel,
           std::size_t stride, std::size_t pad);

// Reductions and losses.
Var sum(const Var& x);
Var mean(const Var& x);
Var mse(const Var& a, const Var& b);
/// Mean over elements of KL(N(mu, exp(logvar)) || N(0, 1)) = 0.5 (mu^2 + e^lv - lv - 1).
Var gaussian_kl(const Var& mu, const Var& logvar);
/// Mean binary cross-entropy of sigmoid(logits) against targets in [0,1].
Var bce_with_logits(const Var& logits, const Matrix& targets);
/// Mean of w * (a - b)^2 with a fixed per-element weight.
Var weighted_mse(const Var& a, const Matrix& b, const Matrix& w);

}  // namespace ensemble::nn
