#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "sstx/errors.hpp"
#include "sstx/kernels.hpp"
#include "sstx/rng.hpp"

// Reverse-mode differentiation over dense row-major double matrices.
//
// Every tensor is rank 2 (a scalar is 1x1, a vector is 1xn). Operations record
// a node whenever grad mode is on and at least one input requires grad.
// backward() visits the reachable nodes in reverse creation order, which is a
// valid reverse topological order because a node is always created after its
// inputs.
namespace sstx {

using Index = Eigen::Index;
using Matrix = kernels::RowMatrix<double>;
using IdMatrix = kernels::RowMatrix<int>;

namespace detail {
struct Node;
}

bool grad_enabled();

// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Matrix value, bool requires_grad = false);

  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor zeros(Index rows, Index cols, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Matrix& value() const;
  // Leaf tensors only: in-place update that keeps identity (parameters).
  Matrix& mutable_value();

  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  Index size() const { return value().size(); }
  std::array<Index, 2> shape() const { return {rows(), cols()}; }
  double item() const;

  bool requires_grad() const;
  bool is_leaf() const;
  bool has_grad() const;
  const Matrix& grad() const;
  void zero_grad();
  const char* op_name() const;

  // Fresh leaf with a copy of the value.
  Tensor clone() const;
  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

 private:
  friend struct TensorAccess;
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

std::string shape_string(const Tensor& t);

// --- primitives ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
// Elementwise sum. b may also be a 1xn row broadcast over the rows of a.
Tensor add(const Tensor& a, const Tensor& b);
Tensor multiply(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor reshape(const Tensor& a, Index rows, Index cols);
Tensor transpose(const Tensor& a);
// axis 0 stacks rows, axis 1 stacks columns.
Tensor concat(std::span<const Tensor> parts, int axis);
Tensor slice(const Tensor& a, int axis, Index start, Index length);
Tensor relu(const Tensor& a);
// Per-row normalisation with biased variance, then gain and bias (both 1xn).
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
Tensor softmax_rows(const Tensor& a);
Tensor log_softmax_rows(const Tensor& a);
// Rows of table selected by ids; also serves as a generic row gather.
Tensor embedding_lookup(const Tensor& table, std::span<const int> ids);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor detach(const Tensor& a);
Tensor dropout(const Tensor& a, double rate, Rng& rng);
// Row r of the result is b.row(r) where take_b[r] is set, else a.row(r).
Tensor select_rows(const Tensor& a, const Tensor& b, std::span<const std::uint8_t> take_b);
Tensor sparsemax_rows(const Tensor& a);

// Mean over unpadded rows of -log softmax(logits)[target].
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                     std::span<const std::uint8_t> pad_mask);

// Block layout for fused scaled dot-product attention. Queries are stacked as
// batch * query_len rows, keys/values as batch * key_len rows, and the d_model
// columns are split evenly over the heads.
struct AttentionLayout {
  Index batch = 1;
  Index query_len = 1;
  Index key_len = 1;
  Index heads = 1;
  bool causal = false;
  // batch * key_len flags, 1 = attendable. Empty means every key is valid.
  std::vector<std::uint8_t> key_valid;

  bool allowed(Index b, Index i, Index j) const {
    if (causal && j > i) return false;
    return key_valid.empty() || key_valid[static_cast<std::size_t>(b * key_len + j)] != 0;
  }
};

// softmax(Q K^T / sqrt(d_head) + mask) V per (sequence, head), heads
// concatenated along columns. Masked scores are treated as -inf.
Tensor scaled_dot_product_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                    const AttentionLayout& layout);

// Populates grads of every reachable tensor that requires grad. Leaf grads
// accumulate across calls; interior grads reflect the latest call.
void backward(const Tensor& loss);

// --- gradient checking ---------------------------------------------------

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_tensor = 0;
  Index worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

using ScalarFunction = std::function<Tensor(std::span<const Tensor>)>;

// Central differences against reverse-mode grads of f at `point`. The point
// tensors must be leaves that require grad; their values are restored on exit.
// Relative error uses max(|analytic|, |numeric|, 1e-8) as denominator.
GradCheckResult grad_check(const ScalarFunction& f, std::span<const Tensor> point, double step);

}  // namespace sstx
