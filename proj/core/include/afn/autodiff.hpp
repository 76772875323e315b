// Reverse-mode automatic differentiation over dense double matrices.
//
// A Tape records every operation of one forward pass. Each node keeps its
// value, a lazily allocated gradient and a closure that pushes the node's
// gradient to its parents. Parameters enter as leaves; their gradients are
// collected on the tape and copied out with Tape::accumulate, so forward
// passes only need const access to a model.
//
// All values are Eigen::MatrixXd; vectors are 1 x n rows unless noted.

#pragma once

#include <Eigen/Dense>

#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace afn::ad {

using Matrix = Eigen::MatrixXd;
using RowVector = Eigen::RowVectorXd;
using Vector = Eigen::VectorXd;

/// Trainable tensor. Owned by the model that uses it.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;

  Parameter() = default;
  Parameter(std::string n, Matrix v)
      : name(std::move(n)), value(std::move(v)), grad(Matrix::Zero(value.rows(), value.cols())) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

using ParamList = std::vector<Parameter*>;

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid until the tape is cleared.
class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
  Tape& tape() const { return *tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* t, int id) : tape_(t), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Inference tapes record no backward closures and treat parameters as constants.
  explicit Tape(bool inference) : inference_(inference) {}

  bool inference() const { return inference_; }

  Var constant(Matrix value);
  Var param(const Parameter& p);
  /// Record an interior node. `fn` runs only if the node needs a gradient.
  Var record(Matrix value, std::initializer_list<int> parents, BackwardFn fn);
  Var record(Matrix value, const std::vector<int>& parents, BackwardFn fn);

  /// Seeds d(loss)/d(loss) = 1 and propagates; loss must be 1 x 1.
  /// Parameter gradients are collected per parameter (see param_grad).
  void backward(const Var& loss);
  /// Gradient accumulated for a parameter by the last backward, or nullptr.
  const Matrix* param_grad(const Parameter& p) const;
  /// Adds the collected gradients into each parameter's grad buffer.
  void accumulate(const ParamList& params) const;

  const Matrix& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }
  bool needs_grad(int id) const { return nodes_[static_cast<size_t>(id)].needs_grad; }
  /// Gradient buffer of a node, zero-initialized on first access.
  Matrix& grad(int id);
  bool has_grad(int id) const { return nodes_[static_cast<size_t>(id)].grad_ready; }

  size_t size() const { return nodes_.size(); }
  void clear() {
    nodes_.clear();
    param_grads_.clear();
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool grad_ready = false;
    bool needs_grad = false;
    const Parameter* param = nullptr;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, Matrix> param_grads_;
  bool inference_ = false;
};

// ---- elementwise and linear algebra ---------------------------------------

Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
/// a (n x k) + row (1 x k) broadcast over rows.
Var add_row(const Var& a, const Var& row);
/// a (n x k) scaled row-wise by col (n x 1).
Var mul_col(const Var& a, const Var& col);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var neg(const Var& a);

Var tanh(const Var& a);
Var sigmoid(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var softplus(const Var& a);
Var square(const Var& a);
Var elu(const Var& a);

// ---- reductions -----------------------------------------------------------

Var sum(const Var& a);
Var mean(const Var& a);
/// n x k -> n x 1.
Var row_sum(const Var& a);
/// Euclidean norm of each row, n x 1. Subgradient 0 at the origin.
Var row_norm(const Var& a);

// ---- shape ----------------------------------------------------------------

Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count);
Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count);
/// Row gather with scatter-add backward.
Var gather_rows(const Var& a, std::span<const int> rows);
/// out(i) = a(i, cols[i]) as n x 1.
Var pick(const Var& a, std::span<const int> cols);
Var stop_gradient(const Var& a);

// ---- probability ----------------------------------------------------------

Var softmax_rows(const Var& a);
Var log_softmax_rows(const Var& a);
/// Squared Euclidean distance between rows of z (n x m) and rows of c (k x m) -> n x k.
Var sq_dist(const Var& z, const Var& c);

// ---- attention ------------------------------------------------------------

struct AttentionResult {
  Var context;      // batch x hidden
  Matrix weights;   // batch x length
};

/// Additive attention of one query block over the first `length` time blocks.
///
/// `keys` stacks projected encoder states time-major (row s * batch + b),
/// `values` stacks raw hidden states the same way. The score of step s for
/// batch row b is v . tanh(keys[s, b] + query[b]); weights are a softmax
/// over s < length.
AttentionResult additive_attention(const Var& keys, const Var& values, const Var& query,
                                   const Var& v, Eigen::Index batch, Eigen::Index length);

}  // namespace afn::ad
