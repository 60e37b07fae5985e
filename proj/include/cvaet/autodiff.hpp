#pragma once

// Tape-based reverse-mode differentiation over dense row-major matrices.
//
// A Tape records every operation of one forward pass. Parameters enter the
// tape as leaves (one leaf per parameter per tape, however often it is used),
// so a parameter shared between two sub-networks has a single gradient
// accumulator. Tapes are cheap to create; the trainer builds one per example.

#include <Eigen/Dense>

#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cvaet/random.hpp"

namespace cvaet::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Parameter {
  std::string name;
  Matrix value;
};

class Tape;

// Lightweight handle to a node on a tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  int id() const { return id_; }

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using Backward =
      std::function<void(Tape&, const Matrix& grad_out, const Matrix& out_value)>;

  // With record_gradients = false no backward closures are kept; used for
  // inference.
  explicit Tape(bool record_gradients = true) : record_(record_gradients) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var constant(Matrix value);
  // Leaf bound to `param`, read in place (the parameter must outlive the tape
  // and stay unchanged while it is in use); repeated calls return the same
  // node. `index` is
  // the parameter's slot in its owning set, reported back by
  // for_each_parameter_grad.
  Var parameter(const Parameter& param, int index);

  // Appends a computed node. `backward` receives the node's accumulated
  // gradient and its forward value, and pushes contributions into its inputs
  // via accumulate().
  Var push(Matrix value, std::initializer_list<Var> inputs, Backward backward);
  Var push(Matrix value, std::span<const Var> inputs, Backward backward);

  const Matrix& value(int id) const {
    const Node& n = nodes_[id];
    return n.ref != nullptr ? *n.ref : n.value;
  }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  bool requires_grad(Var v) const { return v.valid() && nodes_[v.id()].requires_grad; }

  // Gradient buffer of node `id`, zero-initialised on first access.
  Matrix& grad(int id);
  const Matrix* grad_if_any(int id) const;
  template <class Expr>
  void accumulate(Var v, const Expr& g) {
    if (!requires_grad(v)) return;
    grad(v.id()).noalias() += g;
  }

  // Reverse sweep seeded with d(objective)/d(root_i) = weight_i for scalar
  // roots.
  void backward(std::span<const std::pair<Var, double>> seeds);
  void backward(Var root, double seed = 1.0);

  // Visits (parameter index, gradient) for every parameter leaf that
  // received a gradient.
  void for_each_parameter_grad(
      const std::function<void(int, const Matrix&)>& fn) const;

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    const Matrix* ref = nullptr;  // parameter leaves point at the owner's storage
    Matrix grad;
    Backward backward;
    bool requires_grad = false;
    bool has_grad = false;
    int param_index = -1;
  };

  bool record_;
  std::deque<Node> nodes_;
  std::unordered_map<const Parameter*, int> param_leaves_;
};

inline const Matrix& Var::value() const { return tape_->value(id_); }

// ---- structural ops -------------------------------------------------------

Var gather_rows(Var table, std::span<const int> ids);
Var slice_rows(Var x, Eigen::Index start, Eigen::Index count);
Var slice_cols(Var x, Eigen::Index start, Eigen::Index count);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var reshape(Var x, Eigen::Index rows, Eigen::Index cols);

// ---- arithmetic -----------------------------------------------------------

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var hadamard(Var a, Var b);
Var scale(Var a, double factor);
Var add_row_broadcast(Var x, Var row);
Var matmul(Var a, Var b);
// a * b^T
Var matmul_nt(Var a, Var b);
// x * w (+ bias row if bias is valid)
Var linear(Var x, Var w, Var bias);
Var sum_all(Var x);

Var tanh(Var x);
Var relu(Var x);
Var exp(Var x);

Var dropout(Var x, double rate, Rng& rng);

Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);

// Row softmax of x + additive_mask (mask entries 0 or a large negative).
Var softmax_rows(Var x, const Matrix* additive_mask = nullptr);

// Scaled dot-product attention over `heads` column blocks of already
// projected q (Lq x d), k and v (Lk x d). If probs_out is given it receives
// the per-head attention matrices.
Var multi_head_attention(Var q, Var k, Var v, int heads,
                         const Matrix* additive_mask,
                         std::vector<Matrix>* probs_out = nullptr);

// Sum over rows r with targets[r] >= 0 of -log softmax(logits[r])[targets[r]].
Var cross_entropy(Var logits, std::span<const int> targets);

// logits is a single row; returns -sum_t log softmax(logits)[targets[t]].
Var bag_of_words_nll(Var logits, std::span<const int> targets);

// Closed-form KL(N(mu_q, exp(lv_q)) || N(mu_p, exp(lv_p))), diagonal.
Var gaussian_kl(Var mu_q, Var logvar_q, Var mu_p, Var logvar_p);

// Large negative used to mask attention logits.
inline constexpr double kMaskedLogit = -1e9;

}  // namespace cvaet::ad
