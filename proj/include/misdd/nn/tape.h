#pragma once

#include <Eigen/Core>
#include <deque>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace misdd::nn {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  bool trainable = true;

  std::size_t size() const { return static_cast<std::size_t>(value.size()); }
  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  bool requires_grad() const;
  // Scalar value of a 1x1 node.
  double item() const;
  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Reverse-mode recorder. Every op appends a node whose backward closure
/// scatters the node's gradient into its inputs. Nodes that do not depend on a
/// trainable parameter carry no closure and receive no gradient.
class Tape {
 public:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
    std::function<void(Node&)> backward;
    // Parameter leaves alias the parameter's storage instead of copying it.
    const Matrix* view = nullptr;

    const Matrix& val() const { return view != nullptr ? *view : value; }
  };

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  // Trainable parameters become gradient leaves when the tape records grads.
  Var param(Parameter& p);

  // Seeds d(scalar)/d(scalar) = 1 and accumulates into Parameter::grad of
  // every trainable leaf reached.
  void backward(Var scalar);

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }

  Node& node(Var v) { return nodes_[static_cast<std::size_t>(v.id())]; }
  const Node& node(Var v) const { return nodes_[static_cast<std::size_t>(v.id())]; }

  // Op plumbing: creates a node whose requires_grad is the OR of the inputs'.
  Var emit(Matrix value, std::initializer_list<Var> inputs, std::function<void(Node&)> backward);
  Var emit(Matrix value, std::span<const Var> inputs, std::function<void(Node&)> backward);

  // Gradient buffer of an input node, zero-allocated on first use.
  Matrix& grad_of(Var v);

  // grad(v) += e, assigning on first use instead of zero-filling.
  template <typename Derived>
  void accumulate(Var v, const Eigen::MatrixBase<Derived>& e) {
    Node& n = node(v);
    if (n.grad.size() == 0) {
      n.grad.noalias() = e;
    } else {
      n.grad.noalias() += e;
    }
  }

 private:
  std::deque<Node> nodes_;
  bool grad_enabled_;
};

// ---- ops -----------------------------------------------------------------
// Shapes are rows x cols, row vectors are 1 x n. All ops check shapes and
// throw std::invalid_argument on mismatch.

Var matmul(Var a, Var b);                   // a * b
Var matmul_nt(Var a, Var b);                // a * b^T
Var add(Var a, Var b);                      // same shape
Var sub(Var a, Var b);                      // same shape
Var mul(Var a, Var b);                      // elementwise
Var add_row(Var a, Var row);                // a + broadcast(row)
Var scale(Var a, double s);
Var softmax_rows(Var a);
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
Var gelu(Var a);                            // tanh approximation
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var slice_rows(Var a, Eigen::Index start, Eigen::Index count);
Var slice_cols(Var a, Eigen::Index start, Eigen::Index count);
Var gather_rows(Var a, std::span<const int> rows);
Var mean_rows(Var a);                       // 1 x cols
Var l2_normalize_rows(Var a, double eps = 1e-12);
Var sum_all(Var a);                         // 1 x 1
Var mean_all(Var a);                        // 1 x 1
Var row_distance(Var a, Var b);             // ||a - b||_2 of two 1 x n rows, 1 x 1
Var square(Var a);
// Mean over rows of -log softmax(logits)[row, target[row]].
Var softmax_cross_entropy(Var logits, std::span<const int> targets);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(double s, Var a) { return scale(a, s); }

}  // namespace misdd::nn
