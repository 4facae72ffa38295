#include "misdd/nn/tape.h"

#include <cmath>
#include <numbers>

namespace misdd::nn {

namespace {

void require(bool ok, const char* op, const std::string& what) {
  if (!ok) throw std::invalid_argument(std::string(op) + ": " + what);
}

std::string shape(const Matrix& m) { return std::to_string(m.rows()) + "x" + std::to_string(m.cols()); }

}  // namespace

const Matrix& Var::value() const { return tape_->node(*this).val(); }
bool Var::requires_grad() const { return tape_->node(*this).requires_grad; }

double Var::item() const {
  const Matrix& v = value();
  require(v.rows() == 1 && v.cols() == 1, "item", "expected 1x1, got " + shape(v));
  return v(0, 0);
}

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, false, nullptr, {}, nullptr});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::param(Parameter& p) {
  const bool rg = grad_enabled_ && p.trainable;
  nodes_.push_back(Node{Matrix(), {}, rg, rg ? &p : nullptr, {}, &p.value});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::emit(Matrix value, std::initializer_list<Var> inputs, std::function<void(Node&)> backward) {
  return emit(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
}

Var Tape::emit(Matrix value, std::span<const Var> inputs, std::function<void(Node&)> backward) {
  bool rg = false;
  for (const Var& v : inputs) {
    if (v.tape() != this) throw std::invalid_argument("op mixes variables from different tapes");
    rg = rg || node(v).requires_grad;
  }
  // A NaN or infinity anywhere makes the sum non-finite.
  if (!std::isfinite(value.sum())) throw std::domain_error("non-finite activation produced on tape");
  nodes_.push_back(Node{std::move(value), {}, rg, nullptr, rg ? std::move(backward) : nullptr, nullptr});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Matrix& Tape::grad_of(Var v) {
  Node& n = node(v);
  if (n.grad.size() == 0) n.grad.setZero(n.val().rows(), n.val().cols());
  return n.grad;
}

void Tape::backward(Var scalar) {
  Node& root = node(scalar);
  if (root.val().size() != 1) throw std::invalid_argument("backward: root must be 1x1");
  if (!root.requires_grad) return;
  grad_of(scalar).setOnes();
  for (int i = scalar.id(); i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    if (n.backward) n.backward(n);
    if (n.param != nullptr) {
      if (n.param->grad.size() == 0) n.param->zero_grad();
      n.param->grad += n.grad;
    }
  }
}

// ---- ops -----------------------------------------------------------------

Var matmul(Var a, Var b) {
  require(a.cols() == b.rows(), "matmul", shape(a.value()) + " * " + shape(b.value()));
  Tape* t = a.tape();
  Matrix out = a.value() * b.value();
  return t->emit(std::move(out), {a, b}, [t, a, b](Tape::Node& self) {
    if (a.requires_grad()) t->accumulate(a, self.grad * b.value().transpose());
    if (b.requires_grad()) t->accumulate(b, a.value().transpose() * self.grad);
  });
}

Var matmul_nt(Var a, Var b) {
  require(a.cols() == b.cols(), "matmul_nt", shape(a.value()) + " * (" + shape(b.value()) + ")^T");
  Tape* t = a.tape();
  Matrix out = a.value() * b.value().transpose();
  return t->emit(std::move(out), {a, b}, [t, a, b](Tape::Node& self) {
    if (a.requires_grad()) t->accumulate(a, self.grad * b.value());
    if (b.requires_grad()) t->accumulate(b, self.grad.transpose() * a.value());
  });
}

Var add(Var a, Var b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "add", shape(a.value()) + " + " + shape(b.value()));
  Tape* t = a.tape();
  return t->emit(a.value() + b.value(), {a, b}, [t, a, b](Tape::Node& self) {
    if (a.requires_grad()) t->accumulate(a, self.grad);
    if (b.requires_grad()) t->accumulate(b, self.grad);
  });
}

Var sub(Var a, Var b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "sub", shape(a.value()) + " - " + shape(b.value()));
  Tape* t = a.tape();
  return t->emit(a.value() - b.value(), {a, b}, [t, a, b](Tape::Node& self) {
    if (a.requires_grad()) t->accumulate(a, self.grad);
    if (b.requires_grad()) t->accumulate(b, -self.grad);
  });
}

Var mul(Var a, Var b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "mul", shape(a.value()) + " .* " + shape(b.value()));
  Tape* t = a.tape();
  Matrix out = a.value().cwiseProduct(b.value());
  return t->emit(std::move(out), {a, b}, [t, a, b](Tape::Node& self) {
    if (a.requires_grad()) t->accumulate(a, self.grad.cwiseProduct(b.value()));
    if (b.requires_grad()) t->accumulate(b, self.grad.cwiseProduct(a.value()));
  });
}

Var add_row(Var a, Var row) {
  require(row.rows() == 1 && row.cols() == a.cols(), "add_row", shape(a.value()) + " + row " + shape(row.value()));
  Tape* t = a.tape();
  Matrix out = a.value().rowwise() + row.value().row(0);
  return t->emit(std::move(out), {a, row}, [t, a, row](Tape::Node& self) {
    if (a.requires_grad()) t->accumulate(a, self.grad);
    if (row.requires_grad()) t->accumulate(row, self.grad.colwise().sum());
  });
}

Var scale(Var a, double s) {
  Tape* t = a.tape();
  return t->emit(a.value() * s, {a}, [t, a, s](Tape::Node& self) { t->accumulate(a, s * self.grad); });
}

Var softmax_rows(Var a) {
  Tape* t = a.tape();
  const Matrix& x = a.value();
  Matrix y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    y.row(r) = (x.row(r).array() - m).exp();
    y.row(r) /= y.row(r).sum();
  }
  return t->emit(std::move(y), {a}, [t, a](Tape::Node& self) {
    const Matrix& y = self.value;
    const Eigen::VectorXd dots = (self.grad.cwiseProduct(y)).rowwise().sum();
    Matrix g = self.grad;
    g.colwise() -= dots;
    t->accumulate(a, g.cwiseProduct(y));
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  require(gamma.rows() == 1 && gamma.cols() == x.cols() && beta.rows() == 1 && beta.cols() == x.cols(),
          "layer_norm", "gain/bias must be 1x" + std::to_string(x.cols()));
  Tape* t = x.tape();
  const Matrix& v = x.value();
  const Eigen::Index n = v.cols();
  Matrix xhat(v.rows(), n);
  Eigen::VectorXd inv_std(v.rows());
  for (Eigen::Index r = 0; r < v.rows(); ++r) {
    const double mu = v.row(r).mean();
    const double var = (v.row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (v.row(r).array() - mu) * inv_std(r);
  }
  Matrix out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
  return t->emit(std::move(out), {x, gamma, beta},
                 [t, x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape::Node& self) {
                   const Matrix& g = self.grad;
                   if (gamma.requires_grad()) t->accumulate(gamma, g.cwiseProduct(xhat).colwise().sum());
                   if (beta.requires_grad()) t->accumulate(beta, g.colwise().sum());
                   if (x.requires_grad()) {
                     const Matrix dxhat = g.array().rowwise() * gamma.value().row(0).array();
                     const double n = static_cast<double>(dxhat.cols());
                     const Eigen::VectorXd mean_d = dxhat.rowwise().sum() / n;
                     const Eigen::VectorXd mean_dx = dxhat.cwiseProduct(xhat).rowwise().sum() / n;
                     Matrix dx = dxhat;
                     dx.colwise() -= mean_d;
                     dx.array() -= xhat.array().colwise() * mean_dx.array();
                     dx.array().colwise() *= inv_std.array();
                     t->accumulate(x, dx);
                   }
                 });
}

Var gelu(Var a) {
  Tape* t = a.tape();
  static constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  const Matrix& x = a.value();
  // tanh(z) = 1 - 2 / (exp(2z) + 1); Eigen vectorizes exp but not tanh for doubles.
  Matrix th = 1.0 - 2.0 / ((2.0 * k * (x.array() + 0.044715 * x.array().cube())).exp() + 1.0);
  Matrix out = 0.5 * x.array() * (1.0 + th.array());
  return t->emit(std::move(out), {a}, [t, a, th = std::move(th)](Tape::Node& self) {
    const auto x = a.value().array();
    const auto d = 0.5 * (1.0 + th.array()) +
                   0.5 * x * (1.0 - th.array().square()) * k * (1.0 + 3.0 * 0.044715 * x.square());
    t->accumulate(a, (self.grad.array() * d).matrix());
  });
}

Var concat_rows(std::span<const Var> parts) {
  require(!parts.empty(), "concat_rows", "no inputs");
  Tape* t = parts[0].tape();
  const Eigen::Index cols = parts[0].cols();
  Eigen::Index rows = 0;
  for (const Var& p : parts) {
    require(p.cols() == cols, "concat_rows", "column mismatch");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  Eigen::Index r = 0;
  for (const Var& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return t->emit(std::move(out), parts, [t, inputs](Tape::Node& self) {
    Eigen::Index r = 0;
    for (const Var& p : inputs) {
      if (p.requires_grad()) t->accumulate(p, self.grad.middleRows(r, p.rows()));
      r += p.rows();
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  require(!parts.empty(), "concat_cols", "no inputs");
  Tape* t = parts[0].tape();
  const Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  for (const Var& p : parts) {
    require(p.rows() == rows, "concat_cols", "row mismatch");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  Eigen::Index c = 0;
  for (const Var& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return t->emit(std::move(out), parts, [t, inputs](Tape::Node& self) {
    Eigen::Index c = 0;
    for (const Var& p : inputs) {
      if (p.requires_grad()) t->accumulate(p, self.grad.middleCols(c, p.cols()));
      c += p.cols();
    }
  });
}

Var slice_rows(Var a, Eigen::Index start, Eigen::Index count) {
  require(start >= 0 && count >= 0 && start + count <= a.rows(), "slice_rows", "range out of bounds");
  Tape* t = a.tape();
  Matrix out = a.value().middleRows(start, count);
  return t->emit(std::move(out), {a}, [t, a, start, count](Tape::Node& self) {
    t->grad_of(a).middleRows(start, count) += self.grad;
  });
}

Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  require(start >= 0 && count >= 0 && start + count <= a.cols(), "slice_cols", "range out of bounds");
  Tape* t = a.tape();
  Matrix out = a.value().middleCols(start, count);
  return t->emit(std::move(out), {a}, [t, a, start, count](Tape::Node& self) {
    t->grad_of(a).middleCols(start, count) += self.grad;
  });
}

Var gather_rows(Var a, std::span<const int> rows) {
  Tape* t = a.tape();
  Matrix out(static_cast<Eigen::Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] >= 0 && rows[i] < a.rows(), "gather_rows", "row index out of bounds");
    out.row(static_cast<Eigen::Index>(i)) = a.value().row(rows[i]);
  }
  std::vector<int> idx(rows.begin(), rows.end());
  return t->emit(std::move(out), {a}, [t, a, idx = std::move(idx)](Tape::Node& self) {
    Matrix& g = t->grad_of(a);
    for (std::size_t i = 0; i < idx.size(); ++i) g.row(idx[i]) += self.grad.row(static_cast<Eigen::Index>(i));
  });
}

Var mean_rows(Var a) {
  require(a.rows() > 0, "mean_rows", "empty input");
  Tape* t = a.tape();
  Matrix out = a.value().colwise().mean();
  return t->emit(std::move(out), {a}, [t, a](Tape::Node& self) {
    const double inv = 1.0 / static_cast<double>(a.rows());
    t->accumulate(a, (inv * self.grad.row(0)).replicate(a.rows(), 1));
  });
}

Var l2_normalize_rows(Var a, double eps) {
  Tape* t = a.tape();
  const Matrix& x = a.value();
  Eigen::VectorXd norms = x.rowwise().norm().array().max(eps);
  Matrix y = x.array().colwise() / norms.array();
  return t->emit(std::move(y), {a}, [t, a, norms = std::move(norms)](Tape::Node& self) {
    const Matrix& y = self.value;
    const Eigen::VectorXd dots = self.grad.cwiseProduct(y).rowwise().sum();
    Matrix g = self.grad - (y.array().colwise() * dots.array()).matrix();
    g.array().colwise() /= norms.array();
    t->accumulate(a, g);
  });
}

Var sum_all(Var a) {
  Tape* t = a.tape();
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return t->emit(std::move(out), {a}, [t, a](Tape::Node& self) {
    t->accumulate(a, Matrix::Constant(a.rows(), a.cols(), self.grad(0, 0)));
  });
}

Var mean_all(Var a) {
  require(a.value().size() > 0, "mean_all", "empty input");
  Tape* t = a.tape();
  Matrix out(1, 1);
  out(0, 0) = a.value().mean();
  return t->emit(std::move(out), {a}, [t, a](Tape::Node& self) {
    t->accumulate(a, Matrix::Constant(a.rows(), a.cols(), self.grad(0, 0) / static_cast<double>(a.value().size())));
  });
}

Var row_distance(Var a, Var b) {
  require(a.rows() == 1 && b.rows() == 1 && a.cols() == b.cols(), "row_distance",
          shape(a.value()) + " vs " + shape(b.value()));
  Tape* t = a.tape();
  const RowVector diff = a.value().row(0) - b.value().row(0);
  const double d = diff.norm();
  Matrix out(1, 1);
  out(0, 0) = d;
  return t->emit(std::move(out), {a, b}, [t, a, b, diff, d](Tape::Node& self) {
    // The distance is not differentiable at coincidence; use the zero subgradient.
    if (d <= 0.0) return;
    const RowVector g = (self.grad(0, 0) / d) * diff;
    if (a.requires_grad()) t->grad_of(a).row(0) += g;
    if (b.requires_grad()) t->grad_of(b).row(0) -= g;
  });
}

Var square(Var a) {
  Tape* t = a.tape();
  Matrix out = a.value().array().square();
  return t->emit(std::move(out), {a}, [t, a](Tape::Node& self) {
    t->accumulate(a, 2.0 * self.grad.cwiseProduct(a.value()));
  });
}

Var softmax_cross_entropy(Var logits, std::span<const int> targets) {
  require(static_cast<Eigen::Index>(targets.size()) == logits.rows(), "softmax_cross_entropy",
          "one target per row required");
  Tape* t = logits.tape();
  const Matrix& x = logits.value();
  Matrix p(x.rows(), x.cols());
  double loss = 0.0;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const int y = targets[static_cast<std::size_t>(r)];
    require(y >= 0 && y < x.cols(), "softmax_cross_entropy", "target out of range");
    const double m = x.row(r).maxCoeff();
    p.row(r) = (x.row(r).array() - m).exp();
    const double z = p.row(r).sum();
    p.row(r) /= z;
    loss += -(x(r, y) - m - std::log(z));
  }
  Matrix out(1, 1);
  out(0, 0) = loss / static_cast<double>(x.rows());
  std::vector<int> tg(targets.begin(), targets.end());
  return t->emit(std::move(out), {logits}, [t, logits, p = std::move(p), tg = std::move(tg)](Tape::Node& self) {
    Matrix g = p;
    for (std::size_t r = 0; r < tg.size(); ++r) g(static_cast<Eigen::Index>(r), tg[r]) -= 1.0;
    t->accumulate(logits, (self.grad(0, 0) / static_cast<double>(tg.size())) * g);
  });
}

}  // namespace misdd::nn
