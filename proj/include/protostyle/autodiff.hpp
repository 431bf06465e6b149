#pragma once

// Minimal reverse-mode differentiation over dense matrices. Every model in the
// library builds its forward pass on a Tape; gradients for training and for
// guidance (with respect to latent inputs) come from the same sweep.

#include "protostyle/core.hpp"

#include <functional>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace protostyle::ad {

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

using GradMap = std::map<std::string, Matrix>;

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix&)>;

  Var constant(Matrix value) { return push(std::move(value), false, nullptr); }
  Var variable(Matrix value) { return push(std::move(value), true, nullptr); }

  // Inference tapes treat every named parameter as a constant.
  void set_params_trainable(bool on) { params_trainable_ = on; }

  // Named leaf, created once per tape and reused on later lookups.
  Var param(const std::string& name, const Matrix& value, bool trainable = true) {
    auto it = param_ids_.find(name);
    if (it != param_ids_.end()) return Var{it->second};
    Var v = push(value, trainable && params_trainable_, nullptr);
    param_ids_.emplace(name, v.id);
    param_order_.push_back(name);
    return v;
  }

  const Matrix& value(Var v) const { return nodes_.at(static_cast<size_t>(v.id)).value; }
  bool requires_grad(Var v) const { return nodes_.at(static_cast<size_t>(v.id)).requires_grad; }

  Matrix grad(Var v) const {
    const Node& n = nodes_.at(static_cast<size_t>(v.id));
    if (!n.has_grad) return Matrix::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  Var push(Matrix value, bool requires_grad, Backward backward) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size() - 1)};
  }

  void accumulate(Var v, const Matrix& g) {
    Node& n = nodes_[static_cast<size_t>(v.id)];
    if (!n.requires_grad) return;
    require_shape(g.rows() == n.value.rows() && g.cols() == n.value.cols(),
                  "gradient shape " + shape_str(g) + " vs value " + shape_str(n.value));
    if (!n.has_grad) {
      n.grad = g;
      n.has_grad = true;
    } else {
      n.grad += g;
    }
  }

  void seed(Var v, const Matrix& g) { accumulate(v, g); }

  void run_backward() {
    for (size_t i = nodes_.size(); i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.has_grad || !n.backward) continue;
      n.backward(*this, n.grad);
    }
  }

  void backward(Var scalar) {
    require_shape(value(scalar).size() == 1, "backward root must be scalar");
    seed(scalar, Matrix::Constant(1, 1, 1.0));
    run_backward();
  }

  // Gradients of every trainable named parameter (zero when untouched).
  GradMap param_grads() const {
    GradMap out;
    for (const auto& name : param_order_) {
      const Var v{param_ids_.at(name)};
      if (!requires_grad(v)) continue;
      out.emplace(name, grad(v));
    }
    return out;
  }

  size_t size() const { return nodes_.size(); }

  bool any_requires(std::initializer_list<Var> vs) const {
    for (Var v : vs)
      if (requires_grad(v)) return true;
    return false;
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    bool has_grad = false;
    Backward backward;
  };
  std::vector<Node> nodes_;
  std::unordered_map<std::string, int> param_ids_;
  std::vector<std::string> param_order_;
  bool params_trainable_ = true;
};

// ---- elementary operations ------------------------------------------------

inline Var matmul(Tape& t, Var a, Var b) {
  const Matrix& av = t.value(a);
  const Matrix& bv = t.value(b);
  require_shape(av.cols() == bv.rows(), "matmul " + shape_str(av) + " * " + shape_str(bv));
  Matrix out = av * bv;
  if (!t.any_requires({a, b})) return t.constant(std::move(out));
  return t.push(std::move(out), true, [a, b](Tape& t, const Matrix& g) {
    if (t.requires_grad(a)) t.accumulate(a, g * t.value(b).transpose());
    if (t.requires_grad(b)) t.accumulate(b, t.value(a).transpose() * g);
  });
}

// a * b^T
inline Var matmul_nt(Tape& t, Var a, Var b) {
  const Matrix& av = t.value(a);
  const Matrix& bv = t.value(b);
  require_shape(av.cols() == bv.cols(), "matmul_nt " + shape_str(av) + " * " + shape_str(bv) + "^T");
  Matrix out = av * bv.transpose();
  if (!t.any_requires({a, b})) return t.constant(std::move(out));
  return t.push(std::move(out), true, [a, b](Tape& t, const Matrix& g) {
    if (t.requires_grad(a)) t.accumulate(a, g * t.value(b));
    if (t.requires_grad(b)) t.accumulate(b, g.transpose() * t.value(a));
  });
}

inline Var add(Tape& t, Var a, Var b) {
  const Matrix& av = t.value(a);
  const Matrix& bv = t.value(b);
  require_shape(av.rows() == bv.rows() && av.cols() == bv.cols(), "add " + shape_str(av) + " + " + shape_str(bv));
  Matrix out = av + bv;
  if (!t.any_requires({a, b})) return t.constant(std::move(out));
  return t.push(std::move(out), true, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

inline Var sub(Tape& t, Var a, Var b) {
  const Matrix& av = t.value(a);
  const Matrix& bv = t.value(b);
  require_shape(av.rows() == bv.rows() && av.cols() == bv.cols(), "sub " + shape_str(av) + " - " + shape_str(bv));
  Matrix out = av - bv;
  if (!t.any_requires({a, b})) return t.constant(std::move(out));
  return t.push(std::move(out), true, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    if (t.requires_grad(b)) t.accumulate(b, -g);
  });
}

inline Var hadamard(Tape& t, Var a, Var b) {
  const Matrix& av = t.value(a);
  const Matrix& bv = t.value(b);
  require_shape(av.rows() == bv.rows() && av.cols() == bv.cols(), "hadamard shape mismatch");
  Matrix out = av.cwiseProduct(bv);
  if (!t.any_requires({a, b})) return t.constant(std::move(out));
  return t.push(std::move(out), true, [a, b](Tape& t, const Matrix& g) {
    if (t.requires_grad(a)) t.accumulate(a, g.cwiseProduct(t.value(b)));
    if (t.requires_grad(b)) t.accumulate(b, g.cwiseProduct(t.value(a)));
  });
}

// Adds a 1xn row to every row of a.
inline Var add_row(Tape& t, Var a, Var row) {
  const Matrix& av = t.value(a);
  const Matrix& rv = t.value(row);
  require_shape(rv.rows() == 1 && rv.cols() == av.cols(), "add_row " + shape_str(av) + " + " + shape_str(rv));
  Matrix out = av.rowwise() + rv.row(0);
  if (!t.any_requires({a, row})) return t.constant(std::move(out));
  return t.push(std::move(out), true, [a, row](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    if (t.requires_grad(row)) t.accumulate(row, g.colwise().sum());
  });
}

// Multiplies every row of a elementwise by a 1xn row.
inline Var mul_row(Tape& t, Var a, Var row) {
  const Matrix& av = t.value(a);
  const Matrix& rv = t.value(row);
  require_shape(rv.rows() == 1 && rv.cols() == av.cols(), "mul_row " + shape_str(av) + " * " + shape_str(rv));
  Matrix out = av.array().rowwise() * rv.row(0).array();
  if (!t.any_requires({a, row})) return t.constant(std::move(out));
  return t.push(std::move(out), true, [a, row](Tape& t, const Matrix& g) {
    const Matrix& rv = t.value(row);
    if (t.requires_grad(a)) t.accumulate(a, (g.array().rowwise() * rv.row(0).array()).matrix());
    if (t.requires_grad(row)) t.accumulate(row, g.cwiseProduct(t.value(a)).colwise().sum());
  });
}

inline Var scale(Tape& t, Var a, double c) {
  Matrix out = t.value(a) * c;
  if (!t.requires_grad(a)) return t.constant(std::move(out));
  return t.push(std::move(out), true, [a, c](Tape& t, const Matrix& g) { t.accumulate(a, g * c); });
}

// s is a 1x1 variable.
inline Var scale_by(Tape& t, Var a, Var s) {
  require_shape(t.value(s).size() == 1, "scale_by expects a scalar");
  Matrix out = t.value(a) * t.value(s)(0, 0);
  if (!t.any_requires({a, s})) return t.constant(std::move(out));
  return t.push(std::move(out), true, [a, s](Tape& t, const Matrix& g) {
    if (t.requires_grad(a)) t.accumulate(a, g * t.value(s)(0, 0));
    if (t.requires_grad(s)) t.accumulate(s, Matrix::Constant(1, 1, g.cwiseProduct(t.value(a)).sum()));
  });
}

inline Var silu(Tape& t, Var a) {
  const Matrix& av = t.value(a);
  Matrix sig = (1.0 + (-av.array()).exp()).inverse().matrix();
  Matrix out = av.cwiseProduct(sig);
  if (!t.requires_grad(a)) return t.constant(std::move(out));
  return t.push(std::move(out), true, [a, sig](Tape& t, const Matrix& g) {
    const Matrix& x = t.value(a);
    Matrix d = (sig.array() * (1.0 + x.array() * (1.0 - sig.array()))).matrix();
    t.accumulate(a, g.cwiseProduct(d));
  });
}

inline Var tanh(Tape& t, Var a) {
  Matrix out = t.value(a).array().tanh().matrix();
  if (!t.requires_grad(a)) return t.constant(std::move(out));
  const Var self{static_cast<int>(t.size())};
  return t.push(std::move(out), true, [a, self](Tape& t, const Matrix& g) {
    const Matrix& y = t.value(self);
    t.accumulate(a, (g.array() * (1.0 - y.array().square())).matrix());
  });
}

inline Var softmax_rows(Tape& t, Var a) {
  const Matrix& av = t.value(a);
  Matrix out(av.rows(), av.cols());
  for (Index i = 0; i < av.rows(); ++i) {
    const double m = av.row(i).maxCoeff();
    RowVector e = (av.row(i).array() - m).exp().matrix();
    out.row(i) = e / e.sum();
  }
  if (!t.requires_grad(a)) return t.constant(std::move(out));
  const Var self{static_cast<int>(t.size())};
  return t.push(std::move(out), true, [a, self](Tape& t, const Matrix& g) {
    const Matrix& y = t.value(self);
    Vector dot = g.cwiseProduct(y).rowwise().sum();
    Matrix ga = y.cwiseProduct(g.colwise() - dot);
    t.accumulate(a, ga);
  });
}

// Row-wise standardization without affine terms.
inline Var layer_norm_rows(Tape& t, Var a, double eps = 1e-5) {
  const Matrix& av = t.value(a);
  const Index n = av.cols();
  Matrix out(av.rows(), n);
  Vector inv_std(av.rows());
  for (Index i = 0; i < av.rows(); ++i) {
    const double mu = av.row(i).mean();
    const double var = (av.row(i).array() - mu).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    out.row(i) = (av.row(i).array() - mu) * inv_std(i);
  }
  if (!t.requires_grad(a)) return t.constant(std::move(out));
  const Var self{static_cast<int>(t.size())};
  return t.push(std::move(out), true, [a, self, inv_std](Tape& t, const Matrix& g) {
    const Matrix& y = t.value(self);
    Matrix ga(g.rows(), g.cols());
    for (Index i = 0; i < g.rows(); ++i) {
      const double gm = g.row(i).mean();
      const double gym = g.row(i).cwiseProduct(y.row(i)).mean();
      ga.row(i) = inv_std(i) * (g.row(i).array() - gm - y.row(i).array() * gym);
    }
    t.accumulate(a, ga);
  });
}

// Column means: (rows x n) -> (1 x n).
inline Var mean_rows(Tape& t, Var a) {
  const Matrix& av = t.value(a);
  require_shape(av.rows() > 0, "mean_rows of empty matrix");
  Matrix out = av.colwise().mean();
  if (!t.requires_grad(a)) return t.constant(std::move(out));
  const Index rows = av.rows();
  return t.push(std::move(out), true, [a, rows](Tape& t, const Matrix& g) {
    t.accumulate(a, g.replicate(rows, 1) / static_cast<double>(rows));
  });
}

// Means over consecutive, non-overlapping blocks of `window` rows.
inline Var segment_mean(Tape& t, Var a, Index window) {
  const Matrix& av = t.value(a);
  require_shape(window > 0 && av.rows() % window == 0,
                "segment_mean: " + std::to_string(av.rows()) + " rows not a multiple of window " + std::to_string(window));
  const Index segs = av.rows() / window;
  Matrix out(segs, av.cols());
  for (Index s = 0; s < segs; ++s) out.row(s) = av.middleRows(s * window, window).colwise().mean();
  if (!t.requires_grad(a)) return t.constant(std::move(out));
  return t.push(std::move(out), true, [a, window, segs](Tape& t, const Matrix& g) {
    Matrix ga(segs * window, g.cols());
    for (Index s = 0; s < segs; ++s)
      ga.middleRows(s * window, window) = g.row(s).replicate(window, 1) / static_cast<double>(window);
    t.accumulate(a, ga);
  });
}

inline Var concat_rows(Tape& t, Var a, Var b) {
  const Matrix& av = t.value(a);
  const Matrix& bv = t.value(b);
  require_shape(av.cols() == bv.cols(), "concat_rows column mismatch");
  Matrix out(av.rows() + bv.rows(), av.cols());
  out << av, bv;
  if (!t.any_requires({a, b})) return t.constant(std::move(out));
  const Index ra = av.rows();
  const Index rb = bv.rows();
  return t.push(std::move(out), true, [a, b, ra, rb](Tape& t, const Matrix& g) {
    if (t.requires_grad(a)) t.accumulate(a, g.topRows(ra));
    if (t.requires_grad(b)) t.accumulate(b, g.bottomRows(rb));
  });
}

inline Var slice_rows(Tape& t, Var a, Index start, Index count) {
  const Matrix& av = t.value(a);
  require_shape(start >= 0 && count >= 0 && start + count <= av.rows(), "slice_rows out of range");
  Matrix out = av.middleRows(start, count);
  if (!t.requires_grad(a)) return t.constant(std::move(out));
  const Index rows = av.rows();
  const Index cols = av.cols();
  return t.push(std::move(out), true, [a, start, count, rows, cols](Tape& t, const Matrix& g) {
    Matrix ga = Matrix::Zero(rows, cols);
    ga.middleRows(start, count) = g;
    t.accumulate(a, ga);
  });
}

inline Var gather_rows(Tape& t, Var table, const std::vector<Index>& rows_idx) {
  const Matrix& tv = t.value(table);
  Matrix out(static_cast<Index>(rows_idx.size()), tv.cols());
  for (size_t i = 0; i < rows_idx.size(); ++i) {
    require_shape(rows_idx[i] >= 0 && rows_idx[i] < tv.rows(), "gather_rows index out of range");
    out.row(static_cast<Index>(i)) = tv.row(rows_idx[i]);
  }
  if (!t.requires_grad(table)) return t.constant(std::move(out));
  return t.push(std::move(out), true, [table, rows_idx](Tape& t, const Matrix& g) {
    const Matrix& tv = t.value(table);
    Matrix gt = Matrix::Zero(tv.rows(), tv.cols());
    for (size_t i = 0; i < rows_idx.size(); ++i) gt.row(rows_idx[i]) += g.row(static_cast<Index>(i));
    t.accumulate(table, gt);
  });
}

// Row-major reshape.
inline Var reshape(Tape& t, Var a, Index rows, Index cols) {
  const Matrix& av = t.value(a);
  require_shape(av.size() == rows * cols, "reshape size mismatch");
  Matrix out = unflatten_rows(flatten_rows(av), rows, cols);
  if (!t.requires_grad(a)) return t.constant(std::move(out));
  const Index r0 = av.rows();
  const Index c0 = av.cols();
  return t.push(std::move(out), true, [a, r0, c0](Tape& t, const Matrix& g) {
    t.accumulate(a, unflatten_rows(flatten_rows(g), r0, c0));
  });
}

inline Var sum_all(Tape& t, Var a) {
  Matrix out = Matrix::Constant(1, 1, t.value(a).sum());
  if (!t.requires_grad(a)) return t.constant(std::move(out));
  return t.push(std::move(out), true, [a](Tape& t, const Matrix& g) {
    const Matrix& av = t.value(a);
    t.accumulate(a, Matrix::Constant(av.rows(), av.cols(), g(0, 0)));
  });
}

// mean(a .^ 2) as a 1x1 value.
inline Var mean_square(Tape& t, Var a) {
  const Matrix& av = t.value(a);
  const double n = static_cast<double>(av.size());
  Matrix out = Matrix::Constant(1, 1, av.squaredNorm() / n);
  if (!t.requires_grad(a)) return t.constant(std::move(out));
  return t.push(std::move(out), true, [a, n](Tape& t, const Matrix& g) {
    t.accumulate(a, t.value(a) * (2.0 * g(0, 0) / n));
  });
}

// sum |a| with the subgradient convention sign(0) = 0.
inline Var sum_abs(Tape& t, Var a) {
  Matrix out = Matrix::Constant(1, 1, t.value(a).cwiseAbs().sum());
  if (!t.requires_grad(a)) return t.constant(std::move(out));
  return t.push(std::move(out), true, [a](Tape& t, const Matrix& g) {
    Matrix s = t.value(a).unaryExpr([](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
    t.accumulate(a, s * g(0, 0));
  });
}

// cos(a, p) for a 1xn variable and a constant 1xn target; 1x1 value.
inline Var cosine_to(Tape& t, Var a, const RowVector& target) {
  const Matrix& av = t.value(a);
  require_shape(av.rows() == 1 && av.cols() == target.size(), "cosine_to shape mismatch");
  const double na = av.norm();
  const double np = target.norm();
  if (na == 0.0 || np == 0.0) throw PreconditionError("cosine of a zero vector");
  const double c = av.row(0).dot(target) / (na * np);
  Matrix out = Matrix::Constant(1, 1, c);
  if (!t.requires_grad(a)) return t.constant(std::move(out));
  return t.push(std::move(out), true, [a, target, na, np, c](Tape& t, const Matrix& g) {
    const Matrix& av = t.value(a);
    RowVector d = target / (na * np) - av.row(0) * (c / (na * na));
    t.accumulate(a, g(0, 0) * d);
  });
}

inline Var exp(Tape& t, Var a) {
  Matrix out = t.value(a).array().exp().matrix();
  if (!t.requires_grad(a)) return t.constant(std::move(out));
  const Var self{static_cast<int>(t.size())};
  return t.push(std::move(out), true, [a, self](Tape& t, const Matrix& g) {
    t.accumulate(a, g.cwiseProduct(t.value(self)));
  });
}

inline Var add_scalar(Tape& t, Var a, double c) {
  Matrix out = t.value(a).array() + c;
  if (!t.requires_grad(a)) return t.constant(std::move(out));
  return t.push(std::move(out), true, [a](Tape& t, const Matrix& g) { t.accumulate(a, g); });
}

// ---- composite blocks -----------------------------------------------------

// softmax(q k^T / sqrt(scale_dim)) v
inline Var attention(Tape& t, Var q, Var k, Var v, double scale_dim) {
  Var logits = scale(t, matmul_nt(t, q, k), 1.0 / std::sqrt(scale_dim));
  return matmul(t, softmax_rows(t, logits), v);
}

inline Var linear(Tape& t, Var x, Var w, Var b) { return add_row(t, matmul(t, x, w), b); }

}  // namespace protostyle::ad
