#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <vector>

#include "farslip/tensor.hpp"

namespace farslip::ad {

// Reverse-mode tape over dense Eigen matrices. Nodes are appended in
// topological order by construction; backward() walks the tape in
// reverse. Scalars are 1x1 matrices.
class Tape;

struct Var {
  Tape* tape = nullptr;
  int index = -1;

  const Matrix& val() const;
  double scalar() const;
  bool valid() const { return tape != nullptr && index >= 0; }
};

class Tape {
 public:
  struct Node {
    Matrix value;
    Matrix grad;
    std::function<void(Tape&, const Matrix&)> backprop;  // adds to parent grads
    bool needs_grad = false;
  };

  Var leaf(Matrix value, bool needs_grad = true) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  Var constant(Matrix value) { return leaf(std::move(value), false); }

  Var emplace(Matrix value, bool needs_grad, std::function<void(Tape&, const Matrix&)> backprop) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    if (needs_grad) n.backprop = std::move(backprop);
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  const Matrix& value(int i) const { return nodes_[i].value; }
  bool needs_grad(int i) const { return nodes_[i].needs_grad; }

  const Matrix& grad(const Var& v) const { return nodes_[v.index].grad; }

  void accumulate(int i, const Matrix& g) {
    Node& n = nodes_[i];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }

  // Seeds d(loss)/d(loss)=1 at `root` (must be 1x1) and propagates.
  void backward(const Var& root) {
    if (root.val().rows() != 1 || root.val().cols() != 1)
      throw std::invalid_argument("backward: root must be a scalar");
    for (auto& n : nodes_) n.grad.resize(0, 0);
    nodes_[root.index].grad = Matrix::Ones(1, 1);
    for (int i = root.index; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.grad.size() == 0 || !n.backprop) continue;
      n.backprop(*this, n.grad);
    }
  }

  size_t size() const { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
};

inline const Matrix& Var::val() const { return tape->value(index); }
inline double Var::scalar() const {
  const Matrix& m = val();
  if (m.rows() != 1 || m.cols() != 1) throw std::invalid_argument("Var::scalar: not 1x1");
  return m(0, 0);
}

namespace detail {
inline bool any_grad(std::initializer_list<Var> vs) {
  for (const Var& v : vs)
    if (v.tape->needs_grad(v.index)) return true;
  return false;
}
}  // namespace detail

inline Var add(Var a, Var b) {
  Tape& t = *a.tape;
  int ia = a.index, ib = b.index;
  return t.emplace(a.val() + b.val(), detail::any_grad({a, b}), [ia, ib](Tape& t, const Matrix& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

inline Var sub(Var a, Var b) {
  Tape& t = *a.tape;
  int ia = a.index, ib = b.index;
  return t.emplace(a.val() - b.val(), detail::any_grad({a, b}), [ia, ib](Tape& t, const Matrix& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, Matrix(-g));
  });
}

// Adds a 1 x cols row vector to every row of a.
inline Var add_rowvec(Var a, Var row) {
  Tape& t = *a.tape;
  int ia = a.index, ir = row.index;
  Matrix out = a.val().rowwise() + Eigen::RowVectorXd(row.val().row(0));
  return t.emplace(std::move(out), detail::any_grad({a, row}), [ia, ir](Tape& t, const Matrix& g) {
    t.accumulate(ia, g);
    t.accumulate(ir, Matrix(g.colwise().sum()));
  });
}

inline Var matmul(Var a, Var b) {
  Tape& t = *a.tape;
  int ia = a.index, ib = b.index;
  return t.emplace(a.val() * b.val(), detail::any_grad({a, b}), [ia, ib](Tape& t, const Matrix& g) {
    t.accumulate(ia, Matrix(g * t.value(ib).transpose()));
    t.accumulate(ib, Matrix(t.value(ia).transpose() * g));
  });
}

inline Var transpose(Var a) {
  Tape& t = *a.tape;
  int ia = a.index;
  return t.emplace(a.val().transpose(), t.needs_grad(ia),
                   [ia](Tape& t, const Matrix& g) { t.accumulate(ia, Matrix(g.transpose())); });
}

inline Var cmul(Var a, Var b) {
  Tape& t = *a.tape;
  int ia = a.index, ib = b.index;
  return t.emplace(a.val().cwiseProduct(b.val()), detail::any_grad({a, b}), [ia, ib](Tape& t, const Matrix& g) {
    t.accumulate(ia, Matrix(g.cwiseProduct(t.value(ib))));
    t.accumulate(ib, Matrix(g.cwiseProduct(t.value(ia))));
  });
}

inline Var scale(Var a, double s) {
  Tape& t = *a.tape;
  int ia = a.index;
  return t.emplace(a.val() * s, t.needs_grad(ia),
                   [ia, s](Tape& t, const Matrix& g) { t.accumulate(ia, Matrix(g * s)); });
}

// Multiplies every entry of a by the 1x1 scalar s.
inline Var scale_by(Var a, Var s) {
  Tape& t = *a.tape;
  int ia = a.index, is = s.index;
  return t.emplace(a.val() * s.scalar(), detail::any_grad({a, s}), [ia, is](Tape& t, const Matrix& g) {
    t.accumulate(ia, Matrix(g * t.value(is)(0, 0)));
    Matrix gs(1, 1);
    gs(0, 0) = g.cwiseProduct(t.value(ia)).sum();
    t.accumulate(is, gs);
  });
}

inline Var cwise_exp(Var a) {
  Tape& t = *a.tape;
  int ia = a.index;
  Matrix out = a.val().array().exp();
  const int io = static_cast<int>(t.size());
  return t.emplace(std::move(out), t.needs_grad(ia), [ia, io](Tape& t, const Matrix& g) {
    t.accumulate(ia, Matrix(g.cwiseProduct(t.value(io))));
  });
}

inline Var cwise_log(Var a) {
  Tape& t = *a.tape;
  int ia = a.index;
  Matrix out = a.val().array().log();
  return t.emplace(std::move(out), t.needs_grad(ia), [ia](Tape& t, const Matrix& g) {
    t.accumulate(ia, Matrix(g.cwiseQuotient(t.value(ia))));
  });
}

// tanh-approximation GELU, the form used by the toy transformer MLP.
inline Var gelu(Var a) {
  Tape& t = *a.tape;
  int ia = a.index;
  const Matrix& x = a.val();
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  Matrix inner = (c * (x.array() + 0.044715 * x.array().cube())).matrix();
  Matrix th = inner.array().tanh();
  Matrix out = 0.5 * x.cwiseProduct((th.array() + 1.0).matrix());
  Matrix dinner = (c * (1.0 + 3.0 * 0.044715 * x.array().square())).matrix();
  Matrix deriv = (0.5 * (th.array() + 1.0) + 0.5 * x.array() * (1.0 - th.array().square()) * dinner.array()).matrix();
  auto dptr = std::make_shared<Matrix>(std::move(deriv));
  return t.emplace(std::move(out), t.needs_grad(ia), [ia, dptr](Tape& t, const Matrix& g) {
    t.accumulate(ia, Matrix(g.cwiseProduct(*dptr)));
  });
}

// Row-wise softmax.
inline Var row_softmax(Var a) {
  Tape& t = *a.tape;
  int ia = a.index;
  const Matrix& x = a.val();
  Matrix y(x.rows(), x.cols());
  for (int r = 0; r < x.rows(); ++r) {
    Eigen::ArrayXd e = (x.row(r).array() - x.row(r).maxCoeff()).exp();
    y.row(r) = (e / e.sum()).matrix();
  }
  const int io = static_cast<int>(t.size());
  return t.emplace(std::move(y), t.needs_grad(ia), [ia, io](Tape& t, const Matrix& g) {
    const Matrix& y = t.value(io);
    Matrix gx(y.rows(), y.cols());
    for (int r = 0; r < y.rows(); ++r) {
      double dot = g.row(r).dot(y.row(r));
      gx.row(r) = (g.row(r).array() - dot) * y.row(r).array();
    }
    t.accumulate(ia, gx);
  });
}

// Row-wise log-sum-exp, returns an n x 1 column.
inline Var logsumexp_rows(Var a) {
  Tape& t = *a.tape;
  int ia = a.index;
  const Matrix& x = a.val();
  Matrix out(x.rows(), 1);
  for (int r = 0; r < x.rows(); ++r) {
    double m = x.row(r).maxCoeff();
    out(r, 0) = m + std::log((x.row(r).array() - m).exp().sum());
  }
  const int io = static_cast<int>(t.size());
  return t.emplace(std::move(out), t.needs_grad(ia), [ia, io](Tape& t, const Matrix& g) {
    const Matrix& x = t.value(ia);
    const Matrix& l = t.value(io);
    Matrix gx(x.rows(), x.cols());
    for (int r = 0; r < x.rows(); ++r)
      gx.row(r) = g(r, 0) * (x.row(r).array() - l(r, 0)).exp().matrix();
    t.accumulate(ia, gx);
  });
}

inline Var sum_all(Var a) {
  Tape& t = *a.tape;
  int ia = a.index;
  Matrix out(1, 1);
  out(0, 0) = a.val().sum();
  return t.emplace(std::move(out), t.needs_grad(ia), [ia](Tape& t, const Matrix& g) {
    t.accumulate(ia, Matrix(Matrix::Constant(t.value(ia).rows(), t.value(ia).cols(), g(0, 0))));
  });
}

inline Var mean_all(Var a) { return scale(sum_all(a), 1.0 / static_cast<double>(a.val().size())); }

// Mean over rows, returns 1 x d.
inline Var mean_rows(Var a) {
  Tape& t = *a.tape;
  int ia = a.index;
  const double n = static_cast<double>(a.val().rows());
  Matrix out = a.val().colwise().mean();
  return t.emplace(std::move(out), t.needs_grad(ia), [ia, n](Tape& t, const Matrix& g) {
    t.accumulate(ia, Matrix(Matrix::Ones(t.value(ia).rows(), 1) * (g / n)));
  });
}

inline Var rows(Var a, int start, int count) {
  Tape& t = *a.tape;
  int ia = a.index;
  return t.emplace(a.val().middleRows(start, count), t.needs_grad(ia),
                   [ia, start, count](Tape& t, const Matrix& g) {
                     Matrix gx = Matrix::Zero(t.value(ia).rows(), t.value(ia).cols());
                     gx.middleRows(start, count) = g;
                     t.accumulate(ia, gx);
                   });
}

inline Var cols(Var a, int start, int count) {
  Tape& t = *a.tape;
  int ia = a.index;
  return t.emplace(a.val().middleCols(start, count), t.needs_grad(ia),
                   [ia, start, count](Tape& t, const Matrix& g) {
                     Matrix gx = Matrix::Zero(t.value(ia).rows(), t.value(ia).cols());
                     gx.middleCols(start, count) = g;
                     t.accumulate(ia, gx);
                   });
}

inline Var vcat(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("vcat: empty");
  Tape& t = *parts[0].tape;
  Eigen::Index total = 0;
  bool ng = false;
  for (const Var& p : parts) {
    total += p.val().rows();
    ng = ng || t.needs_grad(p.index);
  }
  Matrix out(total, parts[0].val().cols());
  std::vector<int> idx;
  std::vector<Eigen::Index> sizes;
  Eigen::Index r = 0;
  for (const Var& p : parts) {
    out.middleRows(r, p.val().rows()) = p.val();
    idx.push_back(p.index);
    sizes.push_back(p.val().rows());
    r += p.val().rows();
  }
  return t.emplace(std::move(out), ng, [idx, sizes](Tape& t, const Matrix& g) {
    Eigen::Index r = 0;
    for (size_t i = 0; i < idx.size(); ++i) {
      t.accumulate(idx[i], Matrix(g.middleRows(r, sizes[i])));
      r += sizes[i];
    }
  });
}

inline Var hcat(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("hcat: empty");
  Tape& t = *parts[0].tape;
  Eigen::Index total = 0;
  bool ng = false;
  for (const Var& p : parts) {
    total += p.val().cols();
    ng = ng || t.needs_grad(p.index);
  }
  Matrix out(parts[0].val().rows(), total);
  std::vector<int> idx;
  std::vector<Eigen::Index> sizes;
  Eigen::Index c = 0;
  for (const Var& p : parts) {
    out.middleCols(c, p.val().cols()) = p.val();
    idx.push_back(p.index);
    sizes.push_back(p.val().cols());
    c += p.val().cols();
  }
  return t.emplace(std::move(out), ng, [idx, sizes](Tape& t, const Matrix& g) {
    Eigen::Index c = 0;
    for (size_t i = 0; i < idx.size(); ++i) {
      t.accumulate(idx[i], Matrix(g.middleCols(c, sizes[i])));
      c += sizes[i];
    }
  });
}

// Gathers rows of a by index (embedding lookup).
inline Var gather_rows(Var a, const std::vector<int>& indices) {
  Tape& t = *a.tape;
  int ia = a.index;
  Matrix out(static_cast<Eigen::Index>(indices.size()), a.val().cols());
  for (size_t i = 0; i < indices.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = a.val().row(indices[i]);
  return t.emplace(std::move(out), t.needs_grad(ia), [ia, indices](Tape& t, const Matrix& g) {
    Matrix gx = Matrix::Zero(t.value(ia).rows(), t.value(ia).cols());
    for (size_t i = 0; i < indices.size(); ++i) gx.row(indices[i]) += g.row(static_cast<Eigen::Index>(i));
    t.accumulate(ia, gx);
  });
}

// Row-wise layer normalization with learnable gain/bias (1 x d each).
inline Var layernorm_rows(Var a, Var gamma, Var beta, double eps = 1e-5) {
  Tape& t = *a.tape;
  int ia = a.index, ig = gamma.index, ib = beta.index;
  const Matrix& x = a.val();
  const double d = static_cast<double>(x.cols());
  Matrix xhat(x.rows(), x.cols());
  Vector inv_std(x.rows());
  for (int r = 0; r < x.rows(); ++r) {
    double mu = x.row(r).mean();
    double var = (x.row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (x.row(r).array() - mu) * inv_std(r);
  }
  Matrix out = (xhat.array().rowwise() * Eigen::ArrayXd(gamma.val().row(0).transpose()).transpose()).matrix();
  out = (out.array().rowwise() + Eigen::ArrayXd(beta.val().row(0).transpose()).transpose()).matrix();
  auto xhat_ptr = std::make_shared<Matrix>(std::move(xhat));
  auto inv_std_ptr = std::make_shared<Vector>(std::move(inv_std));
  bool ng = detail::any_grad({a, gamma, beta});
  return t.emplace(std::move(out), ng, [ia, ig, ib, d, xhat_ptr, inv_std_ptr](Tape& t, const Matrix& g) {
    const Matrix& xhat = *xhat_ptr;
    const Eigen::RowVectorXd gam = t.value(ig).row(0);
    t.accumulate(ib, Matrix(g.colwise().sum()));
    t.accumulate(ig, Matrix(g.cwiseProduct(xhat).colwise().sum()));
    Matrix gx(xhat.rows(), xhat.cols());
    for (int r = 0; r < xhat.rows(); ++r) {
      Eigen::RowVectorXd gy = g.row(r).cwiseProduct(gam);
      double mean_gy = gy.mean();
      double mean_gy_xhat = gy.cwiseProduct(xhat.row(r)).mean();
      gx.row(r) =
          ((gy.array() - mean_gy - xhat.row(r).array() * mean_gy_xhat) * (*inv_std_ptr)(r)).matrix();
      (void)d;
    }
    t.accumulate(ia, gx);
  });
}

// Row-wise L2 normalization: y_r = x_r / ||x_r||.
inline Var l2_normalize_rows(Var a, double min_norm = 1e-12) {
  Tape& t = *a.tape;
  int ia = a.index;
  const Matrix& x = a.val();
  Matrix y(x.rows(), x.cols());
  Vector norms(x.rows());
  for (int r = 0; r < x.rows(); ++r) {
    norms(r) = x.row(r).norm();
    if (norms(r) < min_norm) throw std::invalid_argument("l2_normalize_rows: zero-norm row");
    y.row(r) = x.row(r) / norms(r);
  }
  auto norm_ptr = std::make_shared<Vector>(std::move(norms));
  const int io = static_cast<int>(t.size());
  return t.emplace(std::move(y), t.needs_grad(ia), [ia, io, norm_ptr](Tape& t, const Matrix& g) {
    const Matrix& y = t.value(io);
    Matrix gx(y.rows(), y.cols());
    for (int r = 0; r < y.rows(); ++r) {
      double dot = g.row(r).dot(y.row(r));
      gx.row(r) = (g.row(r) - dot * y.row(r)) / (*norm_ptr)(r);
    }
    t.accumulate(ia, gx);
  });
}

inline Var add_const(Var a, double c) {
  Tape& t = *a.tape;
  int ia = a.index;
  return t.emplace(Matrix(a.val().array() + c), t.needs_grad(ia),
                   [ia](Tape& t, const Matrix& g) { t.accumulate(ia, g); });
}

inline Var cwise_reciprocal(Var a) {
  Tape& t = *a.tape;
  int ia = a.index;
  return t.emplace(Matrix(a.val().cwiseInverse()), t.needs_grad(ia), [ia](Tape& t, const Matrix& g) {
    const Matrix& x = t.value(ia);
    t.accumulate(ia, Matrix(-g.array() / (x.array() * x.array())));
  });
}

// max(a, lo) elementwise; gradient is zero where the clamp is active.
inline Var clamp_min(Var a, double lo) {
  Tape& t = *a.tape;
  int ia = a.index;
  return t.emplace(Matrix(a.val().cwiseMax(lo)), t.needs_grad(ia), [ia, lo](Tape& t, const Matrix& g) {
    Matrix gx = (t.value(ia).array() > lo).select(g, Matrix::Zero(g.rows(), g.cols()));
    t.accumulate(ia, gx);
  });
}

// Sum along each row, returns n x 1.
inline Var sum_rowwise(Var a) {
  Tape& t = *a.tape;
  int ia = a.index;
  return t.emplace(Matrix(a.val().rowwise().sum()), t.needs_grad(ia), [ia](Tape& t, const Matrix& g) {
    t.accumulate(ia, Matrix(g * Eigen::RowVectorXd::Ones(t.value(ia).cols())));
  });
}

// Main diagonal of a square matrix, returns n x 1.
inline Var diagonal(Var a) {
  Tape& t = *a.tape;
  int ia = a.index;
  return t.emplace(Matrix(a.val().diagonal()), t.needs_grad(ia), [ia](Tape& t, const Matrix& g) {
    Matrix gx = Matrix::Zero(t.value(ia).rows(), t.value(ia).cols());
    gx.diagonal() = g.col(0);
    t.accumulate(ia, gx);
  });
}

// Detached copy: value flows, gradient does not.
inline Var detach(Var a) { return a.tape->constant(a.val()); }

// Central finite differences of f at x, for test-side gradient checks.
inline Matrix finite_difference(const std::function<double(const Matrix&)>& f, const Matrix& x,
                                double h = 1e-6) {
  Matrix g(x.rows(), x.cols());
  Matrix xp = x;
  for (int i = 0; i < x.rows(); ++i)
    for (int j = 0; j < x.cols(); ++j) {
      double orig = xp(i, j);
      xp(i, j) = orig + h;
      double fp = f(xp);
      xp(i, j) = orig - h;
      double fm = f(xp);
      xp(i, j) = orig;
      g(i, j) = (fp - fm) / (2.0 * h);
    }
  return g;
}

}  // namespace farslip::ad
