#pragma once

// Minimal reverse-mode differentiation over dense matrices.
//
// A Tape records every operation applied to Vars in execution order. Each
// recorded node keeps its value and a closure that pushes the node's adjoint
// into its inputs. Tape::backward walks the nodes in reverse and finally adds
// the adjoints of parameter leaves into Parameter::grad.
//
// Nodes whose inputs are all constants do not require a gradient and record
// no closure, so constant subexpressions cost only their forward evaluation.

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numbers>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "tdhnode/errors.hpp"

namespace tdhnode {

template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

template <class T>
struct Parameter {
  std::string name;
  Matrix<T> value;
  Matrix<T> grad;

  void zero_grad() { grad = Matrix<T>::Zero(value.rows(), value.cols()); }
};

namespace ad {

template <class T>
class Tape;

template <class T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Matrix<T>& value() const { return tape_->value(id_); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  T scalar() const { return value()(0, 0); }
  bool requires_grad() const { return tape_->requires_grad(id_); }

  Tape<T>* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <class T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t)>;

  /// With gradients disabled, parameters enter as constants and nothing is
  /// recorded for the backward pass.
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) { nodes_.reserve(1024); }

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }

  Var<T> constant(Matrix<T> value) {
    nodes_.push_back(Node{std::move(value), {}, {}, nullptr, false});
    return Var<T>(this, nodes_.size() - 1);
  }

  Var<T> scalar(T v) { return constant(Matrix<T>::Constant(1, 1, v)); }

  /// One leaf per parameter per tape; repeated calls return the same Var.
  Var<T> parameter(Parameter<T>& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return Var<T>(this, it->second);
    nodes_.push_back(Node{p.value, {}, {}, grad_enabled_ ? &p : nullptr, grad_enabled_});
    param_nodes_.emplace(&p, nodes_.size() - 1);
    return Var<T>(this, nodes_.size() - 1);
  }

  Var<T> record(Matrix<T> value, std::initializer_list<Var<T>> inputs, Backward fn) {
    bool needs = false;
    if (grad_enabled_)
      for (const auto& v : inputs) needs = needs || requires_grad(v.id());
    nodes_.push_back(Node{std::move(value), {}, needs ? std::move(fn) : Backward{}, nullptr, needs});
    return Var<T>(this, nodes_.size() - 1);
  }

  Var<T> record(Matrix<T> value, const std::vector<Var<T>>& inputs, Backward fn) {
    bool needs = false;
    if (grad_enabled_)
      for (const auto& v : inputs) needs = needs || requires_grad(v.id());
    nodes_.push_back(Node{std::move(value), {}, needs ? std::move(fn) : Backward{}, nullptr, needs});
    return Var<T>(this, nodes_.size() - 1);
  }

  const Matrix<T>& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Adjoint of node `id`; empty when nothing flowed into it.
  const Matrix<T>& grad(std::size_t id) const { return nodes_[id].grad; }

  /// Adds `g` into the adjoint of `id` (no-op for constants).
  template <class Expr>
  void accumulate(std::size_t id, const Expr& g) {
    Node& node = nodes_[id];
    if (!node.requires_grad) return;
    if (node.grad.size() == 0) {
      node.grad = g;
    } else {
      node.grad += g;
    }
  }

  /// Reverse sweep from a 1x1 output. Parameter gradients are added to (not
  /// overwritten in) Parameter::grad.
  void backward(const Var<T>& output, T seed = T(1)) {
    if (nodes_.empty() || output.tape() != this) {
      throw Error(ErrorCode::NoRecordedForward, "backward on an empty or foreign tape");
    }
    if (output.rows() != 1 || output.cols() != 1) {
      throw Error(ErrorCode::ShapeMismatch, "backward needs a scalar output");
    }
    if (backward_done_) throw Error(ErrorCode::NoRecordedForward, "tape already consumed by backward");
    backward_done_ = true;
    if (!requires_grad(output.id())) return;
    nodes_[output.id()].grad = Matrix<T>::Constant(1, 1, seed);
    for (std::size_t id = output.id() + 1; id-- > 0;) {
      Node& node = nodes_[id];
      if (node.grad.size() == 0) continue;
      if (node.backward) node.backward(*this, id);
      if (node.param) {
        if (node.param->grad.size() == 0) node.param->zero_grad();
        node.param->grad += node.grad;
      }
    }
  }

 private:
  struct Node {
    Matrix<T> value;
    Matrix<T> grad;
    Backward backward;
    Parameter<T>* param;
    bool requires_grad;
  };

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter<T>*, std::size_t> param_nodes_;
  bool grad_enabled_;
  bool backward_done_ = false;
};

namespace detail {

inline void require(bool ok, const char* what) {
  if (!ok) throw Error(ErrorCode::ShapeMismatch, what);
}

template <class T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <class T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
  return cdf + x * pdf;
}

template <class T>
T sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and linear algebra

template <class T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
  const auto ia = a.id(), ib = b.id();
  return a.tape()->record(a.value() + b.value(), {a, b}, [ia, ib](Tape<T>& t, std::size_t self) {
    t.accumulate(ia, t.grad(self));
    t.accumulate(ib, t.grad(self));
  });
}

template <class T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
  const auto ia = a.id(), ib = b.id();
  return a.tape()->record(a.value() - b.value(), {a, b}, [ia, ib](Tape<T>& t, std::size_t self) {
    t.accumulate(ia, t.grad(self));
    t.accumulate(ib, -t.grad(self));
  });
}

template <class T>
Var<T> operator*(const Var<T>& a, T s) {
  const auto ia = a.id();
  return a.tape()->record(a.value() * s, {a}, [ia, s](Tape<T>& t, std::size_t self) {
    t.accumulate(ia, t.grad(self) * s);
  });
}

template <class T>
Var<T> operator*(T s, const Var<T>& a) {
  return a * s;
}

template <class T>
Var<T> operator-(const Var<T>& a) {
  return a * T(-1);
}

/// Elementwise product.
template <class T>
Var<T> hadamard(const Var<T>& a, const Var<T>& b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "hadamard: shape mismatch");
  const auto ia = a.id(), ib = b.id();
  return a.tape()->record(a.value().cwiseProduct(b.value()), {a, b}, [ia, ib](Tape<T>& t, std::size_t self) {
    t.accumulate(ia, t.grad(self).cwiseProduct(t.value(ib)));
    t.accumulate(ib, t.grad(self).cwiseProduct(t.value(ia)));
  });
}

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  detail::require(a.cols() == b.rows(), "matmul: inner dimension mismatch");
  const auto ia = a.id(), ib = b.id();
  Matrix<T> out = a.value() * b.value();
  return a.tape()->record(std::move(out), {a, b}, [ia, ib](Tape<T>& t, std::size_t self) {
    const Matrix<T>& g = t.grad(self);
    if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
    if (t.requires_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

/// a * b^T
template <class T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  detail::require(a.cols() == b.cols(), "matmul_nt: inner dimension mismatch");
  const auto ia = a.id(), ib = b.id();
  Matrix<T> out = a.value() * b.value().transpose();
  return a.tape()->record(std::move(out), {a, b}, [ia, ib](Tape<T>& t, std::size_t self) {
    const Matrix<T>& g = t.grad(self);
    if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib));
    if (t.requires_grad(ib)) t.accumulate(ib, g.transpose() * t.value(ia));
  });
}

template <class T>
Var<T> transpose(const Var<T>& a) {
  const auto ia = a.id();
  return a.tape()->record(a.value().transpose(), {a}, [ia](Tape<T>& t, std::size_t self) {
    t.accumulate(ia, t.grad(self).transpose());
  });
}

/// Adds a 1 x c row to every row of an r x c matrix.
template <class T>
Var<T> add_row(const Var<T>& a, const Var<T>& row) {
  detail::require(row.rows() == 1 && row.cols() == a.cols(), "add_row: shape mismatch");
  const auto ia = a.id(), ir = row.id();
  Matrix<T> out = a.value().rowwise() + row.value().row(0);
  return a.tape()->record(std::move(out), {a, row}, [ia, ir](Tape<T>& t, std::size_t self) {
    t.accumulate(ia, t.grad(self));
    if (t.requires_grad(ir)) t.accumulate(ir, t.grad(self).colwise().sum());
  });
}

/// Repeats a 1 x c row r times.
template <class T>
Var<T> broadcast_rows(const Var<T>& row, Eigen::Index r) {
  detail::require(row.rows() == 1, "broadcast_rows: expects a row vector");
  const auto ir = row.id();
  Matrix<T> out = row.value().replicate(r, 1);
  return row.tape()->record(std::move(out), {row}, [ir](Tape<T>& t, std::size_t self) {
    t.accumulate(ir, t.grad(self).colwise().sum());
  });
}

template <class T>
Var<T> gelu(const Var<T>& a) {
  const auto ia = a.id();
  Matrix<T> out = a.value().unaryExpr([](T x) { return detail::gelu(x); });
  return a.tape()->record(std::move(out), {a}, [ia](Tape<T>& t, std::size_t self) {
    t.accumulate(ia, t.grad(self).cwiseProduct(t.value(ia).unaryExpr([](T x) { return detail::gelu_grad(x); })));
  });
}

template <class T>
Var<T> sigmoid(const Var<T>& a) {
  const auto ia = a.id();
  Matrix<T> out = a.value().unaryExpr([](T x) { return detail::sigmoid(x); });
  return a.tape()->record(std::move(out), {a}, [ia](Tape<T>& t, std::size_t self) {
    const Matrix<T>& y = t.value(self);
    t.accumulate(ia, t.grad(self).cwiseProduct(y.cwiseProduct((T(1) - y.array()).matrix())));
  });
}

template <class T>
Var<T> cos(const Var<T>& a) {
  const auto ia = a.id();
  Matrix<T> out = a.value().array().cos().matrix();
  return a.tape()->record(std::move(out), {a}, [ia](Tape<T>& t, std::size_t self) {
    t.accumulate(ia, -t.grad(self).cwiseProduct(t.value(ia).array().sin().matrix()));
  });
}

/// Elementwise x^p for positive x.
template <class T>
Var<T> pow(const Var<T>& a, T p) {
  const auto ia = a.id();
  Matrix<T> out = a.value().array().pow(p).matrix();
  return a.tape()->record(std::move(out), {a}, [ia, p](Tape<T>& t, std::size_t self) {
    t.accumulate(ia, t.grad(self).cwiseProduct((p * t.value(ia).array().pow(p - T(1))).matrix()));
  });
}

/// Elementwise max(x, floor); the gradient passes only where x > floor.
template <class T>
Var<T> clamp_min(const Var<T>& a, T floor) {
  const auto ia = a.id();
  Matrix<T> out = a.value().cwiseMax(floor);
  return a.tape()->record(std::move(out), {a}, [ia, floor](Tape<T>& t, std::size_t self) {
    const Matrix<T> pass = (t.value(ia).array() > floor).template cast<T>().matrix();
    t.accumulate(ia, t.grad(self).cwiseProduct(pass));
  });
}

/// w * s + b for a scalar constant s and rows w, b.
template <class T>
Var<T> affine_scalar(const Var<T>& w, T s, const Var<T>& b) {
  return w * s + b;
}

// ---------------------------------------------------------------------------
// Reductions, slicing, stacking

template <class T>
Var<T> sum(const Var<T>& a) {
  const auto ia = a.id();
  const auto r = a.rows(), c = a.cols();
  return a.tape()->record(Matrix<T>::Constant(1, 1, a.value().sum()), {a},
                          [ia, r, c](Tape<T>& t, std::size_t self) {
                            t.accumulate(ia, Matrix<T>::Constant(r, c, t.grad(self)(0, 0)));
                          });
}

/// Column sums as a 1 x c row.
template <class T>
Var<T> sum_rows(const Var<T>& a) {
  const auto ia = a.id();
  const auto r = a.rows();
  Matrix<T> out = a.value().colwise().sum();
  return a.tape()->record(std::move(out), {a}, [ia, r](Tape<T>& t, std::size_t self) {
    t.accumulate(ia, t.grad(self).replicate(r, 1));
  });
}

/// Column means as a 1 x c row.
template <class T>
Var<T> mean_rows(const Var<T>& a) {
  return sum_rows(a) * (T(1) / T(a.rows()));
}

template <class T>
Var<T> select_rows(const Var<T>& a, const std::vector<std::size_t>& idx) {
  Matrix<T> out(static_cast<Eigen::Index>(idx.size()), a.cols());
  for (std::size_t k = 0; k < idx.size(); ++k) out.row(k) = a.value().row(idx[k]);
  const auto ia = a.id();
  const auto r = a.rows(), c = a.cols();
  return a.tape()->record(std::move(out), {a}, [ia, idx, r, c](Tape<T>& t, std::size_t self) {
    Matrix<T> g = Matrix<T>::Zero(r, c);
    const Matrix<T>& up = t.grad(self);
    for (std::size_t k = 0; k < idx.size(); ++k) g.row(idx[k]) += up.row(k);
    t.accumulate(ia, g);
  });
}

template <class T>
Var<T> col_block(const Var<T>& a, Eigen::Index c0, Eigen::Index nc) {
  const auto ia = a.id();
  const auto r = a.rows(), c = a.cols();
  Matrix<T> out = a.value().middleCols(c0, nc);
  return a.tape()->record(std::move(out), {a}, [ia, r, c, c0, nc](Tape<T>& t, std::size_t self) {
    Matrix<T> g = Matrix<T>::Zero(r, c);
    g.middleCols(c0, nc) = t.grad(self);
    t.accumulate(ia, g);
  });
}

template <class T>
Var<T> vstack(const std::vector<Var<T>>& parts) {
  detail::require(!parts.empty(), "vstack: no inputs");
  Eigen::Index rows = 0;
  const Eigen::Index c = parts.front().cols();
  for (const auto& p : parts) {
    detail::require(p.cols() == c, "vstack: column mismatch");
    rows += p.rows();
  }
  Matrix<T> out(rows, c);
  std::vector<std::pair<std::size_t, Eigen::Index>> spans;
  Eigen::Index r0 = 0;
  for (const auto& p : parts) {
    out.middleRows(r0, p.rows()) = p.value();
    spans.emplace_back(p.id(), r0);
    r0 += p.rows();
  }
  return parts.front().tape()->record(std::move(out), parts, [spans](Tape<T>& t, std::size_t self) {
    const Matrix<T>& g = t.grad(self);
    for (const auto& [id, start] : spans) {
      if (t.requires_grad(id)) t.accumulate(id, g.middleRows(start, t.value(id).rows()));
    }
  });
}

template <class T>
Var<T> hstack(const std::vector<Var<T>>& parts) {
  detail::require(!parts.empty(), "hstack: no inputs");
  Eigen::Index cols = 0;
  const Eigen::Index r = parts.front().rows();
  for (const auto& p : parts) {
    detail::require(p.rows() == r, "hstack: row mismatch");
    cols += p.cols();
  }
  Matrix<T> out(r, cols);
  std::vector<std::pair<std::size_t, Eigen::Index>> spans;
  Eigen::Index c0 = 0;
  for (const auto& p : parts) {
    out.middleCols(c0, p.cols()) = p.value();
    spans.emplace_back(p.id(), c0);
    c0 += p.cols();
  }
  return parts.front().tape()->record(std::move(out), parts, [spans](Tape<T>& t, std::size_t self) {
    const Matrix<T>& g = t.grad(self);
    for (const auto& [id, start] : spans) {
      if (t.requires_grad(id)) t.accumulate(id, g.middleCols(start, t.value(id).cols()));
    }
  });
}

/// Row i of `a` multiplied by v(i); v is r x 1.
template <class T>
Var<T> scale_rows(const Var<T>& a, const Var<T>& v) {
  detail::require(v.cols() == 1 && v.rows() == a.rows(), "scale_rows: shape mismatch");
  const auto ia = a.id(), iv = v.id();
  Matrix<T> out = v.value().col(0).asDiagonal() * a.value();
  return a.tape()->record(std::move(out), {a, v}, [ia, iv](Tape<T>& t, std::size_t self) {
    const Matrix<T>& g = t.grad(self);
    if (t.requires_grad(ia)) t.accumulate(ia, t.value(iv).col(0).asDiagonal() * g);
    if (t.requires_grad(iv)) t.accumulate(iv, g.cwiseProduct(t.value(ia)).rowwise().sum());
  });
}

/// Column j of `a` multiplied by v(j); v is 1 x c.
template <class T>
Var<T> scale_cols(const Var<T>& a, const Var<T>& v) {
  detail::require(v.rows() == 1 && v.cols() == a.cols(), "scale_cols: shape mismatch");
  const auto ia = a.id(), iv = v.id();
  Matrix<T> out = a.value() * v.value().row(0).asDiagonal();
  return a.tape()->record(std::move(out), {a, v}, [ia, iv](Tape<T>& t, std::size_t self) {
    const Matrix<T>& g = t.grad(self);
    if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(iv).row(0).asDiagonal());
    if (t.requires_grad(iv)) t.accumulate(iv, g.cwiseProduct(t.value(ia)).colwise().sum());
  });
}

/// Diagonal of a square matrix as an m x 1 column.
template <class T>
Var<T> diagonal(const Var<T>& a) {
  detail::require(a.rows() == a.cols(), "diagonal: matrix not square");
  const auto ia = a.id();
  const auto m = a.rows();
  Matrix<T> out = a.value().diagonal();
  return a.tape()->record(std::move(out), {a}, [ia, m](Tape<T>& t, std::size_t self) {
    Matrix<T> g = Matrix<T>::Zero(m, m);
    g.diagonal() = t.grad(self).col(0);
    t.accumulate(ia, g);
  });
}

/// I - a for square a.
template <class T>
Var<T> identity_minus(const Var<T>& a) {
  detail::require(a.rows() == a.cols(), "identity_minus: matrix not square");
  const auto ia = a.id();
  Matrix<T> out = Matrix<T>::Identity(a.rows(), a.cols()) - a.value();
  return a.tape()->record(std::move(out), {a}, [ia](Tape<T>& t, std::size_t self) {
    t.accumulate(ia, -t.grad(self));
  });
}

/// Places column vectors into an n x m matrix: column j receives entries
/// columns[j](p) at rows rows[j][p]; every other entry is zero.
template <class T>
Var<T> scatter_columns(Eigen::Index n, const std::vector<Var<T>>& columns,
                       const std::vector<std::vector<std::size_t>>& rows) {
  detail::require(!columns.empty() && columns.size() == rows.size(), "scatter_columns: bad inputs");
  const Eigen::Index m = static_cast<Eigen::Index>(columns.size());
  Matrix<T> out = Matrix<T>::Zero(n, m);
  std::vector<std::size_t> ids;
  for (Eigen::Index j = 0; j < m; ++j) {
    const auto& col = columns[j].value();
    detail::require(col.cols() == 1 && col.rows() == static_cast<Eigen::Index>(rows[j].size()),
                    "scatter_columns: column length mismatch");
    for (std::size_t p = 0; p < rows[j].size(); ++p) out(rows[j][p], j) = col(p, 0);
    ids.push_back(columns[j].id());
  }
  return columns.front().tape()->record(std::move(out), columns, [ids, rows](Tape<T>& t, std::size_t self) {
    const Matrix<T>& g = t.grad(self);
    for (std::size_t j = 0; j < ids.size(); ++j) {
      if (!t.requires_grad(ids[j])) continue;
      Matrix<T> gc(static_cast<Eigen::Index>(rows[j].size()), 1);
      for (std::size_t p = 0; p < rows[j].size(); ++p) gc(p, 0) = g(rows[j][p], j);
      t.accumulate(ids[j], gc);
    }
  });
}

/// Multiplies by a fixed 0/1 (or rescaled) mask; used for dropout.
template <class T>
Var<T> apply_mask(const Var<T>& a, Matrix<T> mask) {
  detail::require(mask.rows() == a.rows() && mask.cols() == a.cols(), "apply_mask: shape mismatch");
  const auto ia = a.id();
  Matrix<T> out = a.value().cwiseProduct(mask);
  return a.tape()->record(std::move(out), {a}, [ia, mask = std::move(mask)](Tape<T>& t, std::size_t self) {
    t.accumulate(ia, t.grad(self).cwiseProduct(mask));
  });
}

// ---------------------------------------------------------------------------
// Attention

/// Multi-head attention weights of one query row over the rows of `keys`.
/// Head h scores q_h . k_h / sqrt(d_h) on its column slice; the per-head
/// softmax distributions are averaged, so the result still sums to 1.
template <class T>
Var<T> multihead_attention_weights(const Var<T>& query, const Var<T>& keys, int heads) {
  detail::require(query.rows() == 1 && query.cols() == keys.cols(), "attention: query/key width mismatch");
  detail::require(heads > 0 && keys.cols() % heads == 0, "attention: width not divisible by heads");
  const Eigen::Index r = keys.rows();
  const Eigen::Index dh = keys.cols() / heads;
  const T scale = T(1) / std::sqrt(T(dh));
  const Matrix<T>& q = query.value();
  const Matrix<T>& k = keys.value();
  Matrix<T> probs(heads, r);
  for (int h = 0; h < heads; ++h) {
    Matrix<T> s = (k.middleCols(h * dh, dh) * q.middleCols(h * dh, dh).transpose()).transpose() * scale;
    const T mx = s.maxCoeff();
    s = (s.array() - mx).exp().matrix();
    probs.row(h) = s / s.sum();
  }
  Matrix<T> out = probs.colwise().mean();
  const auto iq = query.id(), ik = keys.id();
  return query.tape()->record(
      std::move(out), {query, keys}, [iq, ik, probs, heads, dh, scale](Tape<T>& t, std::size_t self) {
        const Matrix<T>& g = t.grad(self);
        const Matrix<T>& q = t.value(iq);
        const Matrix<T>& k = t.value(ik);
        Matrix<T> gq = Matrix<T>::Zero(q.rows(), q.cols());
        Matrix<T> gk = Matrix<T>::Zero(k.rows(), k.cols());
        for (int h = 0; h < heads; ++h) {
          const Matrix<T> gp = g / T(heads);
          const T dot = gp.row(0).dot(probs.row(h));
          const Matrix<T> ds = (probs.row(h).array() * (gp.row(0).array() - dot)).matrix() * scale;
          gq.middleCols(h * dh, dh) += ds * k.middleCols(h * dh, dh);
          gk.middleCols(h * dh, dh) += ds.transpose() * q.middleCols(h * dh, dh);
        }
        if (t.requires_grad(iq)) t.accumulate(iq, gq);
        if (t.requires_grad(ik)) t.accumulate(ik, gk);
      });
}

/// Scaled dot-product self-attention with `heads` heads over rows; output
/// head slices are concatenated back to the model width.
template <class T>
Var<T> multihead_self_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads) {
  detail::require(q.rows() == k.rows() && k.rows() == v.rows(), "self attention: row mismatch");
  detail::require(q.cols() == k.cols() && k.cols() == v.cols(), "self attention: width mismatch");
  detail::require(heads > 0 && q.cols() % heads == 0, "self attention: width not divisible by heads");
  const Eigen::Index r = q.rows();
  const Eigen::Index dh = q.cols() / heads;
  const T scale = T(1) / std::sqrt(T(dh));
  std::vector<Matrix<T>> probs(heads);
  Matrix<T> out(r, q.cols());
  for (int h = 0; h < heads; ++h) {
    Matrix<T> s = q.value().middleCols(h * dh, dh) * k.value().middleCols(h * dh, dh).transpose() * scale;
    for (Eigen::Index i = 0; i < r; ++i) {
      const T mx = s.row(i).maxCoeff();
      s.row(i) = (s.row(i).array() - mx).exp().matrix();
      s.row(i) /= s.row(i).sum();
    }
    out.middleCols(h * dh, dh) = s * v.value().middleCols(h * dh, dh);
    probs[h] = std::move(s);
  }
  const auto iq = q.id(), ik = k.id(), iv = v.id();
  return q.tape()->record(
      std::move(out), {q, k, v}, [iq, ik, iv, probs, heads, dh, scale](Tape<T>& t, std::size_t self) {
        const Matrix<T>& g = t.grad(self);
        const Matrix<T>& qv = t.value(iq);
        const Matrix<T>& kv = t.value(ik);
        const Matrix<T>& vv = t.value(iv);
        Matrix<T> gq = Matrix<T>::Zero(qv.rows(), qv.cols());
        Matrix<T> gk = Matrix<T>::Zero(kv.rows(), kv.cols());
        Matrix<T> gv = Matrix<T>::Zero(vv.rows(), vv.cols());
        for (int h = 0; h < heads; ++h) {
          const Matrix<T>& p = probs[h];
          const Matrix<T> go = g.middleCols(h * dh, dh);
          gv.middleCols(h * dh, dh) += p.transpose() * go;
          const Matrix<T> gp = go * vv.middleCols(h * dh, dh).transpose();
          const Eigen::Matrix<T, Eigen::Dynamic, 1> rowdot = gp.cwiseProduct(p).rowwise().sum();
          const Matrix<T> gs = (p.array() * (gp.colwise() - rowdot).array()).matrix() * scale;
          gq.middleCols(h * dh, dh) += gs * kv.middleCols(h * dh, dh);
          gk.middleCols(h * dh, dh) += gs.transpose() * qv.middleCols(h * dh, dh);
        }
        if (t.requires_grad(iq)) t.accumulate(iq, gq);
        if (t.requires_grad(ik)) t.accumulate(ik, gk);
        if (t.requires_grad(iv)) t.accumulate(iv, gv);
      });
}

// ---------------------------------------------------------------------------
// Loss

/// Sum over entries with weight w > 0 of w * BCE(sigmoid(logit), target),
/// evaluated in the numerically stable logit form.
template <class T>
Var<T> weighted_bce_with_logits_sum(const Var<T>& logits, const Matrix<T>& targets, const Matrix<T>& weights) {
  detail::require(logits.rows() == targets.rows() && logits.cols() == targets.cols() &&
                      targets.rows() == weights.rows() && targets.cols() == weights.cols(),
                  "bce: shape mismatch");
  const Matrix<T>& z = logits.value();
  T total = 0;
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    const T w = weights(i);
    if (w == T(0)) continue;
    const T x = z(i);
    // max(x,0) - x*y + log(1 + exp(-|x|))
    total += w * (std::max(x, T(0)) - x * targets(i) + std::log1p(std::exp(-std::abs(x))));
  }
  const auto iz = logits.id();
  return logits.tape()->record(Matrix<T>::Constant(1, 1, total), {logits},
                               [iz, targets, weights](Tape<T>& t, std::size_t self) {
                                 const T up = t.grad(self)(0, 0);
                                 const Matrix<T>& z = t.value(iz);
                                 Matrix<T> g(z.rows(), z.cols());
                                 for (Eigen::Index i = 0; i < z.size(); ++i)
                                   g(i) = up * weights(i) * (detail::sigmoid(z(i)) - targets(i));
                                 t.accumulate(iz, g);
                               });
}

}  // namespace ad
}  // namespace tdhnode
