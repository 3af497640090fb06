#pragma once
// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. A Graph records every operation applied to its Vars; calling
// backward() on a 1x1 result propagates gradients to every leaf that
// requires them and accumulates them into bound Parameters.
//
// The scalar type is a template argument so that the same model code runs in
// float for training and in double for finite-difference gradient checks.

#include <algorithm>
#include <cmath>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numbers>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "mexd/core_types.hpp"

namespace mexd::ag {

template <class S>
using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class S>
struct Parameter {
  std::string name;
  Matrix<S> value;
  Matrix<S> grad;

  void zero_grad() { grad = Matrix<S>::Zero(value.rows(), value.cols()); }
};

template <class S>
class Graph;

template <class S>
struct Var {
  Graph<S>* graph = nullptr;
  int id = -1;

  const Matrix<S>& value() const { return graph->value(*this); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  S scalar() const { return value()(0, 0); }
};

template <class S>
class Graph {
 public:
  using Mat = Matrix<S>;
  using Backward = std::function<void(Graph&, const Mat&)>;

  Graph() { nodes_.reserve(256); }
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<S> constant(Mat v) { return push(std::move(v), false, {}); }
  Var<S> variable(Mat v) { return push(std::move(v), true, {}); }

  // Leaf bound to a parameter; gradients flow back into p.grad on backward().
  // Repeated calls with the same parameter return the same Var.
  Var<S> param(Parameter<S>& p) {
    auto it = bound_.find(&p);
    if (it != bound_.end()) return Var<S>{this, it->second};
    Var<S> v = push(p.value, true, {});
    bound_.emplace(&p, v.id);
    return v;
  }

  const Mat& value(Var<S> v) const { return nodes_[v.id].value; }
  bool needs_grad(Var<S> v) const { return nodes_[v.id].needs_grad; }

  // Gradient of the last backward() root with respect to v (zero if unused).
  Mat grad(Var<S> v) const {
    const Node& n = nodes_[v.id];
    if (n.has_grad) return n.grad;
    return Mat::Zero(n.value.rows(), n.value.cols());
  }

  // Records an operation. `fn` receives the output gradient and must call
  // accumulate() for each input that needs a gradient.
  Var<S> record(Mat value, std::initializer_list<Var<S>> inputs, Backward fn) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || nodes_[in.id].needs_grad;
    return push(std::move(value), needs, needs ? std::move(fn) : Backward{});
  }
  Var<S> record(Mat value, const std::vector<Var<S>>& inputs, Backward fn) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || nodes_[in.id].needs_grad;
    return push(std::move(value), needs, needs ? std::move(fn) : Backward{});
  }

  template <class Expr>
  void accumulate(Var<S> v, const Expr& g) {
    Node& n = nodes_[v.id];
    if (!n.needs_grad) return;
    if (!n.has_grad) {
      n.grad = g;
      n.has_grad = true;
    } else {
      n.grad += g;
    }
  }

  // Back-propagates from a 1x1 root and adds leaf gradients into every bound
  // parameter's grad (allocating it when empty).
  void backward(Var<S> root) {
    if (value(root).size() != 1) throw ShapeError("backward() needs a scalar root");
    for (auto& n : nodes_) n.has_grad = false;
    accumulate(root, Mat::Ones(1, 1));
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.has_grad || !n.backward) continue;
      const Mat g = n.grad;
      n.backward(*this, g);
    }
    for (auto& [p, id] : bound_) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (!n.has_grad) continue;
      if (p->grad.rows() != n.grad.rows() || p->grad.cols() != n.grad.cols()) {
        p->grad = n.grad;
      } else {
        p->grad += n.grad;
      }
    }
  }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool needs_grad = false;
    bool has_grad = false;
    Backward backward;
  };

  Var<S> push(Mat value, bool needs, Backward fn) {
    nodes_.push_back(Node{std::move(value), Mat(), needs, false, std::move(fn)});
    return Var<S>{this, static_cast<int>(nodes_.size() - 1)};
  }

  std::vector<Node> nodes_;
  std::unordered_map<Parameter<S>*, int> bound_;
};

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

namespace detail {
template <class S>
void require(bool ok, const char* what) {
  if (!ok) throw ShapeError(what);
}
}  // namespace detail

template <class S>
Var<S> matmul(Var<S> a, Var<S> b) {
  detail::require<S>(a.cols() == b.rows(), "matmul: inner dimensions differ");
  Matrix<S> y;
  y.noalias() = a.value() * b.value();
  return a.graph->record(std::move(y), {a, b}, [a, b](Graph<S>& g, const Matrix<S>& gy) {
    if (g.needs_grad(a)) g.accumulate(a, gy * b.value().transpose());
    if (g.needs_grad(b)) g.accumulate(b, a.value().transpose() * gy);
  });
}

// a * b^T
template <class S>
Var<S> matmul_nt(Var<S> a, Var<S> b) {
  detail::require<S>(a.cols() == b.cols(), "matmul_nt: widths differ");
  Matrix<S> y;
  y.noalias() = a.value() * b.value().transpose();
  return a.graph->record(std::move(y), {a, b}, [a, b](Graph<S>& g, const Matrix<S>& gy) {
    if (g.needs_grad(a)) g.accumulate(a, gy * b.value());
    if (g.needs_grad(b)) g.accumulate(b, gy.transpose() * a.value());
  });
}

// Elementwise sum. `b` may also be a 1 x cols row broadcast over a's rows.
template <class S>
Var<S> add(Var<S> a, Var<S> b) {
  if (a.rows() == b.rows() && a.cols() == b.cols()) {
    Matrix<S> y = a.value() + b.value();
    return a.graph->record(std::move(y), {a, b}, [a, b](Graph<S>& g, const Matrix<S>& gy) {
      g.accumulate(a, gy);
      g.accumulate(b, gy);
    });
  }
  detail::require<S>(b.rows() == 1 && b.cols() == a.cols(), "add: incompatible shapes");
  Matrix<S> y = a.value().rowwise() + b.value().row(0);
  return a.graph->record(std::move(y), {a, b}, [a, b](Graph<S>& g, const Matrix<S>& gy) {
    g.accumulate(a, gy);
    if (g.needs_grad(b)) g.accumulate(b, gy.colwise().sum());
  });
}

template <class S>
Var<S> sub(Var<S> a, Var<S> b) {
  detail::require<S>(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shapes differ");
  Matrix<S> y = a.value() - b.value();
  return a.graph->record(std::move(y), {a, b}, [a, b](Graph<S>& g, const Matrix<S>& gy) {
    g.accumulate(a, gy);
    if (g.needs_grad(b)) g.accumulate(b, -gy);
  });
}

template <class S>
Var<S> hadamard(Var<S> a, Var<S> b) {
  detail::require<S>(a.rows() == b.rows() && a.cols() == b.cols(), "hadamard: shapes differ");
  Matrix<S> y = a.value().cwiseProduct(b.value());
  return a.graph->record(std::move(y), {a, b}, [a, b](Graph<S>& g, const Matrix<S>& gy) {
    if (g.needs_grad(a)) g.accumulate(a, gy.cwiseProduct(b.value()));
    if (g.needs_grad(b)) g.accumulate(b, gy.cwiseProduct(a.value()));
  });
}

template <class S>
Var<S> scale(Var<S> a, S c) {
  Matrix<S> y = a.value() * c;
  return a.graph->record(std::move(y), {a},
                         [a, c](Graph<S>& g, const Matrix<S>& gy) { g.accumulate(a, gy * c); });
}

// a * s for a 1x1 Var s.
template <class S>
Var<S> mul_scalar(Var<S> a, Var<S> s) {
  detail::require<S>(s.rows() == 1 && s.cols() == 1, "mul_scalar: s must be 1x1");
  Matrix<S> y = a.value() * s.scalar();
  return a.graph->record(std::move(y), {a, s}, [a, s](Graph<S>& g, const Matrix<S>& gy) {
    if (g.needs_grad(a)) g.accumulate(a, gy * s.scalar());
    if (g.needs_grad(s)) {
      Matrix<S> gs(1, 1);
      gs(0, 0) = gy.cwiseProduct(a.value()).sum();
      g.accumulate(s, gs);
    }
  });
}

// Row i of a scaled by w(i) for an N x 1 column w.
template <class S>
Var<S> scale_rows(Var<S> a, Var<S> w) {
  detail::require<S>(w.cols() == 1 && w.rows() == a.rows(), "scale_rows: w must be N x 1");
  Matrix<S> y = a.value().array().colwise() * w.value().col(0).array();
  return a.graph->record(std::move(y), {a, w}, [a, w](Graph<S>& g, const Matrix<S>& gy) {
    if (g.needs_grad(a)) {
      Matrix<S> ga = gy.array().colwise() * w.value().col(0).array();
      g.accumulate(a, ga);
    }
    if (g.needs_grad(w)) {
      Matrix<S> gw = gy.cwiseProduct(a.value()).rowwise().sum();
      g.accumulate(w, gw);
    }
  });
}

// Elementwise map with a derivative expressed in terms of the input value.
template <class S, class F, class DF>
Var<S> unary(Var<S> a, F f, DF df) {
  Matrix<S> y = a.value().unaryExpr(f);
  return a.graph->record(std::move(y), {a}, [a, df](Graph<S>& g, const Matrix<S>& gy) {
    g.accumulate(a, gy.cwiseProduct(a.value().unaryExpr(df)));
  });
}

// tanh-approximated GELU.
template <class S>
Var<S> gelu(Var<S> a) {
  constexpr S k = S(0.7978845608028654);  // sqrt(2/pi)
  constexpr S c = S(0.044715);
  auto f = [](S x) {
    const S u = k * (x + c * x * x * x);
    return S(0.5) * x * (S(1) + std::tanh(u));
  };
  auto df = [](S x) {
    const S u = k * (x + c * x * x * x);
    const S t = std::tanh(u);
    const S du = k * (S(1) + S(3) * c * x * x);
    return S(0.5) * (S(1) + t) + S(0.5) * x * (S(1) - t * t) * du;
  };
  return unary(a, f, df);
}

template <class S>
Var<S> softplus(Var<S> a) {
  auto f = [](S x) { return x > S(20) ? x : std::log1p(std::exp(x)); };
  auto df = [](S x) { return S(1) / (S(1) + std::exp(-x)); };
  return unary(a, f, df);
}

template <class S>
Var<S> tanh(Var<S> a) {
  auto f = [](S x) { return std::tanh(x); };
  auto df = [](S x) {
    const S t = std::tanh(x);
    return S(1) - t * t;
  };
  return unary(a, f, df);
}

template <class S>
Var<S> sigmoid(Var<S> a) {
  auto f = [](S x) { return S(1) / (S(1) + std::exp(-x)); };
  auto df = [](S x) {
    const S s = S(1) / (S(1) + std::exp(-x));
    return s * (S(1) - s);
  };
  return unary(a, f, df);
}

template <class S>
Matrix<S> softmax_rows_value(const Matrix<S>& x) {
  Matrix<S> y = x.colwise() - x.rowwise().maxCoeff();
  y = y.array().exp();
  y.array().colwise() /= y.rowwise().sum().array();
  return y;
}

template <class S>
Var<S> softmax_rows(Var<S> a) {
  Matrix<S> y = softmax_rows_value<S>(a.value());
  auto yv = std::make_shared<Matrix<S>>(y);
  return a.graph->record(std::move(y), {a}, [a, yv](Graph<S>& g, const Matrix<S>& gy) {
    const Matrix<S>& s = *yv;
    Eigen::Matrix<S, Eigen::Dynamic, 1> dots = gy.cwiseProduct(s).rowwise().sum();
    Matrix<S> ga = s.cwiseProduct(gy.colwise() - dots);
    g.accumulate(a, ga);
  });
}

// -sum_i target_i * log(max(q_i, floor)) for a constant target row and a
// probability row q. Entries clamped at the floor pass no gradient.
template <class S>
Var<S> cross_entropy(const Matrix<S>& target, Var<S> q, S floor = S(1e-12)) {
  detail::require<S>(target.rows() == q.rows() && target.cols() == q.cols(),
                     "cross_entropy: shapes differ");
  S loss = 0;
  for (Eigen::Index i = 0; i < q.value().size(); ++i) {
    const S t = target.data()[i];
    if (t != S(0)) loss -= t * std::log(std::max(q.value().data()[i], floor));
  }
  Matrix<S> y(1, 1);
  y(0, 0) = loss;
  return q.graph->record(std::move(y), {q}, [q, target, floor](Graph<S>& g, const Matrix<S>& gy) {
    Matrix<S> gq = Matrix<S>::Zero(q.rows(), q.cols());
    for (Eigen::Index i = 0; i < gq.size(); ++i) {
      const S v = q.value().data()[i];
      if (v > floor) gq.data()[i] = -target.data()[i] / v * gy(0, 0);
    }
    g.accumulate(q, gq);
  });
}

// Row-wise layer normalisation with affine 1 x C gamma/beta.
template <class S>
Var<S> layer_norm_rows(Var<S> x, Var<S> gamma, Var<S> beta, S eps = S(1e-5)) {
  const Eigen::Index n = x.rows();
  const Eigen::Index c = x.cols();
  detail::require<S>(gamma.cols() == c && beta.cols() == c, "layer_norm: width mismatch");
  auto xhat = std::make_shared<Matrix<S>>(n, c);
  auto inv_std = std::make_shared<Eigen::Matrix<S, Eigen::Dynamic, 1>>(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto row = x.value().row(i);
    const S mu = row.mean();
    const S var = (row.array() - mu).square().mean();
    const S is = S(1) / std::sqrt(var + eps);
    (*inv_std)(i) = is;
    xhat->row(i) = (row.array() - mu) * is;
  }
  Matrix<S> y = (xhat->array().rowwise() * gamma.value().row(0).array()).rowwise() +
                beta.value().row(0).array();
  return x.graph->record(
      std::move(y), {x, gamma, beta}, [x, gamma, beta, xhat, inv_std, c](Graph<S>& g,
                                                                         const Matrix<S>& gy) {
        if (g.needs_grad(gamma)) g.accumulate(gamma, gy.cwiseProduct(*xhat).colwise().sum());
        if (g.needs_grad(beta)) g.accumulate(beta, gy.colwise().sum());
        if (g.needs_grad(x)) {
          Matrix<S> gxh = gy.array().rowwise() * gamma.value().row(0).array();
          Matrix<S> gx(gxh.rows(), c);
          for (Eigen::Index i = 0; i < gxh.rows(); ++i) {
            const S m1 = gxh.row(i).mean();
            const S m2 = gxh.row(i).cwiseProduct(xhat->row(i)).mean();
            gx.row(i) = (*inv_std)(i) * (gxh.row(i).array() - m1 - xhat->row(i).array() * m2);
          }
          g.accumulate(x, gx);
        }
      });
}

template <class S>
Var<S> gather_rows(Var<S> a, std::vector<int> idx) {
  Matrix<S> y(static_cast<Eigen::Index>(idx.size()), a.cols());
  for (std::size_t j = 0; j < idx.size(); ++j) {
    detail::require<S>(idx[j] >= 0 && idx[j] < a.rows(), "gather_rows: index out of range");
    y.row(static_cast<Eigen::Index>(j)) = a.value().row(idx[j]);
  }
  return a.graph->record(std::move(y), {a},
                         [a, idx = std::move(idx)](Graph<S>& g, const Matrix<S>& gy) {
                           Matrix<S> ga = Matrix<S>::Zero(a.rows(), a.cols());
                           for (std::size_t j = 0; j < idx.size(); ++j) {
                             ga.row(idx[j]) += gy.row(static_cast<Eigen::Index>(j));
                           }
                           g.accumulate(a, ga);
                         });
}

template <class S>
Var<S> concat_rows(const std::vector<Var<S>>& parts) {
  detail::require<S>(!parts.empty(), "concat_rows: no inputs");
  const Eigen::Index c = parts.front().cols();
  Eigen::Index n = 0;
  for (const auto& p : parts) {
    detail::require<S>(p.cols() == c, "concat_rows: widths differ");
    n += p.rows();
  }
  Matrix<S> y(n, c);
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    y.middleRows(off, p.rows()) = p.value();
    off += p.rows();
  }
  return parts.front().graph->record(std::move(y), parts,
                                     [parts](Graph<S>& g, const Matrix<S>& gy) {
                                       Eigen::Index o = 0;
                                       for (const auto& p : parts) {
                                         if (g.needs_grad(p)) {
                                           g.accumulate(p, gy.middleRows(o, p.rows()));
                                         }
                                         o += p.rows();
                                       }
                                     });
}

template <class S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
  detail::require<S>(!parts.empty(), "concat_cols: no inputs");
  const Eigen::Index n = parts.front().rows();
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    detail::require<S>(p.rows() == n, "concat_cols: heights differ");
    c += p.cols();
  }
  Matrix<S> y(n, c);
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    y.middleCols(off, p.cols()) = p.value();
    off += p.cols();
  }
  return parts.front().graph->record(std::move(y), parts,
                                     [parts](Graph<S>& g, const Matrix<S>& gy) {
                                       Eigen::Index o = 0;
                                       for (const auto& p : parts) {
                                         if (g.needs_grad(p)) {
                                           g.accumulate(p, gy.middleCols(o, p.cols()));
                                         }
                                         o += p.cols();
                                       }
                                     });
}

template <class S>
Var<S> slice_cols(Var<S> a, Eigen::Index start, Eigen::Index count) {
  detail::require<S>(start >= 0 && start + count <= a.cols(), "slice_cols: out of range");
  Matrix<S> y = a.value().middleCols(start, count);
  return a.graph->record(std::move(y), {a}, [a, start, count](Graph<S>& g, const Matrix<S>& gy) {
    Matrix<S> ga = Matrix<S>::Zero(a.rows(), a.cols());
    ga.middleCols(start, count) = gy;
    g.accumulate(a, ga);
  });
}

// Column-wise mean over rows: N x C -> 1 x C.
template <class S>
Var<S> mean_rows(Var<S> a) {
  detail::require<S>(a.rows() > 0, "mean_rows: empty input");
  Matrix<S> y = a.value().colwise().mean();
  const S inv = S(1) / static_cast<S>(a.rows());
  return a.graph->record(std::move(y), {a}, [a, inv](Graph<S>& g, const Matrix<S>& gy) {
    Matrix<S> ga = gy.replicate(a.rows(), 1) * inv;
    g.accumulate(a, ga);
  });
}

// Column-wise max over rows (first maximiser receives the gradient).
template <class S>
Var<S> max_rows(Var<S> a) {
  detail::require<S>(a.rows() > 0, "max_rows: empty input");
  std::vector<Eigen::Index> arg(static_cast<std::size_t>(a.cols()));
  Matrix<S> y(1, a.cols());
  for (Eigen::Index j = 0; j < a.cols(); ++j) {
    Eigen::Index r = 0;
    y(0, j) = a.value().col(j).maxCoeff(&r);
    arg[static_cast<std::size_t>(j)] = r;
  }
  return a.graph->record(std::move(y), {a}, [a, arg](Graph<S>& g, const Matrix<S>& gy) {
    Matrix<S> ga = Matrix<S>::Zero(a.rows(), a.cols());
    for (Eigen::Index j = 0; j < a.cols(); ++j) ga(arg[static_cast<std::size_t>(j)], j) = gy(0, j);
    g.accumulate(a, ga);
  });
}

template <class S>
Var<S> sum_all(Var<S> a) {
  Matrix<S> y(1, 1);
  y(0, 0) = a.value().sum();
  return a.graph->record(std::move(y), {a}, [a](Graph<S>& g, const Matrix<S>& gy) {
    g.accumulate(a, Matrix<S>::Constant(a.rows(), a.cols(), gy(0, 0)));
  });
}

template <class S>
Var<S> squared_norm(Var<S> a) {
  Matrix<S> y(1, 1);
  y(0, 0) = a.value().squaredNorm();
  return a.graph->record(std::move(y), {a}, [a](Graph<S>& g, const Matrix<S>& gy) {
    g.accumulate(a, a.value() * (S(2) * gy(0, 0)));
  });
}

template <class S>
Var<S> element(Var<S> a, Eigen::Index r, Eigen::Index c) {
  Matrix<S> y(1, 1);
  y(0, 0) = a.value()(r, c);
  return a.graph->record(std::move(y), {a}, [a, r, c](Graph<S>& g, const Matrix<S>& gy) {
    Matrix<S> ga = Matrix<S>::Zero(a.rows(), a.cols());
    ga(r, c) = gy(0, 0);
    g.accumulate(a, ga);
  });
}

// Depthwise convolution of width 3 along the row (sequence) axis with zero
// padding at both ends: y[i,c] = b[c] + sum_k w[k,c] * x[i+k-1,c].
template <class S>
Var<S> depthwise_conv3(Var<S> x, Var<S> w, Var<S> b) {
  const Eigen::Index n = x.rows();
  const Eigen::Index c = x.cols();
  detail::require<S>(w.rows() == 3 && w.cols() == c && b.cols() == c,
                     "depthwise_conv3: parameter shape mismatch");
  const Matrix<S>& xv = x.value();
  const Matrix<S>& wv = w.value();
  Matrix<S> y = Matrix<S>::Zero(n, c);
  y.rowwise() += b.value().row(0);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int k = 0; k < 3; ++k) {
      const Eigen::Index src = i + k - 1;
      if (src < 0 || src >= n) continue;
      y.row(i).array() += wv.row(k).array() * xv.row(src).array();
    }
  }
  return x.graph->record(std::move(y), {x, w, b}, [x, w, b, n, c](Graph<S>& g,
                                                                   const Matrix<S>& gy) {
    const Matrix<S>& xv2 = x.value();
    const Matrix<S>& wv2 = w.value();
    if (g.needs_grad(b)) g.accumulate(b, gy.colwise().sum());
    Matrix<S> gx = Matrix<S>::Zero(n, c);
    Matrix<S> gw = Matrix<S>::Zero(3, c);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (int k = 0; k < 3; ++k) {
        const Eigen::Index src = i + k - 1;
        if (src < 0 || src >= n) continue;
        gx.row(src).array() += wv2.row(k).array() * gy.row(i).array();
        gw.row(k).array() += xv2.row(src).array() * gy.row(i).array();
      }
    }
    if (g.needs_grad(x)) g.accumulate(x, gx);
    if (g.needs_grad(w)) g.accumulate(w, gw);
  });
}

}  // namespace mexd::ag
