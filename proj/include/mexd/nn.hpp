#pragma once
// Layers, parameter bookkeeping and first-order optimisers built on the
// autograd tape.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mexd/autograd.hpp"
#include "mexd/rng.hpp"

namespace mexd::nn {

using ag::Graph;
using ag::Matrix;
using ag::Parameter;
using ag::Var;

template <class S>
using ParamList = std::vector<Parameter<S>*>;

template <class S>
Parameter<S> make_param(std::string name, Eigen::Index rows, Eigen::Index cols) {
  Parameter<S> p{std::move(name), Matrix<S>::Zero(rows, cols), Matrix<S>::Zero(rows, cols)};
  return p;
}

// Glorot/Xavier uniform fill.
template <class S>
void xavier_uniform(Matrix<S>& m, Rng& rng, double gain = 1.0) {
  const double limit = gain * std::sqrt(6.0 / static_cast<double>(m.rows() + m.cols()));
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(dist(rng));
}

// y = x W + b, with W stored in x out.
template <class S>
struct Linear {
  Parameter<S> weight;
  Parameter<S> bias;

  Linear() = default;
  Linear(const std::string& name, Eigen::Index in, Eigen::Index out)
      : weight(make_param<S>(name + ".weight", in, out)),
        bias(make_param<S>(name + ".bias", 1, out)) {}

  Eigen::Index in_features() const { return weight.value.rows(); }
  Eigen::Index out_features() const { return weight.value.cols(); }

  void init_xavier(Rng& rng, double gain = 1.0) {
    xavier_uniform(weight.value, rng, gain);
    bias.value.setZero();
  }
  void init_zero() {
    weight.value.setZero();
    bias.value.setZero();
  }

  Var<S> operator()(Graph<S>& g, Var<S> x) {
    if (x.cols() != in_features()) {
      throw ShapeError("linear '" + weight.name + "': input width " + std::to_string(x.cols()) +
                       " != " + std::to_string(in_features()));
    }
    return ag::add(ag::matmul(x, g.param(weight)), g.param(bias));
  }

  void collect(ParamList<S>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }
};

template <class S>
struct LayerNorm {
  Parameter<S> gamma;
  Parameter<S> beta;

  LayerNorm() = default;
  LayerNorm(const std::string& name, Eigen::Index width)
      : gamma(make_param<S>(name + ".gamma", 1, width)),
        beta(make_param<S>(name + ".beta", 1, width)) {
    gamma.value.setOnes();
  }

  Var<S> operator()(Graph<S>& g, Var<S> x) {
    return ag::layer_norm_rows(x, g.param(gamma), g.param(beta));
  }

  void collect(ParamList<S>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
  }
};

template <class S>
void zero_grads(const ParamList<S>& params) {
  for (auto* p : params) p->zero_grad();
}

template <class S>
double grad_norm(const ParamList<S>& params) {
  double sq = 0.0;
  for (const auto* p : params) {
    if (p->grad.size() == p->value.size()) sq += static_cast<double>(p->grad.squaredNorm());
  }
  return std::sqrt(sq);
}

// Rescales all gradients so their global L2 norm is at most max_norm.
// Returns the norm before clipping.
template <class S>
double clip_grad_norm(const ParamList<S>& params, double max_norm) {
  const double norm = grad_norm(params);
  if (max_norm > 0.0 && norm > max_norm) {
    const S factor = static_cast<S>(max_norm / (norm + 1e-12));
    for (auto* p : params) p->grad *= factor;
  }
  return norm;
}

// FNV-1a over the raw bytes of every parameter value, in list order.
template <class S>
std::uint64_t hash_params(const ParamList<S>& params) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto* p : params) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(p->value.data());
    const std::size_t n = static_cast<std::size_t>(p->value.size()) * sizeof(S);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  }
  return h;
}

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // L2 penalty added to the gradient
  bool rectified = false;     // RAdam variance rectification
};

// Adam / RAdam. The learning rate is passed to every step so the caller owns
// the schedule.
template <class S>
class Adam {
 public:
  Adam(ParamList<S> params, AdamOptions options) : params_(std::move(params)), opt_(options) {
    for (auto* p : params_) {
      m_.push_back(Matrix<S>::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(Matrix<S>::Zero(p->value.rows(), p->value.cols()));
    }
  }

  void step(double lr) {
    ++t_;
    const double b1 = opt_.beta1;
    const double b2 = opt_.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    const double rho_inf = 2.0 / (1.0 - b2) - 1.0;
    const double rho_t = rho_inf - 2.0 * static_cast<double>(t_) * std::pow(b2, static_cast<double>(t_)) / bc2;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Parameter<S>& p = *params_[i];
      if (p.grad.size() != p.value.size()) continue;
      Matrix<S> g = p.grad;
      if (opt_.weight_decay != 0.0) g += p.value * static_cast<S>(opt_.weight_decay);
      m_[i] = m_[i] * static_cast<S>(b1) + g * static_cast<S>(1.0 - b1);
      v_[i] = v_[i] * static_cast<S>(b2) + g.cwiseProduct(g) * static_cast<S>(1.0 - b2);
      const Matrix<S> m_hat = m_[i] / static_cast<S>(bc1);
      if (!opt_.rectified) {
        const auto denom = (v_[i].array() / static_cast<S>(bc2)).sqrt() + static_cast<S>(opt_.eps);
        p.value.array() -= static_cast<S>(lr) * m_hat.array() / denom;
      } else if (rho_t > 5.0) {
        const double r = std::sqrt((rho_t - 4.0) * (rho_t - 2.0) * rho_inf /
                                   ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t));
        const auto denom = (v_[i].array() / static_cast<S>(bc2)).sqrt() + static_cast<S>(opt_.eps);
        p.value.array() -= static_cast<S>(lr * r) * m_hat.array() / denom;
      } else {
        p.value.array() -= static_cast<S>(lr) * m_hat.array();
      }
    }
  }

  const ParamList<S>& params() const { return params_; }

 private:
  ParamList<S> params_;
  AdamOptions opt_;
  std::vector<Matrix<S>> m_;
  std::vector<Matrix<S>> v_;
  std::int64_t t_ = 0;
};

}  // namespace mexd::nn
