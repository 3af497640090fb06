#pragma once
// Helpers shared by the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "mexd/autograd.hpp"
#include "mexd/nn.hpp"

namespace mexd::testing {

struct GradCheck {
  double max_rel_error = 0.0;
  std::string worst;  // tensor with the largest error
  std::size_t checked = 0;
  std::vector<std::string> names;  // tensors with a non-vanishing gradient
};

// Central finite differences against reverse-mode gradients. `build` records
// the scalar loss on the graph it is given. Errors are measured per tensor
// as ||analytic - numeric|| / max(||analytic||, ||numeric||); tensors
// whose both gradients vanish (norms below 1e-8, the finite-difference roundoff level) are skipped.
template <class Build>
GradCheck finite_difference_check(const nn::ParamList<double>& params, Build build, double h = 1e-6) {
  nn::zero_grads(params);
  {
    ag::Graph<double> g;
    g.backward(build(g));
  }
  GradCheck out;
  for (auto* p : params) {
    const ag::Matrix<double> analytic = p->grad;
    ag::Matrix<double> numeric(p->value.rows(), p->value.cols());
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      double& w = p->value.data()[i];
      const double keep = w;
      w = keep + h;
      double up;
      {
        ag::Graph<double> g;
        up = build(g).scalar();
      }
      w = keep - h;
      double down;
      {
        ag::Graph<double> g;
        down = build(g).scalar();
      }
      w = keep;
      numeric.data()[i] = (up - down) / (2.0 * h);
    }
    const double na = analytic.norm();
    const double nn_ = numeric.norm();
    if (na < 1e-8 && nn_ < 1e-8) continue;
    const double rel = (analytic - numeric).norm() / std::max(na, nn_);
    ++out.checked;
    out.names.push_back(p->name);
    if (rel > out.max_rel_error) {
      out.max_rel_error = rel;
      out.worst = p->name;
    }
  }
  return out;
}

}  // namespace mexd::testing
