#include <doctest.h>

#include "mexd/autograd.hpp"
#include "mexd/nn.hpp"
#include "mexd/rng.hpp"
#include "support.hpp"

using namespace mexd;
using mexd::testing::finite_difference_check;

namespace {

ag::Parameter<double> random_param(const std::string& name, int rows, int cols, Rng& rng) {
  auto p = nn::make_param<double>(name, rows, cols);
  std::normal_distribution<double> d(0.0, 1.0);
  for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = d(rng);
  return p;
}

// Fixed random projection to a scalar so every output entry gets a distinct
// upstream gradient.
ag::Var<double> project(ag::Graph<double>& g, ag::Var<double> y, std::uint64_t salt) {
  Rng rng = make_rng(RngSeed{salt});
  ag::Matrix<double> w(y.rows(), y.cols());
  std::normal_distribution<double> d(0.0, 1.0);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = d(rng);
  return ag::sum_all(ag::hadamard(y, g.constant(w)));
}

}  // namespace

TEST_SUITE("autograd") {
  TEST_CASE("elementwise and matrix ops") {
    Rng rng = make_rng(RngSeed{1});
    auto a = random_param("a", 4, 3, rng);
    auto b = random_param("b", 3, 5, rng);
    auto c = random_param("c", 1, 5, rng);
    auto d = random_param("d", 4, 5, rng);
    auto w = random_param("w", 4, 1, rng);
    auto s = random_param("s", 1, 1, rng);
    nn::ParamList<double> ps{&a, &b, &c, &d, &w, &s};
    auto res = finite_difference_check(ps, [&](ag::Graph<double>& g) {
      auto y = ag::add(ag::matmul(g.param(a), g.param(b)), g.param(c));
      y = ag::hadamard(ag::tanh(y), ag::sigmoid(g.param(d)));
      y = ag::sub(ag::scale(y, 1.7), ag::softplus(g.param(d)));
      y = ag::scale_rows(ag::gelu(y), g.param(w));
      y = ag::mul_scalar(y, g.param(s));
      return project(g, y, 11);
    });
    CHECK(res.checked == 6);
    CHECK(res.max_rel_error < 1e-6);
  }

  TEST_CASE("matmul_nt, softmax, layer norm and reductions") {
    Rng rng = make_rng(RngSeed{2});
    auto a = random_param("a", 5, 4, rng);
    auto b = random_param("b", 3, 4, rng);
    auto gamma = random_param("gamma", 1, 3, rng);
    auto beta = random_param("beta", 1, 3, rng);
    nn::ParamList<double> ps{&a, &b, &gamma, &beta};
    auto res = finite_difference_check(ps, [&](ag::Graph<double>& g) {
      auto y = ag::matmul_nt(g.param(a), g.param(b));
      y = ag::layer_norm_rows(y, g.param(gamma), g.param(beta));
      auto p = ag::softmax_rows(y);
      auto m = ag::add(ag::mean_rows(p), ag::max_rows(y));
      return ag::add(project(g, m, 12), ag::squared_norm(ag::element(y, 2, 1)));
    });
    CHECK(res.checked == 4);
    CHECK(res.max_rel_error < 1e-6);
  }

  TEST_CASE("gather, concat, slice and depthwise conv") {
    Rng rng = make_rng(RngSeed{3});
    auto x = random_param("x", 6, 4, rng);
    auto y = random_param("y", 2, 4, rng);
    auto k = random_param("k", 3, 4, rng);
    auto kb = random_param("kb", 1, 4, rng);
    nn::ParamList<double> ps{&x, &y, &k, &kb};
    auto res = finite_difference_check(ps, [&](ag::Graph<double>& g) {
      auto rows = ag::gather_rows(g.param(x), {4, 1, 1, 5});
      auto cat = ag::concat_rows<double>({rows, g.param(y)});
      auto conv = ag::depthwise_conv3(cat, g.param(k), g.param(kb));
      auto wide = ag::concat_cols<double>({conv, ag::slice_cols(cat, 1, 2)});
      return project(g, wide, 13);
    });
    CHECK(res.checked == 4);
    CHECK(res.max_rel_error < 1e-6);
  }

  TEST_CASE("cross entropy") {
    Rng rng = make_rng(RngSeed{4});
    auto logits = random_param("logits", 1, 3, rng);
    nn::ParamList<double> ps{&logits};
    ag::Matrix<double> target = ag::Matrix<double>::Zero(1, 3);
    target(0, 2) = 1.0;
    auto res = finite_difference_check(ps, [&](ag::Graph<double>& g) {
      return ag::cross_entropy(target, ag::softmax_rows(g.param(logits)));
    });
    CHECK(res.max_rel_error < 1e-6);
    ag::Graph<double> g;
    auto q = g.constant(ag::Matrix<double>::Constant(1, 3, 1.0 / 3.0));
    CHECK(ag::cross_entropy(target, q).scalar() == doctest::Approx(std::log(3.0)));
  }

  TEST_CASE("gradients accumulate across uses") {
    auto p = nn::make_param<double>("p", 1, 1);
    p.value(0, 0) = 3.0;
    ag::Graph<double> g;
    auto v = g.param(p);
    g.backward(ag::hadamard(v, v));
    CHECK(p.grad(0, 0) == doctest::Approx(6.0));
  }

  TEST_CASE("shape errors") {
    ag::Graph<double> g;
    auto a = g.constant(ag::Matrix<double>::Zero(2, 3));
    auto b = g.constant(ag::Matrix<double>::Zero(2, 3));
    CHECK_THROWS_AS(ag::matmul(a, b), ShapeError);
    CHECK_THROWS_AS(ag::hadamard(a, g.constant(ag::Matrix<double>::Zero(3, 2))), ShapeError);
  }

  TEST_CASE("gradient clipping and parameter hash") {
    auto p = nn::make_param<double>("p", 1, 2);
    p.grad << 3.0, 4.0;
    nn::ParamList<double> ps{&p};
    CHECK(nn::grad_norm(ps) == doctest::Approx(5.0));
    nn::clip_grad_norm(ps, 1.0);
    CHECK(nn::grad_norm(ps) == doctest::Approx(1.0));
    const auto h = nn::hash_params(ps);
    p.value(0, 1) = 1e-9;
    CHECK(nn::hash_params(ps) != h);
  }
}
