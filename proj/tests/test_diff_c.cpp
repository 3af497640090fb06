#include <doctest.h>

#include <cmath>

#include "mexd/diff_c.hpp"
#include "mexd/rng.hpp"
#include "support.hpp"

using namespace mexd;

namespace {

RowD normal_row(Rng& rng, int k) {
  RowD v(k);
  for (int i = 0; i < k; ++i) v(i) = standard_normal(rng);
  return v;
}

// Posterior of f_s given (f_t, f0, rho) by Gaussian conjugacy: the prior
// f_s ~ N(sqrt(ab_s) f0 + (1 - sqrt(ab_s)) rho, 1 - ab_s) and the likelihood
// f_t | f_s ~ N(sqrt(a) f_s + (1 - sqrt(a)) rho, 1 - a), a = ab_t / ab_s.
struct Oracle {
  double mean;
  double var;
};

Oracle bayes_posterior(const NoiseSchedule& sched, int t, int s, double f0, double ft, double rho) {
  const double ab_t = sched.alpha_bar[static_cast<std::size_t>(t)];
  const double ab_s = sched.alpha_bar[static_cast<std::size_t>(s)];
  const double a = ab_t / ab_s;
  const double prior_mean = std::sqrt(ab_s) * f0 + (1.0 - std::sqrt(ab_s)) * rho;
  const double prior_var = 1.0 - ab_s;
  if (prior_var == 0.0) return {prior_mean, 0.0};
  const double lik_var = 1.0 - a;
  const double precision = 1.0 / prior_var + a / lik_var;
  const double mean =
      (prior_mean / prior_var + std::sqrt(a) * (ft - (1.0 - std::sqrt(a)) * rho) / lik_var) / precision;
  return {mean, 1.0 / precision};
}

struct Moments {
  double mean = 0.0;
  double var = 0.0;
};

Moments moments(const std::vector<double>& x) {
  Moments m;
  for (double v : x) m.mean += v;
  m.mean /= static_cast<double>(x.size());
  for (double v : x) m.var += (v - m.mean) * (v - m.mean);
  m.var /= static_cast<double>(x.size() - 1);
  return m;
}

// Empirical mean and variance within 3 standard errors of the targets.
void check_moments(const std::vector<double>& x, double mean, double var) {
  const Moments m = moments(x);
  const double n = static_cast<double>(x.size());
  const double se_mean = std::sqrt(var / n);
  const double se_var = var * std::sqrt(2.0 / (n - 1.0));
  CHECK(std::abs(m.mean - mean) <= 3.0 * se_mean);
  CHECK(std::abs(m.var - var) <= 3.0 * se_var);
}

DenoiserConfig small_denoiser(int k) {
  DenoiserConfig c;
  c.num_classes = k;
  c.width = 6;
  c.hidden = 10;
  c.time_dim = 8;
  return c;
}

}  // namespace

TEST_SUITE("diff_c") {
  TEST_CASE("schedule values match a direct product") {
    const NoiseSchedule s = make_schedule(200, 1e-4, 0.05, false);
    double ab = 1.0;
    for (int t = 1; t <= 200; ++t) {
      const double beta = 1e-4 + (0.05 - 1e-4) * (t - 1) / 199.0;
      ab *= 1.0 - beta;
      CHECK(s.beta[static_cast<std::size_t>(t)] == doctest::Approx(beta).epsilon(1e-14));
      CHECK(s.alpha_bar[static_cast<std::size_t>(t)] == doctest::Approx(ab).epsilon(1e-12));
    }
    // ab_200 is about 6.3e-3 here, so the endpoint rule fails for this grid.
    CHECK(s.alpha_bar[200] > 1e-3);
    CHECK_FALSE(s.endpoint_ok);
    CHECK_THROWS_AS(make_schedule(200, 1e-4, 0.05), ConfigError);
  }

  TEST_CASE("single-step schedule") {
    const NoiseSchedule s = make_schedule(1, 0.5, 0.5, false);
    CHECK(s.alpha_bar[1] == 0.5);
    CHECK_THROWS_AS(make_schedule(1, 0.5, 0.5), ConfigError);
    CHECK_THROWS_AS(make_schedule(10, 1e-4, 1.0, false), ConfigError);
    CHECK_THROWS_AS(make_schedule(10, 0.2, 0.1, false), ConfigError);
  }

  TEST_CASE("solved beta_max is the smallest meeting the endpoint rule") {
    for (int T : {50, 200, 1000}) {
      const double b = solve_beta_max(T, 1e-4);
      const NoiseSchedule s = make_schedule(T, 1e-4, b);
      CHECK(s.endpoint_ok);
      CHECK(s.alpha_bar[static_cast<std::size_t>(T)] <= 1e-4 + 1e-9);
      CHECK_FALSE(make_schedule(T, 1e-4, b * (1.0 - 1e-6), false).endpoint_ok);
    }
  }

  TEST_CASE("posterior coefficients are affine") {
    const NoiseSchedule s = make_schedule(200, 1e-4, solve_beta_max(200, 1e-4));
    for (int t = 1; t <= 200; ++t) {
      const PosteriorCoeffs c = posterior_coefficients(s, t);
      CHECK(std::abs(c.gamma0 + c.gamma1 + c.gamma2 - 1.0) <= 1e-10);
      for (int stride : {3, 17}) {
        if (t - stride < 0) continue;
        const PosteriorCoeffs d = posterior_coefficients(s, t, t - stride);
        CHECK(std::abs(d.gamma0 + d.gamma1 + d.gamma2 - 1.0) <= 1e-10);
      }
    }
  }

  TEST_CASE("posterior at t = 1 collapses to the reconstruction") {
    const NoiseSchedule s = make_schedule(200, 1e-4, solve_beta_max(200, 1e-4));
    const PosteriorCoeffs c = posterior_coefficients(s, 1);
    CHECK(c.gamma0 == 1.0);
    CHECK(c.gamma1 == 0.0);
    CHECK(c.gamma2 == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(c.beta_hat == 0.0);
    const RowD f0_hat = RowD::LinSpaced(3, 0.1, 0.7);
    const RowD out = reverse_step(c, f0_hat, RowD::Constant(3, 5.0), RowD::Constant(3, -1.0), RowD::Constant(3, 2.0));
    CHECK((out - f0_hat).cwiseAbs().maxCoeff() <= 1e-15);
  }

  TEST_CASE("with rho = 0 the step is the standard DDPM posterior") {
    const NoiseSchedule s = make_schedule(200, 1e-4, solve_beta_max(200, 1e-4));
    Rng rng = make_rng(RngSeed{31});
    for (int t = 2; t <= 200; ++t) {
      const auto ti = static_cast<std::size_t>(t);
      const double ab_t = s.alpha_bar[ti];
      const double ab_prev = s.alpha_bar[ti - 1];
      const double c0 = std::sqrt(ab_prev) * s.beta[ti] / (1.0 - ab_t);
      const double c1 = std::sqrt(s.alpha[ti]) * (1.0 - ab_prev) / (1.0 - ab_t);
      const double var = (1.0 - ab_prev) * s.beta[ti] / (1.0 - ab_t);
      const PosteriorCoeffs c = posterior_coefficients(s, t);
      CHECK(c.gamma0 == doctest::Approx(c0).epsilon(1e-12));
      CHECK(c.gamma1 == doctest::Approx(c1).epsilon(1e-12));
      CHECK(c.beta_hat == doctest::Approx(var).epsilon(1e-12));
      const RowD f0 = normal_row(rng, 3);
      const RowD ft = normal_row(rng, 3);
      const RowD z = normal_row(rng, 3);
      const RowD got = reverse_step(c, f0, ft, RowD::Zero(3), z);
      const RowD want = c0 * f0 + c1 * ft + std::sqrt(var) * z;
      CHECK((got - want).cwiseAbs().maxCoeff() <= 1e-12);
    }
  }

  TEST_CASE("posterior coefficients match the Gaussian-Bayes oracle") {
    const NoiseSchedule s = make_schedule(200, 1e-4, solve_beta_max(200, 1e-4));
    const double f0 = 0.8, ft = -0.4, rho = 0.3;
    for (int t : {2, 10, 77, 150, 200}) {
      for (int s_ : {t - 1, std::max(0, t - 9), 0}) {
        const PosteriorCoeffs c = posterior_coefficients(s, t, s_);
        const Oracle o = bayes_posterior(s, t, s_, f0, ft, rho);
        CHECK(c.gamma0 * f0 + c.gamma1 * ft + c.gamma2 * rho == doctest::Approx(o.mean).epsilon(1e-9));
        CHECK(c.beta_hat == doctest::Approx(o.var).epsilon(1e-9));
      }
    }
  }

  TEST_CASE("reverse-step draws match the posterior moments") {
    const NoiseSchedule s = make_schedule(200, 1e-4, solve_beta_max(200, 1e-4));
    const RowD f0 = (RowD(3) << 1.0, 0.0, 0.0).finished();
    const RowD rho = (RowD(3) << 0.2, 0.5, 0.3).finished();
    const RowD ft = (RowD(3) << 0.4, -0.1, 0.9).finished();
    Rng rng = make_rng(RngSeed{41});
    for (int t : {5, 120}) {
      const PosteriorCoeffs c = posterior_coefficients(s, t);
      std::vector<std::vector<double>> draws(3);
      for (int i = 0; i < 100000; ++i) {
        const RowD x = reverse_step(c, f0, ft, rho, normal_row(rng, 3));
        for (int k = 0; k < 3; ++k) draws[static_cast<std::size_t>(k)].push_back(x(k));
      }
      for (int k = 0; k < 3; ++k) {
        const Oracle o = bayes_posterior(s, t, t - 1, f0(k), ft(k), rho(k));
        check_moments(draws[static_cast<std::size_t>(k)], o.mean, o.var);
      }
    }
  }

  TEST_CASE("composed forward kernels match the marginal") {
    const NoiseSchedule s = make_schedule(200, 1e-4, solve_beta_max(200, 1e-4));
    const RowD f0 = (RowD(3) << 0.0, 1.0, 0.0).finished();
    const RowD rho = (RowD(3) << 0.1, 0.6, 0.3).finished();
    Rng rng = make_rng(RngSeed{43});
    const int n = 100000;
    const std::vector<int> checkpoints{10, 60};
    std::vector<std::vector<std::vector<double>>> at(checkpoints.size(), std::vector<std::vector<double>>(3));
    for (int i = 0; i < n; ++i) {
      RowD f = f0;
      std::size_t next = 0;
      for (int t = 1; t <= checkpoints.back(); ++t) {
        f = forward_step(s, f, rho, t, normal_row(rng, 3));
        if (t == checkpoints[next]) {
          for (int k = 0; k < 3; ++k) at[next][static_cast<std::size_t>(k)].push_back(f(k));
          ++next;
        }
      }
    }
    for (std::size_t c = 0; c < checkpoints.size(); ++c) {
      const double ab = s.alpha_bar[static_cast<std::size_t>(checkpoints[c])];
      for (int k = 0; k < 3; ++k) {
        const double mean = std::sqrt(ab) * f0(k) + (1.0 - std::sqrt(ab)) * rho(k);
        check_moments(at[c][static_cast<std::size_t>(k)], mean, 1.0 - ab);
      }
    }
  }

  TEST_CASE("forward sample endpoints") {
    const NoiseSchedule s = make_schedule(200, 1e-4, solve_beta_max(200, 1e-4));
    const RowD f0 = (RowD(3) << 0.0, 0.0, 1.0).finished();
    const RowD rho = (RowD(3) << 0.2, 0.3, 0.5).finished();
    const RowD at_t = forward_sample(s, f0, rho, 200, RowD::Zero(3));
    CHECK((at_t - rho).cwiseAbs().maxCoeff() <= 0.01 + 1e-12);
    NoiseSchedule identity = s;
    identity.alpha_bar[1] = 1.0;
    CHECK(forward_sample(identity, f0, rho, 1, RowD::Zero(3)) == f0);
    CHECK_THROWS_AS(forward_sample(s, f0, rho, 0, RowD::Zero(3)), DomainError);
    CHECK_THROWS_AS(forward_sample(s, f0, rho, 201, RowD::Zero(3)), DomainError);
  }

  TEST_CASE("reconstruction inverts the forward sample") {
    const NoiseSchedule s = make_schedule(200, 1e-4, solve_beta_max(200, 1e-4));
    Rng rng = make_rng(RngSeed{51});
    std::uniform_int_distribution<int> td(1, 200);
    for (int i = 0; i < 500; ++i) {
      const int t = i == 0 ? 200 : td(rng);
      const RowD f0 = normal_row(rng, 3);
      const RowD rho = normal_row(rng, 3);
      const RowD eps = normal_row(rng, 3);
      const RowD ft = forward_sample(s, f0, rho, t, eps);
      CHECK((reconstruct_f0(s, ft, eps, rho, t) - f0).cwiseAbs().maxCoeff() <= 1e-5);
      const double ab = s.alpha_bar[static_cast<std::size_t>(t)];
      const RowD symbolic = (ft - (1.0 - std::sqrt(ab)) * rho - std::sqrt(1.0 - ab) * eps) / std::sqrt(ab);
      CHECK((reconstruct_f0(s, ft, eps, rho, t) - symbolic).cwiseAbs().maxCoeff() <= 1e-12);
      CHECK((reconstruct_f0(s, f0, RowD::Zero(3), f0, t) - f0).cwiseAbs().maxCoeff() <= 1e-10);
    }
  }

  TEST_CASE("reverse step on a constant state") {
    const NoiseSchedule s = make_schedule(200, 1e-4, solve_beta_max(200, 1e-4));
    const RowD v = (RowD(3) << 0.3, -1.0, 2.0).finished();
    const RowD z = (RowD(3) << 1.0, 0.5, -0.5).finished();
    for (int t : {2, 50, 200}) {
      const PosteriorCoeffs c = posterior_coefficients(s, t);
      CHECK((reverse_step(c, v, v, v, z) - (v + c.gamma3 * z)).cwiseAbs().maxCoeff() <= 1e-10);
    }
  }

  TEST_CASE("noise loss") {
    CHECK(noise_loss(ClassVector({0.2, 0.3}), ClassVector({0.2, 0.3})) == 0.0);
    CHECK(noise_loss(ClassVector({1, 0}), ClassVector({0, 0})) == 1.0);
    Rng rng = make_rng(RngSeed{61});
    std::vector<double> a(5), b(5);
    double want = 0.0;
    for (std::size_t i = 0; i < 5; ++i) {
      a[i] = standard_normal(rng);
      b[i] = standard_normal(rng);
      want += (a[i] - b[i]) * (a[i] - b[i]);
    }
    CHECK(noise_loss(ClassVector(a), ClassVector(b)) == doctest::Approx(want).epsilon(1e-12));
  }

  TEST_CASE("visited steps and time embedding") {
    CHECK(sampling_steps(5, 1) == std::vector<int>{5, 4, 3, 2, 1});
    CHECK(sampling_steps(10, 4) == std::vector<int>{10, 6, 2, 1});
    CHECK(sampling_steps(9, 4) == std::vector<int>{9, 5, 1});
    const RowD e = timestep_embedding(7, 8);
    CHECK(e.size() == 8);
    CHECK(e(0) == doctest::Approx(std::sin(7.0)));
    CHECK(e(4) == doctest::Approx(std::cos(7.0)));
    CHECK(e(1) == doctest::Approx(std::sin(7.0 * std::pow(10000.0, -0.25))));
  }

  TEST_CASE("timesteps are uniform on [1, T]") {
    Rng rng = make_rng(RngSeed{71});
    const int T = 20;
    const int n = 200000;
    std::vector<int> hist(T + 1, 0);
    for (int i = 0; i < n; ++i) {
      const int t = sample_timestep(rng, T);
      REQUIRE(t >= 1);
      REQUIRE(t <= T);
      ++hist[static_cast<std::size_t>(t)];
    }
    const double expected = static_cast<double>(n) / T;
    double chi2 = 0.0;
    for (int t = 1; t <= T; ++t) chi2 += std::pow(hist[static_cast<std::size_t>(t)] - expected, 2) / expected;
    // 99.9% quantile of chi-square with 19 degrees of freedom.
    CHECK(chi2 < 43.82);
  }

  TEST_CASE("denoiser shapes and zero output layer") {
    for (int k : {2, 3, 6}) {
      DenoiserParams<double> d(small_denoiser(k));
      Rng rng = make_rng(RngSeed{81});
      d.init(rng);
      ag::Graph<double> g;
      auto z = encode_condition(g, d, g.constant(ag::Matrix<double>::Ones(1, 6)));
      auto eps = predict_noise(g, d, z, g.constant(ag::Matrix<double>::Zero(1, k)),
                               g.constant(ag::Matrix<double>::Zero(1, k)),
                               g.constant(embed_rows<double>(3, 8, 1)));
      CHECK(eps.cols() == k);
      CHECK(eps.value().allFinite());
      d.net3.init_zero();
      ag::Graph<double> g2;
      auto z2 = encode_condition(g2, d, g2.constant(ag::Matrix<double>::Ones(1, 6)));
      auto zero = predict_noise(g2, d, z2, g2.constant(ag::Matrix<double>::Zero(1, k)),
                                g2.constant(ag::Matrix<double>::Zero(1, k)),
                                g2.constant(embed_rows<double>(3, 8, 1)));
      CHECK(zero.value().isZero());
      auto unused = predict_noise(g, d, z, g.constant(ag::Matrix<double>::Zero(1, k)),
                                g.constant(ag::Matrix<double>::Zero(1, k)),
                                g.constant(embed_rows<double>(3, 8, 1)));
      CHECK(unused.cols() == k);
      CHECK_THROWS_AS(predict_noise(g, d, z, g.constant(ag::Matrix<double>::Zero(1, k + 1)),
                                    g.constant(ag::Matrix<double>::Zero(1, k)),
                                    g.constant(embed_rows<double>(3, 8, 1))),
                      ShapeError);
    }
  }

  TEST_CASE("condition encoder on confidence-weighted latents") {
    DenoiserParams<double> d(small_denoiser(2));
    Rng rng = make_rng(RngSeed{82});
    d.init(rng);
    const RowD e0 = normal_row(rng, 6);
    const RowD e1 = normal_row(rng, 6);
    const RowD fused = 1.0 * e0 + 0.0 * e1;
    CHECK((fuse_condition(d, fused) - fuse_condition(d, e0)).cwiseAbs().maxCoeff() == 0.0);
    ag::Graph<double> g;
    const RowD zero = encode_condition(g, d, g.constant(ag::Matrix<double>::Zero(1, 6))).value().row(0);
    CHECK((fuse_condition(d, RowD::Zero(6)) - zero).cwiseAbs().maxCoeff() == 0.0);
  }

  TEST_CASE("denoiser gradients match finite differences") {
    DenoiserParams<double> d(small_denoiser(3));
    Rng rng = make_rng(RngSeed{91});
    d.init(rng);
    ag::Matrix<double> fused(4, 6), ft(4, 3), rho(4, 3), eps(4, 3), emb(4, 8);
    for (auto* m : {&fused, &ft, &rho, &eps}) {
      for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] = standard_normal(rng);
    }
    for (int r = 0; r < 4; ++r) emb.row(r) = timestep_embedding(1 + 50 * r, 8);
    const nn::ParamList<double> ps = d.parameters();
    auto res = mexd::testing::finite_difference_check(ps, [&](ag::Graph<double>& g) {
      auto z = encode_condition(g, d, g.constant(fused));
      auto hat = predict_noise(g, d, z, g.constant(ft), g.constant(rho), g.constant(emb));
      return ag::squared_norm(ag::sub(g.constant(eps), hat));
    });
    INFO("worst tensor " << res.worst << " error " << res.max_rel_error);
    CHECK(res.checked == ps.size());
    CHECK(res.max_rel_error < 1e-6);
  }

  TEST_CASE("sampling is seeded per chain") {
    DenoiserParams<double> d(small_denoiser(3));
    Rng rng = make_rng(RngSeed{92});
    d.init(rng);
    const NoiseSchedule s = make_schedule(50, 1e-4, solve_beta_max(50, 1e-4));
    const RowD z = RowD::Zero(6);
    const RowD rho = (RowD(3) << 0.2, 0.3, 0.5).finished();
    const auto a = sample(s, d, z, rho, SampleOptions{1, 8, RngSeed{5}});
    const auto b = sample(s, d, z, rho, SampleOptions{1, 8, RngSeed{5}});
    const auto first = sample(s, d, z, rho, SampleOptions{1, 3, RngSeed{5}});
    CHECK(a.size() == 8);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
    // Chain j does not depend on how many chains run beside it.
    for (std::size_t i = 0; i < first.size(); ++i) {
      for (std::size_t k = 0; k < 3; ++k) CHECK(first[i][k] == doctest::Approx(a[i][k]).epsilon(1e-12));
    }
    const auto c = sample(s, d, z, rho, SampleOptions{1, 8, RngSeed{6}});
    CHECK_FALSE(c[0] == a[0]);
    const auto strided = sample(s, d, z, rho, SampleOptions{7, 4, RngSeed{5}});
    for (const auto& v : strided) {
      for (double x : v.values()) CHECK(std::isfinite(x));
    }
  }
}
