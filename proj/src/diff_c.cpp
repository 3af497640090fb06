#include "mexd/diff_c.hpp"

#include <atomic>
#include <cmath>
#include <numbers>

#include <spdlog/spdlog.h>

namespace mexd {

double NoiseSchedule::endpoint_gap() const {
  return 1.0 - std::sqrt(alpha_bar[static_cast<std::size_t>(steps)]);
}

NoiseSchedule make_schedule(int steps, double beta_min, double beta_max, bool enforce_endpoint) {
  if (steps < 1) throw ConfigError("schedule: T must be >= 1");
  if (!(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0)) {
    throw ConfigError("schedule: need 0 < beta_min <= beta_max < 1");
  }
  NoiseSchedule s;
  s.steps = steps;
  const auto n = static_cast<std::size_t>(steps) + 1;
  s.beta.assign(n, 0.0);
  s.alpha.assign(n, 1.0);
  s.alpha_bar.assign(n, 1.0);
  for (int t = 1; t <= steps; ++t) {
    const double frac = steps == 1 ? 1.0 : static_cast<double>(t - 1) / (steps - 1);
    const auto ti = static_cast<std::size_t>(t);
    s.beta[ti] = beta_min + (beta_max - beta_min) * frac;
    s.alpha[ti] = 1.0 - s.beta[ti];
    s.alpha_bar[ti] = s.alpha_bar[ti - 1] * s.alpha[ti];
  }
  s.endpoint_ok = s.endpoint_gap() >= kEndpointTarget;
  if (enforce_endpoint && !s.endpoint_ok) {
    throw ConfigError("schedule: 1 - sqrt(alpha_bar_T) = " + std::to_string(s.endpoint_gap()) +
                      " < 0.99; increase T or beta_max");
  }
  return s;
}

double solve_beta_max(int steps, double beta_min) {
  auto gap = [&](double bmax) {
    return make_schedule(steps, beta_min, bmax, false).endpoint_gap();
  };
  double lo = beta_min;
  double hi = 0.999;
  if (gap(hi) < kEndpointTarget) {
    throw ConfigError("schedule: no beta_max < 1 meets the endpoint condition for T = " +
                      std::to_string(steps));
  }
  if (gap(lo) >= kEndpointTarget) return lo;
  for (int i = 0; i < 200 && hi - lo > 1e-12; ++i) {
    const double mid = 0.5 * (lo + hi);
    (gap(mid) >= kEndpointTarget ? hi : lo) = mid;
  }
  return hi;
}

PosteriorCoeffs posterior_coefficients(const NoiseSchedule& sched, int t) {
  return posterior_coefficients(sched, t, t - 1);
}

PosteriorCoeffs posterior_coefficients(const NoiseSchedule& sched, int t, int s) {
  if (t < 1 || t > sched.steps) throw DomainError("posterior_coefficients: t out of range");
  if (s < 0 || s >= t) throw DomainError("posterior_coefficients: need 0 <= s < t");
  const double ab_t = sched.alpha_bar[static_cast<std::size_t>(t)];
  const double ab_s = sched.alpha_bar[static_cast<std::size_t>(s)];
  const double a = ab_t / ab_s;  // alpha over the stride
  const double b = 1.0 - a;
  const double denom = 1.0 - ab_t;
  PosteriorCoeffs c;
  c.gamma0 = b * std::sqrt(ab_s) / denom;
  c.gamma1 = (1.0 - ab_s) * std::sqrt(a) / denom;
  c.gamma2 = 1.0 - (std::sqrt(a) + std::sqrt(ab_s)) / (1.0 + std::sqrt(ab_t));
  c.beta_hat = b * (1.0 - ab_s) / denom;
  c.gamma3 = std::sqrt(c.beta_hat);
  return c;
}

namespace {
void check_t(const NoiseSchedule& sched, int t) {
  if (t < 1 || t > sched.steps) {
    throw DomainError("diffusion step " + std::to_string(t) + " outside [1, " +
                      std::to_string(sched.steps) + "]");
  }
}
void check_same(Eigen::Index a, Eigen::Index b) {
  if (a != b) throw ShapeError("class vectors differ in length");
}
}  // namespace

RowD forward_sample(const NoiseSchedule& sched, const RowD& f0, const RowD& rho, int t,
                    const RowD& eps) {
  check_t(sched, t);
  check_same(f0.size(), rho.size());
  check_same(f0.size(), eps.size());
  const double sab = std::sqrt(sched.alpha_bar[static_cast<std::size_t>(t)]);
  const double sig = std::sqrt(1.0 - sched.alpha_bar[static_cast<std::size_t>(t)]);
  return sab * f0 + (1.0 - sab) * rho + sig * eps;
}

ClassVector forward_sample(const NoiseSchedule& sched, const ClassVector& f0,
                           const ClassVector& rho, int t, const ClassVector& eps) {
  return to_class_vector(forward_sample(sched, to_row(f0), to_row(rho), t, to_row(eps)));
}

RowD forward_step(const NoiseSchedule& sched, const RowD& f_prev, const RowD& rho, int t,
                  const RowD& eps) {
  check_t(sched, t);
  const double sa = std::sqrt(sched.alpha[static_cast<std::size_t>(t)]);
  const double sb = std::sqrt(sched.beta[static_cast<std::size_t>(t)]);
  return sa * f_prev + (1.0 - sa) * rho + sb * eps;
}

RowD reconstruct_f0(const NoiseSchedule& sched, const RowD& f_t, const RowD& eps_hat,
                    const RowD& rho, int t) {
  check_t(sched, t);
  check_same(f_t.size(), eps_hat.size());
  check_same(f_t.size(), rho.size());
  const double ab = sched.alpha_bar[static_cast<std::size_t>(t)];
  if (ab < 1e-4) {
    static std::atomic<bool> warned{false};
    if (!warned.exchange(true)) {
      spdlog::warn("reconstruct_f0: alpha_bar_t = {:.3g}; noise estimate is amplified by {:.1f}x",
                   ab, 1.0 / std::sqrt(ab));
    }
  }
  const double sab = std::sqrt(ab);
  return (f_t - (1.0 - sab) * rho - std::sqrt(1.0 - ab) * eps_hat) / sab;
}

ClassVector reconstruct_f0(const NoiseSchedule& sched, const ClassVector& f_t,
                           const ClassVector& eps_hat, const ClassVector& rho, int t) {
  return to_class_vector(reconstruct_f0(sched, to_row(f_t), to_row(eps_hat), to_row(rho), t));
}

RowD reverse_step(const PosteriorCoeffs& c, const RowD& f0_hat, const RowD& f_t, const RowD& rho,
                  const RowD& z) {
  check_same(f0_hat.size(), f_t.size());
  check_same(f0_hat.size(), rho.size());
  check_same(f0_hat.size(), z.size());
  return c.gamma0 * f0_hat + c.gamma1 * f_t + c.gamma2 * rho + c.gamma3 * z;
}

ClassVector reverse_step(const PosteriorCoeffs& c, const ClassVector& f0_hat,
                         const ClassVector& f_t, const ClassVector& rho, const ClassVector& z) {
  return to_class_vector(reverse_step(c, to_row(f0_hat), to_row(f_t), to_row(rho), to_row(z)));
}

double noise_loss(const ClassVector& eps, const ClassVector& eps_hat) {
  if (eps.size() != eps_hat.size()) throw ShapeError("noise_loss: lengths differ");
  double s = 0.0;
  for (std::size_t i = 0; i < eps.size(); ++i) {
    const double d = eps[i] - eps_hat[i];
    s += d * d;
  }
  return s;
}

std::vector<int> sampling_steps(int steps, int stride) {
  if (steps < 1) throw ConfigError("sampling_steps: T must be >= 1");
  if (stride < 1) throw ConfigError("sampling_steps: stride must be >= 1");
  std::vector<int> out;
  for (int t = steps; t >= 1; t -= stride) out.push_back(t);
  if (out.back() != 1) out.push_back(1);
  return out;
}

RowD timestep_embedding(int t, int dim) {
  if (dim < 2 || dim % 2 != 0) throw ConfigError("timestep embedding dim must be even");
  const int half = dim / 2;
  RowD e(dim);
  for (int j = 0; j < half; ++j) {
    const double w = std::exp(-std::log(10000.0) * static_cast<double>(j) / half);
    e(j) = std::sin(t * w);
    e(half + j) = std::cos(t * w);
  }
  return e;
}

int sample_timestep(Rng& rng, int steps) {
  std::uniform_int_distribution<int> d(1, steps);
  return d(rng);
}

ClassVector to_class_vector(const RowD& v) {
  return ClassVector(std::vector<double>(v.data(), v.data() + v.size()), false);
}

RowD to_row(const ClassVector& v) {
  RowD r(static_cast<Eigen::Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) r(static_cast<Eigen::Index>(i)) = v[i];
  return r;
}

}  // namespace mexd
