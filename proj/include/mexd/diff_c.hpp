#pragma once
// Diffusion classifier over R^(K+1) class vectors with the forward process
// pulled toward a prior prediction rho:
//
//   q(f_t | f_0, rho) = N( sqrt(ab_t) f_0 + (1 - sqrt(ab_t)) rho, (1 - ab_t) I )
//
// where ab_t is the cumulative product of alpha_t = 1 - beta_t and ab_0 = 1.
// Sampling starts at f_T ~ N(rho, I) and walks the Gaussian posterior
//
//   f_s = g0 * f0_hat + g1 * f_t + g2 * rho + g3 * z
//
// between visited steps t > s. All schedule and posterior arithmetic is done
// in double.

#include <cstdint>
#include <vector>

#include "mexd/core_types.hpp"
#include "mexd/nn.hpp"
#include "mexd/rng.hpp"

namespace mexd {

struct NoiseSchedule {
  int steps = 0;                  // T
  std::vector<double> beta;       // index 1..T (index 0 unused, 0.0)
  std::vector<double> alpha;      // index 1..T (index 0 = 1.0)
  std::vector<double> alpha_bar;  // index 0..T, alpha_bar[0] = 1
  bool endpoint_ok = false;       // 1 - sqrt(alpha_bar[T]) >= 0.99

  double endpoint_gap() const;    // 1 - sqrt(alpha_bar[T])
};

inline constexpr double kEndpointTarget = 0.99;

// Linear beta from beta_min (t = 1) to beta_max (t = T). With
// enforce_endpoint the endpoint condition is checked and a ConfigError
// raised when it fails.
NoiseSchedule make_schedule(int steps, double beta_min, double beta_max,
                            bool enforce_endpoint = true);

// Smallest beta_max (to ~1e-9) for which the linear schedule meets the
// endpoint condition.
double solve_beta_max(int steps, double beta_min);

struct PosteriorCoeffs {
  double gamma0 = 0.0;  // f0_hat
  double gamma1 = 0.0;  // f_t
  double gamma2 = 0.0;  // rho
  double gamma3 = 0.0;  // z, = sqrt(beta_hat)
  double beta_hat = 0.0;
};

// Posterior of f_{t-1} given (f_t, f_0, rho).
PosteriorCoeffs posterior_coefficients(const NoiseSchedule& sched, int t);
// Posterior of f_s given (f_t, f_0, rho) for 0 <= s < t; reduces to the
// single-step form when s = t - 1.
PosteriorCoeffs posterior_coefficients(const NoiseSchedule& sched, int t, int s);

using RowD = Eigen::RowVectorXd;

RowD forward_sample(const NoiseSchedule& sched, const RowD& f0, const RowD& rho, int t,
                    const RowD& eps);
ClassVector forward_sample(const NoiseSchedule& sched, const ClassVector& f0,
                           const ClassVector& rho, int t, const ClassVector& eps);

// One step of the forward Markov kernel: f_t from f_{t-1}.
RowD forward_step(const NoiseSchedule& sched, const RowD& f_prev, const RowD& rho, int t,
                  const RowD& eps);

// Exact inversion of forward_sample for a given noise estimate.
RowD reconstruct_f0(const NoiseSchedule& sched, const RowD& f_t, const RowD& eps_hat,
                    const RowD& rho, int t);
ClassVector reconstruct_f0(const NoiseSchedule& sched, const ClassVector& f_t,
                           const ClassVector& eps_hat, const ClassVector& rho, int t);

RowD reverse_step(const PosteriorCoeffs& c, const RowD& f0_hat, const RowD& f_t, const RowD& rho,
                  const RowD& z);
ClassVector reverse_step(const PosteriorCoeffs& c, const ClassVector& f0_hat,
                         const ClassVector& f_t, const ClassVector& rho, const ClassVector& z);

// ||eps - eps_hat||^2.
double noise_loss(const ClassVector& eps, const ClassVector& eps_hat);

// Visited steps T, T - stride, ..., always ending with 1.
std::vector<int> sampling_steps(int steps, int stride);

// Sinusoidal timestep embedding: [sin(t w_j), cos(t w_j)], w_j = 10000^(-j/(dim/2)).
RowD timestep_embedding(int t, int dim);

int sample_timestep(Rng& rng, int steps);  // uniform on [1, T]

ClassVector to_class_vector(const RowD& v);
RowD to_row(const ClassVector& v);

// ---------------------------------------------------------------------------
// Denoiser: condition encoder (three linear layers) and a three-layer noise
// MLP over [Z, f_t, rho, embed(t)].
// ---------------------------------------------------------------------------

struct DenoiserConfig {
  int num_classes = 3;
  int width = 64;    // C, latent width
  int hidden = 128;  // noise MLP hidden width
  int time_dim = 64;
};

template <class S>
struct DenoiserParams {
  DenoiserConfig config;
  nn::Linear<S> enc1, enc2, enc3;
  nn::Linear<S> net1, net2, net3;

  DenoiserParams() = default;
  explicit DenoiserParams(const DenoiserConfig& cfg)
      : config(cfg),
        enc1("diff.encoder1", cfg.width, cfg.width),
        enc2("diff.encoder2", cfg.width, cfg.width),
        enc3("diff.encoder3", cfg.width, cfg.width),
        net1("diff.net1", cfg.width + 2 * cfg.num_classes + cfg.time_dim, cfg.hidden),
        net2("diff.net2", cfg.hidden, cfg.hidden),
        net3("diff.net3", cfg.hidden, cfg.num_classes) {}

  void init(Rng& rng) {
    for (auto* l : {&enc1, &enc2, &enc3, &net1, &net2, &net3}) l->init_xavier(rng);
  }

  nn::ParamList<S> parameters() {
    nn::ParamList<S> ps;
    for (auto* l : {&enc1, &enc2, &enc3, &net1, &net2, &net3}) l->collect(ps);
    return ps;
  }
};

// Z = encoder(fused) for n x C fused latents.
template <class S>
ag::Var<S> encode_condition(ag::Graph<S>& g, DenoiserParams<S>& d, ag::Var<S> fused) {
  auto h = ag::softplus(d.enc1(g, fused));
  h = ag::softplus(d.enc2(g, h));
  return d.enc3(g, h);
}

// eps_hat for n rows of (Z, f_t, rho, embed(t)).
template <class S>
ag::Var<S> predict_noise(ag::Graph<S>& g, DenoiserParams<S>& d, ag::Var<S> z, ag::Var<S> f_t,
                         ag::Var<S> rho, ag::Var<S> t_embed) {
  const auto k = d.config.num_classes;
  if (z.cols() != d.config.width || f_t.cols() != k || rho.cols() != k ||
      t_embed.cols() != d.config.time_dim) {
    throw ShapeError("predict_noise: input widths do not match the denoiser");
  }
  auto x = ag::concat_cols<S>({z, f_t, rho, t_embed});
  auto h = ag::softplus(d.net1(g, x));
  h = ag::softplus(d.net2(g, h));
  return d.net3(g, h);
}

// Z for one bag (1 x C) from its fused expert latent.
template <class S>
RowD fuse_condition(DenoiserParams<S>& d, const RowD& fused) {
  ag::Graph<S> g;
  auto z = encode_condition(g, d, g.constant(fused.cast<S>()));
  return z.value().row(0).template cast<double>();
}

template <class S>
ag::Matrix<S> embed_rows(int t, int dim, Eigen::Index rows) {
  const RowD e = timestep_embedding(t, dim);
  return e.cast<S>().replicate(rows, 1);
}

struct SampleOptions {
  int stride = 1;
  int n_samples = 100;
  RngSeed seed{0};
};

// Reverse chain(s) from f_T ~ N(rho, I); chain j draws all its noise from
// derive_seed(seed, j). Returns one reconstruction f0' per chain.
template <class S>
std::vector<ClassVector> sample(const NoiseSchedule& sched, DenoiserParams<S>& den, const RowD& z,
                                const RowD& rho, const SampleOptions& opt) {
  const int k = static_cast<int>(rho.size());
  const int n = opt.n_samples;
  if (n < 1) throw ConfigError("sample: n_samples must be >= 1");
  std::vector<Rng> rngs;
  rngs.reserve(static_cast<std::size_t>(n));
  for (int j = 0; j < n; ++j) rngs.push_back(make_rng(derive_seed(opt.seed, static_cast<std::uint64_t>(j))));

  MatrixD f(n, k);
  for (int j = 0; j < n; ++j) {
    for (int c = 0; c < k; ++c) f(j, c) = rho(c) + standard_normal(rngs[static_cast<std::size_t>(j)]);
  }
  const ag::Matrix<S> z_rows = z.cast<S>().replicate(n, 1);
  const ag::Matrix<S> rho_rows = rho.cast<S>().replicate(n, 1);
  const std::vector<int> steps = sampling_steps(sched.steps, opt.stride);
  for (std::size_t i = 0; i < steps.size(); ++i) {
    const int t = steps[i];
    const int s = i + 1 < steps.size() ? steps[i + 1] : 0;
    ag::Graph<S> g;
    auto eps = predict_noise(g, den, g.constant(z_rows), g.constant(f.cast<S>()),
                             g.constant(rho_rows), g.constant(embed_rows<S>(t, den.config.time_dim, n)));
    const MatrixD eps_hat = eps.value().template cast<double>();
    const PosteriorCoeffs c = posterior_coefficients(sched, t, s);
    for (int j = 0; j < n; ++j) {
      const RowD f0_hat = reconstruct_f0(sched, f.row(j), eps_hat.row(j), rho, t);
      RowD zr(k);
      for (int q = 0; q < k; ++q) zr(q) = c.gamma3 > 0.0 ? standard_normal(rngs[static_cast<std::size_t>(j)]) : 0.0;
      f.row(j) = reverse_step(c, f0_hat, f.row(j), rho, zr);
    }
  }
  std::vector<ClassVector> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int j = 0; j < n; ++j) out.push_back(to_class_vector(f.row(j)));
  return out;
}

}  // namespace mexd
