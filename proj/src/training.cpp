#include "mexd/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

#include <spdlog/spdlog.h>

#include "mexd/rng.hpp"

namespace mexd {

namespace {

constexpr std::uint64_t kStage1Init = 0x51a6e1001ULL;
constexpr std::uint64_t kStage1Order = 0x51a6e1002ULL;
constexpr std::uint64_t kStage2Init = 0x51a6e2001ULL;
constexpr std::uint64_t kStage2Order = 0x51a6e2002ULL;
constexpr std::uint64_t kStage2Noise = 0x51a6e2003ULL;

std::int64_t steps_per_epoch(std::size_t n, int batch) {
  return static_cast<std::int64_t>((n + static_cast<std::size_t>(batch) - 1) / static_cast<std::size_t>(batch));
}

void check_dataset(std::span<const Bag> bags, int classes, int width) {
  if (bags.empty()) throw DomainError("training set is empty");
  for (const Bag& b : bags) validate_bag(b, classes, width);
}

[[noreturn]] void nan_abort(const std::string& stage, int epoch, double loss, double lr, double gnorm) {
  std::ostringstream os;
  os << stage << ": non-finite loss " << loss << " at epoch " << epoch << " (lr " << lr
     << ", grad norm " << gnorm << ")";
  throw TrainingError(os.str());
}

}  // namespace

void TrainConfig::validate() const {
  if (stage1.epochs < 1 || stage2.epochs < 1) throw ConfigError("epochs must be >= 1");
  if (!(stage1.lr0 > 0.0) || !(stage2.lr0 > 0.0)) throw ConfigError("lr0 must be positive");
  if (stage1.weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (eval_every < 0) throw ConfigError("eval_every must be >= 0");
  ratios.validate();
  if (diffusion.steps < 1) throw ConfigError("diffusion.steps must be >= 1");
  if (diffusion.stride < 1) throw ConfigError("diffusion.stride must be >= 1");
  if (diffusion.n_samples < 1) throw ConfigError("diffusion.n_samples must be >= 1");
  if (moe.num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (moe.num_classes != denoiser.num_classes || moe.width != denoiser.width) {
    throw ConfigError("aggregator and denoiser disagree on class count or width");
  }
  if (moe.width % moe.heads != 0) throw ConfigError("width must be divisible by heads");
  if (denoiser.time_dim < 2 || denoiser.time_dim % 2 != 0) throw ConfigError("time_dim must be even");
}

double cosine_lr(std::int64_t step, std::int64_t total_steps, double lr0) {
  if (total_steps <= 0) throw DomainError("cosine_lr: total_steps must be positive");
  if (step < 0 || step > total_steps) throw DomainError("cosine_lr: step outside [0, total_steps]");
  const double x = static_cast<double>(step) / static_cast<double>(total_steps);
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * x));
}

NoiseSchedule schedule_for(const DiffusionOptions& d) {
  const double bmax = d.beta_max > 0.0 ? d.beta_max : solve_beta_max(d.steps, d.beta_min);
  return make_schedule(d.steps, d.beta_min, bmax, true);
}

Stage1Result train_stage1(std::span<const Bag> train, const TrainConfig& config,
                          std::span<const Bag> heldout, const LogSink& sink) {
  config.validate();
  check_dataset(train, config.moe.num_classes, config.moe.width);

  Stage1Result res{MoEParams<float>(config.moe), {}};
  Rng init_rng = make_rng(derive_seed(config.seed, kStage1Init));
  res.params.init(init_rng);
  Rng order_rng = make_rng(derive_seed(config.seed, kStage1Order));

  const nn::ParamList<float> params = res.params.parameters();
  nn::AdamOptions opts;
  opts.weight_decay = config.stage1.weight_decay;
  opts.rectified = true;
  nn::Adam<float> optim(params, opts);

  const std::int64_t per_epoch = steps_per_epoch(train.size(), config.batch_size);
  const std::int64_t total = per_epoch * config.stage1.epochs;
  std::int64_t step = 0;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 1; epoch <= config.stage1.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), order_rng);
    double epoch_loss = 0.0;
    double lr = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      const float inv_r = 1.0f / static_cast<float>(stop - start);
      nn::zero_grads(params);
      double batch_loss = 0.0;
      for (std::size_t i = start; i < stop; ++i) {
        const Bag& bag = train[order[i]];
        ag::Graph<float> g;
        auto f = aggregate(g, res.params, g.constant(bag.instances), config.ratios);
        auto loss = moe_loss(g, bag.label, f);
        batch_loss += static_cast<double>(loss.scalar());
        g.backward(ag::scale(loss, inv_r));
      }
      lr = cosine_lr(step, total, config.stage1.lr0);
      const double gnorm = nn::grad_norm(params);
      if (!std::isfinite(batch_loss) || !std::isfinite(gnorm)) nan_abort("stage1", epoch, batch_loss, lr, gnorm);
      nn::clip_grad_norm(params, config.grad_clip);
      optim.step(lr);
      res.log.step_lrs.push_back(lr);
      ++step;
      epoch_loss += batch_loss;
    }
    LogRecord rec{"stage1", epoch, epoch_loss / static_cast<double>(train.size()), lr, std::nullopt};
    if (!heldout.empty() && config.eval_every > 0 &&
        (epoch % config.eval_every == 0 || epoch == config.stage1.epochs)) {
      rec.eval_accuracy = prior_accuracy(res.params, heldout, config.ratios);
    }
    spdlog::debug("stage1 epoch {} loss {:.6f} lr {:.3e}", epoch, rec.loss, lr);
    res.log.epochs.push_back(rec);
    if (sink) sink(rec);
  }
  return res;
}

BagCondition condition_for(MoEParams<float>& moe, const Bag& bag, const SamplingRatios& ratios) {
  const MoEOutput out = aggregate(moe, bag, ratios);
  BagCondition c;
  c.fused = fused_latent(out.insights);
  c.rho = to_row(out.prior);
  c.label = bag.label;
  return c;
}

Stage2Result train_stage2(std::span<const Bag> train, MoEParams<float>& moe,
                          const TrainConfig& config, const LogSink& sink) {
  config.validate();
  check_dataset(train, config.moe.num_classes, config.moe.width);
  const NoiseSchedule sched = schedule_for(config.diffusion);
  const int k = config.denoiser.num_classes;

  Stage2Result res;
  res.moe_hash_before = nn::hash_params(moe.parameters());

  std::vector<BagCondition> conds;
  conds.reserve(train.size());
  for (const Bag& b : train) {
    conds.push_back(condition_for(moe, b, config.ratios));
    if (!config.diffusion.use_prior) conds.back().rho.setZero();
  }

  res.params = DenoiserParams<float>(config.denoiser);
  Rng init_rng = make_rng(derive_seed(config.seed, kStage2Init));
  res.params.init(init_rng);
  Rng order_rng = make_rng(derive_seed(config.seed, kStage2Order));
  Rng noise_rng = make_rng(derive_seed(config.seed, kStage2Noise));

  const nn::ParamList<float> params = res.params.parameters();
  nn::Adam<float> optim(params, nn::AdamOptions{});

  const std::int64_t per_epoch = steps_per_epoch(train.size(), config.batch_size);
  const std::int64_t total = per_epoch * config.stage2.epochs;
  std::int64_t step = 0;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 1; epoch <= config.stage2.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), order_rng);
    double epoch_loss = 0.0;
    double lr = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      const float inv_r = 1.0f / static_cast<float>(stop - start);
      nn::zero_grads(params);
      double batch_loss = 0.0;
      for (std::size_t i = start; i < stop; ++i) {
        const BagCondition& c = conds[order[i]];
        const int t = sample_timestep(noise_rng, sched.steps);
        RowD eps(k);
        for (int q = 0; q < k; ++q) eps(q) = standard_normal(noise_rng);
        const RowD f0 = to_row(one_hot(c.label, k));
        const RowD f_t = forward_sample(sched, f0, c.rho, t, eps);

        ag::Graph<float> g;
        auto z = encode_condition(g, res.params, g.constant(c.fused.cast<float>()));
        auto eps_hat = predict_noise(g, res.params, z, g.constant(f_t.cast<float>()),
                                     g.constant(c.rho.cast<float>()),
                                     g.constant(embed_rows<float>(t, config.denoiser.time_dim, 1)));
        auto loss = ag::squared_norm(ag::sub(g.constant(eps.cast<float>()), eps_hat));
        batch_loss += static_cast<double>(loss.scalar());
        g.backward(ag::scale(loss, inv_r));
      }
      lr = cosine_lr(step, total, config.stage2.lr0);
      const double gnorm = nn::grad_norm(params);
      if (!std::isfinite(batch_loss) || !std::isfinite(gnorm)) nan_abort("stage2", epoch, batch_loss, lr, gnorm);
      nn::clip_grad_norm(params, config.grad_clip);
      optim.step(lr);
      res.log.step_lrs.push_back(lr);
      ++step;
      epoch_loss += batch_loss;
    }
    LogRecord rec{"stage2", epoch, epoch_loss / static_cast<double>(train.size()), lr, std::nullopt};
    spdlog::debug("stage2 epoch {} loss {:.6f} lr {:.3e}", epoch, rec.loss, lr);
    res.log.epochs.push_back(rec);
    if (sink) sink(rec);
  }
  res.moe_hash_after = nn::hash_params(moe.parameters());
  return res;
}

RngSeed bag_sample_seed(RngSeed seed, const std::string& bag_id) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : bag_id) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return derive_seed(seed, h);
}

std::vector<ClassVector> predict_samples(Model& model, const Bag& bag, int n_samples, RngSeed seed) {
  const NoiseSchedule sched = schedule_for(model.config.diffusion);
  BagCondition c = condition_for(model.moe, bag, model.config.ratios);
  if (!model.config.diffusion.use_prior) c.rho.setZero();
  const RowD z = fuse_condition(model.denoiser, c.fused);
  SampleOptions opt;
  opt.stride = model.config.diffusion.stride;
  opt.n_samples = n_samples;
  opt.seed = seed;
  return sample(sched, model.denoiser, z, c.rho, opt);
}

PredictionRecord predict(Model& model, const Bag& bag, double alpha) {
  auto samples = predict_samples(model, bag, model.config.diffusion.n_samples,
                                 bag_sample_seed(model.config.seed, bag.bag_id));
  return make_record(bag.bag_id, std::move(samples), bag.label, alpha);
}

std::vector<PredictionRecord> evaluate(Model& model, std::span<const Bag> bags, double alpha) {
  std::vector<PredictionRecord> out;
  out.reserve(bags.size());
  for (const Bag& b : bags) out.push_back(predict(model, b, alpha));
  return out;
}

double prior_accuracy(MoEParams<float>& moe, std::span<const Bag> bags, const SamplingRatios& ratios) {
  if (bags.empty()) throw DomainError("prior_accuracy: no bags");
  std::size_t hit = 0;
  for (const Bag& b : bags) {
    const MoEOutput out = aggregate(moe, b, ratios);
    hit += argmax(out.prior.values()) == b.label;
  }
  return static_cast<double>(hit) / static_cast<double>(bags.size());
}

}  // namespace mexd
