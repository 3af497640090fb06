#pragma once
// Two-stage optimisation: stage 1 fits the mixture-of-experts aggregator,
// stage 2 freezes it and fits the denoiser on cached per-bag conditions.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mexd/core_types.hpp"
#include "mexd/diff_c.hpp"
#include "mexd/dyn_moe.hpp"
#include "mexd/metrics.hpp"

namespace mexd {

struct Stage1Options {
  int epochs = 100;
  double lr0 = 2e-4;
  double weight_decay = 1e-5;
};

struct Stage2Options {
  int epochs = 200;
  double lr0 = 1e-3;
};

struct DiffusionOptions {
  int steps = 200;  // T
  double beta_min = 1e-4;
  double beta_max = 0.0;  // 0: smallest value meeting the endpoint condition
  int stride = 1;
  int n_samples = 100;
  bool use_prior = true;  // false forces rho = 0 in training and sampling
};

struct TrainConfig {
  Stage1Options stage1;
  Stage2Options stage2;
  int batch_size = 1;       // bags per optimiser step
  double grad_clip = 5.0;   // <= 0 disables clipping
  int eval_every = 1;       // held-out prior ACC cadence in epochs, 0 = never
  RngSeed seed{0};
  SamplingRatios ratios;
  DiffusionOptions diffusion;
  MoEConfig moe;
  DenoiserConfig denoiser;

  void validate() const;
};

// lr0 * 0.5 * (1 + cos(pi * step / total_steps)).
double cosine_lr(std::int64_t step, std::int64_t total_steps, double lr0);

NoiseSchedule schedule_for(const DiffusionOptions& d);

struct LogRecord {
  std::string stage;
  int epoch = 0;  // 1-based
  double loss = 0.0;
  double lr = 0.0;  // lr of the last step in the epoch
  std::optional<double> eval_accuracy;
};

using LogSink = std::function<void(const LogRecord&)>;

struct TrainingLog {
  std::vector<LogRecord> epochs;
  std::vector<double> step_lrs;
};

struct Stage1Result {
  MoEParams<float> params;
  TrainingLog log;
};

// Optional `heldout` bags are scored with argmax(rho) every eval_every epochs.
Stage1Result train_stage1(std::span<const Bag> train, const TrainConfig& config,
                          std::span<const Bag> heldout = {}, const LogSink& sink = {});

// Frozen stage-1 outputs for one bag.
struct BagCondition {
  RowD fused;  // sum_r c_r e_r
  RowD rho;
  int label = 0;
};

BagCondition condition_for(MoEParams<float>& moe, const Bag& bag, const SamplingRatios& ratios);

struct Stage2Result {
  DenoiserParams<float> params;
  TrainingLog log;
  std::uint64_t moe_hash_before = 0;
  std::uint64_t moe_hash_after = 0;
};

Stage2Result train_stage2(std::span<const Bag> train, MoEParams<float>& moe,
                          const TrainConfig& config, const LogSink& sink = {});

struct Model {
  TrainConfig config;
  MoEParams<float> moe;
  DenoiserParams<float> denoiser;
};

// Sampling seed for a bag: derived from the config seed and the bag id so
// that a bag's draws do not depend on its position in a dataset.
RngSeed bag_sample_seed(RngSeed seed, const std::string& bag_id);

std::vector<ClassVector> predict_samples(Model& model, const Bag& bag, int n_samples,
                                         RngSeed seed);

// Samples, aggregates and t-tests one bag with the model's diffusion options.
PredictionRecord predict(Model& model, const Bag& bag, double alpha = 0.05);

std::vector<PredictionRecord> evaluate(Model& model, std::span<const Bag> bags, double alpha = 0.05);

// Fraction of bags whose argmax(rho) equals the label.
double prior_accuracy(MoEParams<float>& moe, std::span<const Bag> bags, const SamplingRatios& ratios);

}  // namespace mexd
