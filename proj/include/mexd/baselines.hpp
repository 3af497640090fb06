#pragma once
// Embedding-level MIL controls: a shared instance embedding, a bag pooling
// operator (mean, max or attention) and a linear classifier.

#include <span>
#include <string>
#include <vector>

#include "mexd/autograd.hpp"
#include "mexd/core_types.hpp"
#include "mexd/metrics.hpp"
#include "mexd/nn.hpp"
#include "mexd/training.hpp"

namespace mexd {

enum class Pooling { kMean, kMax, kAttention };

Pooling parse_pooling(const std::string& name);
std::string to_string(Pooling p);

struct BaselineConfig {
  Pooling pooling = Pooling::kMean;
  int num_classes = 3;
  int width = 64;
  int hidden = 64;
  int epochs = 100;
  double lr0 = 2e-4;
  double weight_decay = 1e-5;
  double grad_clip = 5.0;
  RngSeed seed{0};
};

template <class S>
struct BaselineParams {
  BaselineConfig config;
  nn::Linear<S> embed;
  nn::Linear<S> attn_v;
  ag::Parameter<S> attn_w;
  nn::Linear<S> classifier;

  BaselineParams() = default;
  explicit BaselineParams(const BaselineConfig& cfg)
      : config(cfg),
        embed("base.embed", cfg.width, cfg.hidden),
        attn_v("base.attn_v", cfg.hidden, cfg.hidden),
        attn_w(nn::make_param<S>("base.attn_w", 1, cfg.hidden)),
        classifier("base.classifier", cfg.hidden, cfg.num_classes) {}

  void init(Rng& rng) {
    embed.init_xavier(rng);
    attn_v.init_xavier(rng);
    nn::xavier_uniform(attn_w.value, rng);
    classifier.init_xavier(rng);
  }

  nn::ParamList<S> parameters() {
    nn::ParamList<S> ps;
    embed.collect(ps);
    if (config.pooling == Pooling::kAttention) {
      attn_v.collect(ps);
      ps.push_back(&attn_w);
    }
    classifier.collect(ps);
    return ps;
  }
};

// Class probabilities (1 x (K+1)) for an N x C bag.
template <class S>
ag::Var<S> baseline_probs(ag::Graph<S>& g, BaselineParams<S>& p, ag::Var<S> x) {
  auto h = ag::unary(p.embed(g, x), [](S v) { return v > S(0) ? v : S(0); },
                     [](S v) { return v > S(0) ? S(1) : S(0); });
  ag::Var<S> pooled;
  switch (p.config.pooling) {
    case Pooling::kMean:
      pooled = ag::mean_rows(h);
      break;
    case Pooling::kMax:
      pooled = ag::max_rows(h);
      break;
    case Pooling::kAttention: {
      auto a = ag::softmax_rows(ag::matmul_nt(g.param(p.attn_w), ag::tanh(p.attn_v(g, h))));
      pooled = ag::matmul(a, h);
      break;
    }
  }
  return ag::softmax_rows(p.classifier(g, pooled));
}

struct BaselineModel {
  BaselineParams<float> params;
  TrainingLog log;
};

BaselineModel train_baseline(std::span<const Bag> train, const BaselineConfig& config);

// One record per bag; the single "sample" is the predicted distribution and
// certainty is not assessed.
std::vector<PredictionRecord> evaluate_baseline(BaselineModel& model, std::span<const Bag> bags);

}  // namespace mexd
