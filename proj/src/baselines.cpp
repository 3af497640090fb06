#include "mexd/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mexd/rng.hpp"

namespace mexd {

Pooling parse_pooling(const std::string& name) {
  if (name == "mean") return Pooling::kMean;
  if (name == "max") return Pooling::kMax;
  if (name == "attention") return Pooling::kAttention;
  throw ConfigError("unknown pooling '" + name + "' (mean, max, attention)");
}

std::string to_string(Pooling p) {
  switch (p) {
    case Pooling::kMean: return "mean";
    case Pooling::kMax: return "max";
    case Pooling::kAttention: return "attention";
  }
  return "?";
}

BaselineModel train_baseline(std::span<const Bag> train, const BaselineConfig& config) {
  if (train.empty()) throw DomainError("training set is empty");
  if (config.epochs < 1) throw ConfigError("epochs must be >= 1");
  for (const Bag& b : train) validate_bag(b, config.num_classes, config.width);

  BaselineModel m{BaselineParams<float>(config), {}};
  Rng rng = make_rng(derive_seed(config.seed, 0xba5e1ULL));
  m.params.init(rng);
  Rng order_rng = make_rng(derive_seed(config.seed, 0xba5e2ULL));
  const nn::ParamList<float> params = m.params.parameters();
  nn::AdamOptions opts;
  opts.weight_decay = config.weight_decay;
  nn::Adam<float> optim(params, opts);

  const auto total = static_cast<std::int64_t>(train.size()) * config.epochs;
  std::int64_t step = 0;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), order_rng);
    double epoch_loss = 0.0;
    double lr = 0.0;
    for (std::size_t i : order) {
      const Bag& bag = train[i];
      nn::zero_grads(params);
      ag::Graph<float> g;
      auto q = baseline_probs(g, m.params, g.constant(bag.instances));
      ag::Matrix<float> target = ag::Matrix<float>::Zero(1, config.num_classes);
      target(0, bag.label) = 1.0f;
      auto loss = ag::cross_entropy(target, q);
      g.backward(loss);
      lr = cosine_lr(step++, total, config.lr0);
      nn::clip_grad_norm(params, config.grad_clip);
      optim.step(lr);
      m.log.step_lrs.push_back(lr);
      epoch_loss += static_cast<double>(loss.scalar());
    }
    m.log.epochs.push_back(
        LogRecord{"baseline-" + to_string(config.pooling), epoch, epoch_loss / static_cast<double>(train.size()), lr, std::nullopt});
  }
  return m;
}

std::vector<PredictionRecord> evaluate_baseline(BaselineModel& model, std::span<const Bag> bags) {
  std::vector<PredictionRecord> out;
  out.reserve(bags.size());
  for (const Bag& b : bags) {
    ag::Graph<float> g;
    auto q = baseline_probs(g, model.params, g.constant(b.instances));
    std::vector<double> v(static_cast<std::size_t>(q.cols()));
    for (Eigen::Index j = 0; j < q.cols(); ++j) v[static_cast<std::size_t>(j)] = q.value()(0, j);
    out.push_back(make_record(b.bag_id, {ClassVector(std::move(v), true)}, b.label));
  }
  return out;
}

}  // namespace mexd
