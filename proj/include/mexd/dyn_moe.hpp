#pragma once
// Dynamic mixture-of-experts aggregator.
//
// One negative expert (index 0) and K positive experts. Each expert owns a
// 2-way router over adapted instances: expert 0 takes instances whose router
// argmax is 0, positive experts take argmax 1 (a 0.5/0.5 tie counts as 1).
// Each routed subset keeps its top max(1, ceil(alpha * N_r)) instances by
// router score. Router scores weight the retained rows inside each expert
// and scale them in the sparse bag, which is how the routers receive
// gradient; selection itself is not differentiated.
//
// Expert r summarises its retained rows by their score-weighted mean
// e_r = sum_i s_i l_i / sum_i s_i (the plain mean when scores are equal),
// classifies it with a (K+1)-way linear+softmax head y_r, and reports
// confidence c_r = y_r[r]. An expert with no routed instances emits e_r = 0, c_r = 0 and
// a uniform y_r. Retained rows from all experts (duplicates kept) form the
// sparse bag, which is adapted together with a learned class token; the
// token's output feeds the prior head producing rho.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "mexd/adapter.hpp"
#include "mexd/core_types.hpp"
#include "mexd/nn.hpp"

namespace mexd {

struct SamplingRatios {
  double alpha0 = 0.25;  // negative expert
  double alpha1 = 0.5;   // every positive expert

  void validate() const {
    if (!(alpha0 > 0.0 && alpha0 <= 1.0) || !(alpha1 > 0.0 && alpha1 <= 1.0)) {
      throw ConfigError("sampling ratios must lie in (0,1]");
    }
  }
  double for_expert(int r) const { return r == 0 ? alpha0 : alpha1; }
};

struct RouteResult {
  std::vector<int> indices;   // selected instance indices, ascending
  std::vector<double> scores; // router probability at eta for each selected instance
};

// Selection from router probabilities (N x 2, rows sum to 1).
RouteResult route_from_probabilities(const MatrixD& probs, int expert_index);

// Size of the retained set for a routed subset of size n.
int topk_count(int n, double alpha);

// Positions (into `scores`) of the top-k entries, highest score first, ties
// broken by lower position.
std::vector<int> topk_filter(std::span<const double> scores, double alpha);

struct ExpertInsight {
  Eigen::RowVectorXd latent;  // e_r
  double confidence = 0.0;    // c_r
  int expert_index = 0;
};

struct RetainedInstance {
  int expert = 0;
  int index = 0;       // row in the original bag
  double score = 0.0;  // router score at eta
};

struct SparseBag {
  MatrixF instances;  // M x C, score-scaled adapted rows
  std::vector<RetainedInstance> sources;
  Eigen::Index size() const noexcept { return instances.rows(); }
};

struct MoEOutput {
  std::vector<ExpertInsight> insights;  // ordered by expert index
  ClassVector prior;                    // rho, probability-flagged
  SparseBag sparse_bag;
  std::vector<ClassVector> expert_predictions;  // y_r
  std::vector<RouteResult> routes;              // per-expert routing before top-k
};

// Confidence-weighted latent sum over experts: sum_r c_r e_r.
Eigen::RowVectorXd fused_latent(const std::vector<ExpertInsight>& insights);

// Stage-1 objective for one bag:
//   CE(f0, rho) + CE(onehot(0), y_0) + sum_{r>=1} [f0 == onehot(r)] CE(onehot(r), y_r)
// with log clamped at 1e-12. Throws ValidationError when a prediction is not
// a probability vector.
double moe_loss(const ClassVector& f0, const MoEOutput& output);

struct MoEConfig {
  int num_classes = 3;
  int width = 64;
  int heads = 4;
  int ff_width = 128;
};

template <class S>
struct MoEParams {
  MoEConfig config;
  AdapterParams<S> adapter1;  // before routing
  AdapterParams<S> adapter2;  // sparse bag + class token
  std::vector<nn::Linear<S>> routers;
  std::vector<nn::Linear<S>> experts;
  nn::Linear<S> prior_head;
  ag::Parameter<S> class_embedding;

  MoEParams() = default;
  explicit MoEParams(const MoEConfig& cfg)
      : config(cfg),
        adapter1("moe.adapter1", cfg.width, cfg.heads, cfg.ff_width),
        adapter2("moe.adapter2", cfg.width, cfg.heads, cfg.ff_width),
        prior_head("moe.prior_head", cfg.width, cfg.num_classes),
        class_embedding(nn::make_param<S>("moe.class_embedding", 1, cfg.width)) {
    for (int r = 0; r < cfg.num_classes; ++r) {
      routers.emplace_back("moe.router" + std::to_string(r), cfg.width, 2);
      experts.emplace_back("moe.expert" + std::to_string(r), cfg.width, cfg.num_classes);
    }
  }
  MoEParams(const MoEParams&) = default;
  MoEParams& operator=(const MoEParams&) = default;

  void init(Rng& rng) {
    adapter1.init(rng);
    adapter2.init(rng);
    for (auto& r : routers) r.init_xavier(rng);
    for (auto& e : experts) e.init_zero();
    prior_head.init_xavier(rng);
    std::normal_distribution<double> d(0.0, 0.02);
    for (Eigen::Index i = 0; i < class_embedding.value.size(); ++i) {
      class_embedding.value.data()[i] = static_cast<S>(d(rng));
    }
  }

  nn::ParamList<S> parameters() {
    nn::ParamList<S> ps = adapter1.parameters();
    for (auto* p : adapter2.parameters()) ps.push_back(p);
    for (auto& r : routers) r.collect(ps);
    for (auto& e : experts) e.collect(ps);
    prior_head.collect(ps);
    ps.push_back(&class_embedding);
    return ps;
  }
};

// Recorded forward pass; Vars stay valid while the Graph lives.
template <class S>
struct MoEForward {
  ag::Var<S> adapted;                      // N x C
  std::vector<ag::Var<S>> latents;         // e_r, 1 x C
  std::vector<ag::Var<S>> expert_probs;    // y_r, 1 x (K+1)
  std::vector<ag::Var<S>> confidences;     // c_r, 1 x 1
  std::optional<ag::Var<S>> sparse;        // M x C (absent when M = 0)
  ag::Var<S> prior;                        // rho, 1 x (K+1)
  std::vector<RouteResult> routes;
  std::vector<RetainedInstance> sources;
};

// Router probabilities (N x 2) for expert r on adapted instances.
template <class S>
ag::Var<S> router_probabilities(ag::Graph<S>& g, MoEParams<S>& params, ag::Var<S> adapted, int r) {
  return ag::softmax_rows(params.routers[static_cast<std::size_t>(r)](g, adapted));
}

// route() on plain matrices: selection for expert r over N x C instances.
template <class S>
RouteResult route(MoEParams<S>& params, const ag::Matrix<S>& instances, int expert_index) {
  ag::Graph<S> g;
  auto probs = router_probabilities(g, params, g.constant(instances), expert_index);
  return route_from_probabilities(probs.value().template cast<double>(), expert_index);
}

// e_r, y_r and c_r for expert r from its retained rows and their router
// scores (k x 1). An absent/empty input yields the empty-expert rule.
template <class S>
void expert_summarize(ag::Graph<S>& g, nn::Linear<S>& classifier, std::optional<ag::Var<S>> retained,
                      std::optional<ag::Var<S>> scores, int expert_index, int width, int num_classes,
                      ag::Var<S>& latent, ag::Var<S>& probs, ag::Var<S>& confidence) {
  if (!retained || retained->rows() == 0) {
    latent = g.constant(ag::Matrix<S>::Zero(1, width));
    probs = g.constant(ag::Matrix<S>::Constant(1, num_classes, S(1) / static_cast<S>(num_classes)));
    confidence = g.constant(ag::Matrix<S>::Zero(1, 1));
    return;
  }
  if (scores) {
    const auto k = static_cast<S>(retained->rows());
    auto inv = ag::unary(ag::sum_all(*scores), [](S v) { return S(1) / v; },
                         [](S v) { return S(-1) / (v * v); });
    latent = ag::mul_scalar(ag::scale(ag::mean_rows(ag::scale_rows(*retained, *scores)), k), inv);
  } else {
    latent = ag::mean_rows(*retained);
  }
  probs = ag::softmax_rows(classifier(g, latent));
  confidence = ag::element(probs, 0, expert_index);
}

template <class S>
MoEForward<S> aggregate(ag::Graph<S>& g, MoEParams<S>& params, ag::Var<S> instances,
                        const SamplingRatios& ratios) {
  ratios.validate();
  const int classes = params.config.num_classes;
  const int width = params.config.width;
  MoEForward<S> out;
  out.adapted = adapt(g, params.adapter1, instances);

  std::vector<ag::Var<S>> sparse_parts;
  for (int r = 0; r < classes; ++r) {
    const int eta = r == 0 ? 0 : 1;
    ag::Var<S> probs = router_probabilities(g, params, out.adapted, r);
    RouteResult routed = route_from_probabilities(probs.value().template cast<double>(), r);
    std::optional<ag::Var<S>> retained;
    std::optional<ag::Var<S>> weights;
    if (!routed.indices.empty()) {
      std::vector<int> keep_pos = topk_filter(routed.scores, ratios.for_expert(r));
      std::vector<int> keep;
      keep.reserve(keep_pos.size());
      for (int p : keep_pos) {
        const auto pi = static_cast<std::size_t>(p);
        keep.push_back(routed.indices[pi]);
        out.sources.push_back(RetainedInstance{r, routed.indices[pi], routed.scores[pi]});
      }
      retained = ag::gather_rows(out.adapted, keep);
      weights = ag::gather_rows(ag::slice_cols(probs, eta, 1), keep);
      sparse_parts.push_back(ag::scale_rows(*retained, *weights));
    }
    out.routes.push_back(std::move(routed));
    ag::Var<S> e, y, c;
    expert_summarize(g, params.experts[static_cast<std::size_t>(r)], retained, weights, r, width,
                     classes, e, y, c);
    out.latents.push_back(e);
    out.expert_probs.push_back(y);
    out.confidences.push_back(c);
  }
  if (!sparse_parts.empty()) out.sparse = ag::concat_rows(sparse_parts);
  ag::Var<S> token = adapt_with_class_token(g, params.adapter2, out.sparse,
                                            g.param(params.class_embedding));
  out.prior = ag::softmax_rows(params.prior_head(g, token));
  return out;
}

template <class S>
ClassVector row_to_class_vector(const ag::Matrix<S>& m, bool probability) {
  std::vector<double> v(static_cast<std::size_t>(m.cols()));
  for (Eigen::Index j = 0; j < m.cols(); ++j) v[static_cast<std::size_t>(j)] = static_cast<double>(m(0, j));
  return ClassVector(std::move(v), probability);
}

template <class S>
MoEOutput to_output(const MoEForward<S>& f) {
  MoEOutput out;
  for (std::size_t r = 0; r < f.latents.size(); ++r) {
    ExpertInsight ins;
    ins.latent = f.latents[r].value().row(0).template cast<double>();
    ins.confidence = static_cast<double>(f.confidences[r].scalar());
    ins.expert_index = static_cast<int>(r);
    out.insights.push_back(std::move(ins));
    out.expert_predictions.push_back(row_to_class_vector<S>(f.expert_probs[r].value(), true));
  }
  out.prior = row_to_class_vector<S>(f.prior.value(), true);
  if (f.sparse) out.sparse_bag.instances = f.sparse->value().template cast<float>();
  else out.sparse_bag.instances.resize(0, f.adapted.cols());
  out.sparse_bag.sources = f.sources;
  out.routes = f.routes;
  return out;
}

// Evaluation-mode aggregation of one bag.
template <class S>
MoEOutput aggregate(MoEParams<S>& params, const Bag& bag, const SamplingRatios& ratios) {
  validate_bag(bag, params.config.num_classes, params.config.width);
  ag::Graph<S> g;
  auto f = aggregate(g, params, g.constant(bag.instances.template cast<S>()), ratios);
  return to_output(f);
}

// Recorded stage-1 loss for one bag with label `label`.
template <class S>
ag::Var<S> moe_loss(ag::Graph<S>& g, int label, const MoEForward<S>& f) {
  const int classes = static_cast<int>(f.expert_probs.size());
  auto target = [classes](int k) {
    ag::Matrix<S> t = ag::Matrix<S>::Zero(1, classes);
    t(0, k) = S(1);
    return t;
  };
  ag::Var<S> loss = ag::cross_entropy(target(label), f.prior);
  loss = ag::add(loss, ag::cross_entropy(target(0), f.expert_probs[0]));
  if (label >= 1) {
    loss = ag::add(loss, ag::cross_entropy(target(label), f.expert_probs[static_cast<std::size_t>(label)]));
  }
  (void)g;
  return loss;
}

}  // namespace mexd
