#include "mexd/dyn_moe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mexd {

RouteResult route_from_probabilities(const MatrixD& probs, int expert_index) {
  if (probs.cols() != 2) throw ShapeError("router probabilities must be N x 2");
  RouteResult out;
  const int eta = expert_index == 0 ? 0 : 1;
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    const bool argmax_is_one = probs(i, 1) >= probs(i, 0);
    if (argmax_is_one == (eta == 1)) {
      out.indices.push_back(static_cast<int>(i));
      out.scores.push_back(probs(i, eta));
    }
  }
  return out;
}

int topk_count(int n, double alpha) {
  if (n <= 0) return 0;
  // The small slack keeps e.g. 0.1 * 30 from rounding up to 4.
  const int k = static_cast<int>(std::ceil(alpha * n - 1e-9));
  return std::clamp(k, 1, n);
}

std::vector<int> topk_filter(std::span<const double> scores, double alpha) {
  const int n = static_cast<int>(scores.size());
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
  });
  order.resize(static_cast<std::size_t>(topk_count(n, alpha)));
  return order;
}

Eigen::RowVectorXd fused_latent(const std::vector<ExpertInsight>& insights) {
  if (insights.empty()) throw ShapeError("fused_latent: no insights");
  Eigen::RowVectorXd z = Eigen::RowVectorXd::Zero(insights.front().latent.size());
  for (const auto& ins : insights) {
    if (ins.latent.size() != z.size()) throw ShapeError("fused_latent: latent widths differ");
    z += ins.confidence * ins.latent;
  }
  return z;
}

namespace {
double ce(const ClassVector& target, const ClassVector& q) {
  double loss = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    if (target[i] != 0.0) loss -= target[i] * std::log(std::max(q[i], 1e-12));
  }
  return loss;
}
}  // namespace

double moe_loss(const ClassVector& f0, const MoEOutput& output) {
  const int classes = static_cast<int>(f0.size());
  const ClassVector target = validate_probability(f0);
  const int label = argmax(target);
  if (target[static_cast<std::size_t>(label)] != 1.0) {
    throw ValidationError("moe_loss: f0 must be one-hot");
  }
  if (static_cast<int>(output.expert_predictions.size()) != classes ||
      static_cast<int>(output.prior.size()) != classes) {
    throw ShapeError("moe_loss: prediction count does not match f0");
  }
  double loss = ce(target, validate_probability(output.prior));
  loss += ce(one_hot(0, classes), validate_probability(output.expert_predictions[0]));
  for (int r = 1; r < classes; ++r) {
    if (r != label) continue;  // lambda_r = 0
    loss += ce(one_hot(r, classes),
               validate_probability(output.expert_predictions[static_cast<std::size_t>(r)]));
  }
  return loss;
}

}  // namespace mexd
