#include "mexd/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>

namespace mexd {

SampleSummary aggregate_samples(std::span<const ClassVector> samples) {
  if (samples.empty()) throw DomainError("aggregate_samples: no samples");
  const std::size_t k = samples.front().size();
  std::vector<double> mean(k, 0.0);
  for (const auto& s : samples) {
    if (s.size() != k) throw ShapeError("aggregate_samples: sample lengths differ");
    for (std::size_t i = 0; i < k; ++i) mean[i] += s[i];
  }
  for (double& m : mean) m /= static_cast<double>(samples.size());
  SampleSummary out;
  out.prediction = argmax(mean);
  out.mean = ClassVector(std::move(mean));
  return out;
}

double binary_auc(std::span<const double> scores, std::span<const int> is_positive) {
  if (scores.size() != is_positive.size()) throw ShapeError("binary_auc: length mismatch");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t q = i; q <= j; ++q) rank[order[q]] = mid;
    i = j + 1;
  }
  double pos = 0.0;
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (is_positive[i]) {
      pos += 1.0;
      rank_sum += rank[i];
    }
  }
  const double neg = static_cast<double>(n) - pos;
  if (pos == 0.0 || neg == 0.0) throw DomainError("binary_auc: needs both positives and negatives");
  return (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

MetricReport classification_metrics(std::span<const PredictionRecord> records) {
  if (records.empty()) throw DomainError("classification_metrics: no records");
  const int k = static_cast<int>(records.front().mean.size());
  std::set<int> labels;
  for (const auto& r : records) {
    if (static_cast<int>(r.mean.size()) != k) throw ShapeError("records disagree on class count");
    if (r.true_label < 0 || r.true_label >= k) throw DomainError("record label out of range");
    labels.insert(r.true_label);
  }
  if (labels.size() < 2) throw DomainError("AUC undefined: only one class present in truth");

  MetricReport rep;
  rep.count = records.size();
  std::size_t correct = 0;
  for (const auto& r : records) correct += r.point_prediction == r.true_label ? 1 : 0;
  rep.accuracy = static_cast<double>(correct) / static_cast<double>(records.size());

  double f1_sum = 0.0;
  for (int c = 0; c < k; ++c) {
    ClassBreakdown b;
    b.label = c;
    int tp = 0, fp = 0, fn = 0;
    std::vector<double> scores;
    std::vector<int> pos;
    for (const auto& r : records) {
      const bool truth = r.true_label == c;
      const bool pred = r.point_prediction == c;
      tp += truth && pred;
      fp += !truth && pred;
      fn += truth && !pred;
      b.support += truth;
      scores.push_back(r.mean[static_cast<std::size_t>(c)]);
      pos.push_back(truth ? 1 : 0);
    }
    b.precision = tp + fp > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
    b.recall = tp + fn > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
    b.f1 = b.precision + b.recall > 0 ? 2.0 * b.precision * b.recall / (b.precision + b.recall) : 0.0;
    if (b.support > 0 && b.support < static_cast<int>(records.size())) {
      b.auc = binary_auc(scores, pos);
    }
    f1_sum += b.f1;
    rep.per_class.push_back(b);
  }
  rep.f1_macro = f1_sum / k;

  if (k == 2) {
    rep.auc_macro = *rep.per_class[1].auc;
  } else {
    double s = 0.0;
    int n = 0;
    for (const auto& b : rep.per_class) {
      if (b.auc) {
        s += *b.auc;
        ++n;
      }
    }
    rep.auc_macro = s / n;
  }
  return rep;
}

TTestResult one_sample_ttest(std::span<const double> d, double alpha) {
  const std::size_t n = d.size();
  if (n < 2) throw DomainError("t-test needs at least 2 samples");
  const double mean = std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(n);
  double ss = 0.0;
  for (double x : d) ss += (x - mean) * (x - mean);
  const double var = ss / static_cast<double>(n - 1);
  TTestResult out;
  out.mean_difference = mean;
  if (var < 1e-12) {
    out.degenerate = true;
    out.certain = std::abs(mean) > 1e-9;
    out.p_value = out.certain ? 0.0 : 1.0;
    out.t_statistic = out.certain ? std::copysign(INFINITY, mean) : 0.0;
    return out;
  }
  out.t_statistic = mean / std::sqrt(var / static_cast<double>(n));
  boost::math::students_t dist(static_cast<double>(n - 1));
  out.p_value = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(out.t_statistic)));
  out.certain = out.p_value < alpha;
  return out;
}

std::vector<double> top2_differences(std::span<const ClassVector> samples, int* first, int* second) {
  const SampleSummary s = aggregate_samples(samples);
  const std::size_t k = s.mean.size();
  if (k < 2) throw DomainError("top-2 differences need at least 2 classes");
  const int c1 = s.prediction;
  int c2 = c1 == 0 ? 1 : 0;
  for (std::size_t c = 0; c < k; ++c) {
    if (static_cast<int>(c) == c1) continue;
    if (s.mean[c] > s.mean[static_cast<std::size_t>(c2)]) c2 = static_cast<int>(c);
  }
  if (first) *first = c1;
  if (second) *second = c2;
  std::vector<double> d;
  d.reserve(samples.size());
  for (const auto& v : samples) d.push_back(v[static_cast<std::size_t>(c1)] - v[static_cast<std::size_t>(c2)]);
  return d;
}

TTestResult ttest_certainty(std::span<const ClassVector> samples, double alpha) {
  if (samples.size() < 2) throw DomainError("ttest_certainty needs at least 2 samples");
  int c1 = 0, c2 = 0;
  const std::vector<double> d = top2_differences(samples, &c1, &c2);
  TTestResult r = one_sample_ttest(d, alpha);
  r.first = c1;
  r.second = c2;
  return r;
}

double pavpu(std::span<const PredictionRecord> records) {
  if (records.empty()) throw DomainError("pavpu: no records");
  std::size_t good = 0;
  for (const auto& r : records) {
    const bool accurate = r.point_prediction == r.true_label;
    good += (accurate && r.certain) || (!accurate && !r.certain);
  }
  return static_cast<double>(good) / static_cast<double>(records.size());
}

QQTable qq_from_differences(std::span<const double> d, std::string bag_id) {
  const std::size_t n = d.size();
  if (n < 10) throw DomainError("qq_export needs at least 10 samples");
  QQTable out;
  out.bag_id = std::move(bag_id);
  const double mean = std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(n);
  double ss = 0.0;
  for (double x : d) ss += (x - mean) * (x - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  if (sd * sd < 1e-12) {
    out.degenerate = true;
    return out;
  }
  std::vector<double> z(d.begin(), d.end());
  for (double& x : z) x = (x - mean) / sd;
  std::sort(z.begin(), z.end());
  const boost::math::normal normal;
  out.points.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double p = (static_cast<double>(i) + 0.5) / static_cast<double>(n);
    out.points.emplace_back(boost::math::quantile(normal, p), z[i]);
  }
  return out;
}

QQTable qq_export(const PredictionRecord& record) {
  return qq_from_differences(top2_differences(record.samples), record.bag_id);
}

PredictionRecord make_record(std::string bag_id, std::vector<ClassVector> samples, int true_label,
                             double alpha) {
  PredictionRecord r;
  r.bag_id = std::move(bag_id);
  const SampleSummary s = aggregate_samples(samples);
  r.mean = s.mean;
  r.point_prediction = s.prediction;
  r.true_label = true_label;
  if (samples.size() >= 2) {
    const TTestResult t = ttest_certainty(samples, alpha);
    r.certain = t.certain;
    r.p_value = t.p_value;
  }
  r.samples = std::move(samples);
  return r;
}

}  // namespace mexd
