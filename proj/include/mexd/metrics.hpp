#pragma once
// Classification metrics, posterior-sample aggregation and t-test based
// certainty.

#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mexd/core_types.hpp"

namespace mexd {

struct PredictionRecord {
  std::string bag_id;
  std::vector<ClassVector> samples;  // posterior draws f0'
  ClassVector mean;                  // sample mean
  int point_prediction = 0;          // argmax of mean
  int true_label = 0;
  bool certain = false;
  double p_value = 1.0;
};

struct SampleSummary {
  ClassVector mean;
  int prediction = 0;
};

// Arithmetic mean of the samples and its argmax (lowest index on ties).
SampleSummary aggregate_samples(std::span<const ClassVector> samples);

struct ClassBreakdown {
  int label = 0;
  int support = 0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::optional<double> auc;  // absent when the class has no positives or no negatives
};

struct MetricReport {
  double f1_macro = 0.0;
  double accuracy = 0.0;
  double auc_macro = 0.0;
  std::optional<double> pavpu;
  std::size_t count = 0;
  std::vector<ClassBreakdown> per_class;
};

// Area under the ROC curve via the Mann-Whitney statistic; tied scores take
// their midrank. Throws DomainError when either class is empty.
double binary_auc(std::span<const double> scores, std::span<const int> is_positive);

// Macro F1, accuracy and one-vs-rest macro AUC (scores are the per-class
// sample means). With two classes the AUC is that of class 1. Throws
// DomainError when fewer than two distinct true labels are present.
MetricReport classification_metrics(std::span<const PredictionRecord> records);

struct TTestResult {
  bool certain = false;
  double p_value = 1.0;
  double t_statistic = 0.0;
  double mean_difference = 0.0;
  int first = 0;   // top class by sample mean
  int second = 0;  // runner-up
  bool degenerate = false;  // variance below 1e-12; decided on |mean| > 1e-9
};

// Two-sided one-sample t-test of mean(d) = 0 with n - 1 degrees of freedom.
TTestResult one_sample_ttest(std::span<const double> differences, double alpha = 0.05);

// d_i = s_i[c1] - s_i[c2] for the top-2 classes of the sample mean.
std::vector<double> top2_differences(std::span<const ClassVector> samples, int* first = nullptr,
                                     int* second = nullptr);

// Paired test on the top-2 class probabilities across posterior samples.
TTestResult ttest_certainty(std::span<const ClassVector> samples, double alpha = 0.05);

// (accurate and certain + inaccurate and uncertain) / total.
double pavpu(std::span<const PredictionRecord> records);

struct QQTable {
  std::string bag_id;
  bool degenerate = false;                        // constant differences, no table
  std::vector<std::pair<double, double>> points;  // (theoretical, empirical)
};

// Sorted standardised differences against standard-normal quantiles at
// plotting positions (i - 0.5) / n. Needs n >= 10.
QQTable qq_from_differences(std::span<const double> differences, std::string bag_id = {});
QQTable qq_export(const PredictionRecord& record);

// Fills mean, point_prediction, certain and p_value from the samples.
PredictionRecord make_record(std::string bag_id, std::vector<ClassVector> samples, int true_label,
                             double alpha = 0.05);

}  // namespace mexd
