#include "mexd/synthetic_mil.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>

#include "mexd/rng.hpp"

namespace mexd {

void validate(const SynthSpec& spec) {
  if (spec.num_classes < 2) throw ConfigError("synth: num_classes must be >= 2");
  if (spec.embedding_dim < spec.num_classes) {
    throw ConfigError("synth: embedding_dim must be >= num_classes");
  }
  if (spec.instances_min < 2) throw ConfigError("synth: instances_min must be >= 2");
  if (spec.instances_min > spec.instances_max) {
    throw ConfigError("synth: instances_min > instances_max");
  }
  if (!(spec.positive_fraction > 0.0 && spec.positive_fraction <= 1.0)) {
    throw ConfigError("synth: positive_fraction must be in (0,1]");
  }
  if (!(spec.cluster_separation >= 0.0)) throw ConfigError("synth: cluster_separation < 0");
  if (!(spec.noise_std > 0.0)) throw ConfigError("synth: noise_std must be > 0");
}

int positive_count(const SynthSpec& spec, int n) {
  const int k = static_cast<int>(std::lround(spec.positive_fraction * n));
  return std::clamp(k, 1, n);
}

Eigen::RowVectorXd cluster_mean(const SynthSpec& spec, int k) {
  Eigen::RowVectorXd mu = Eigen::RowVectorXd::Zero(spec.embedding_dim);
  mu(k) = spec.cluster_separation;
  return mu;
}

Bag generate_bag(const SynthSpec& spec, int label, RngSeed seed, std::string bag_id) {
  validate(spec);
  if (label < 0 || label >= spec.num_classes) {
    throw DomainError("synth: label " + std::to_string(label) + " out of range");
  }
  Rng rng = make_rng(seed);
  std::uniform_int_distribution<int> size_dist(spec.instances_min, spec.instances_max);
  const int n = size_dist(rng);
  const int n_pos = label > 0 ? positive_count(spec, n) : 0;

  std::vector<int> cluster(static_cast<std::size_t>(n), 0);
  std::fill(cluster.begin(), cluster.begin() + n_pos, label);
  std::shuffle(cluster.begin(), cluster.end(), rng);

  std::normal_distribution<double> noise(0.0, spec.noise_std);
  Bag bag;
  bag.label = label;
  bag.bag_id = std::move(bag_id);
  bag.instances.resize(n, spec.embedding_dim);
  for (int i = 0; i < n; ++i) {
    for (int c = 0; c < spec.embedding_dim; ++c) {
      double x = noise(rng);
      if (c == cluster[static_cast<std::size_t>(i)]) x += spec.cluster_separation;
      bag.instances(i, c) = static_cast<float>(x);
    }
  }
  return bag;
}

SyntheticDataset generate_split(const SynthSpec& spec, int total, std::uint64_t stream_offset,
                                const std::string& prefix) {
  validate(spec);
  if (total < 1) throw ConfigError("synth: dataset needs at least one bag");
  SyntheticDataset ds;
  ds.manifest.class_count = spec.num_classes;
  ds.manifest.embedding_dim = spec.embedding_dim;
  ds.bags.reserve(static_cast<std::size_t>(total));
  for (int i = 0; i < total; ++i) {
    char id[64];
    std::snprintf(id, sizeof(id), "%s_%05d", prefix.c_str(), i);
    const int label = i % spec.num_classes;
    const RngSeed s = derive_seed(spec.seed, stream_offset + static_cast<std::uint64_t>(i));
    ds.bags.push_back(generate_bag(spec, label, s, id));
    ds.manifest.entries.push_back(ManifestEntry{id, std::string("bags/") + id + ".mexb", label});
  }
  return ds;
}

SyntheticDataset generate_dataset(const SynthSpec& spec, int bags_per_class) {
  if (bags_per_class < 1) throw ConfigError("synth: bags_per_class must be >= 1");
  return generate_split(spec, bags_per_class * spec.num_classes, 0, "bag");
}

std::vector<int> nearest_clusters(const Bag& bag, const SynthSpec& spec) {
  std::vector<int> out(static_cast<std::size_t>(bag.size()));
  std::vector<Eigen::RowVectorXd> means;
  for (int k = 0; k < spec.num_classes; ++k) means.push_back(cluster_mean(spec, k));
  for (Eigen::Index i = 0; i < bag.size(); ++i) {
    const Eigen::RowVectorXd x = bag.instances.row(i).cast<double>();
    int best = 0;
    double best_d = (x - means[0]).squaredNorm();
    for (int k = 1; k < spec.num_classes; ++k) {
      const double d = (x - means[static_cast<std::size_t>(k)]).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    out[static_cast<std::size_t>(i)] = best;
  }
  return out;
}

int oracle_label(const Bag& bag, const SynthSpec& spec) {
  std::vector<int> counts(static_cast<std::size_t>(spec.num_classes), 0);
  for (int k : nearest_clusters(bag, spec)) ++counts[static_cast<std::size_t>(k)];
  int best = 0;
  for (int k = 1; k < spec.num_classes; ++k) {
    if (counts[static_cast<std::size_t>(k)] > 0 &&
        (best == 0 || counts[static_cast<std::size_t>(k)] > counts[static_cast<std::size_t>(best)])) {
      best = k;
    }
  }
  return best;
}

}  // namespace mexd
