#pragma once
// Synthetic bags with controllable positive-instance scarcity.
//
// Class k has an isotropic Gaussian cluster with mean separation * e_k (the
// k-th unit vector of the embedding space). A negative bag draws every
// instance from cluster 0; a bag of positive class k draws
// max(1, round(positive_fraction * N)) instances from cluster k and the rest
// from cluster 0, then shuffles them.
//
// Per-bag seeds are derive_seed(spec.seed, stream + bag index), see rng.hpp.

#include <cstdint>
#include <string>
#include <vector>

#include "mexd/core_types.hpp"

namespace mexd {

struct SynthSpec {
  int num_classes = 3;  // K + 1
  int embedding_dim = 64;
  int instances_min = 32;
  int instances_max = 96;
  double positive_fraction = 0.1;
  double cluster_separation = 8.0;
  double noise_std = 1.0;
  RngSeed seed{0};
};

// Throws ConfigError on a degenerate spec.
void validate(const SynthSpec& spec);

// Number of positive-cluster instances in a positive bag of size n.
int positive_count(const SynthSpec& spec, int n);

// Cluster mean of class k.
Eigen::RowVectorXd cluster_mean(const SynthSpec& spec, int k);

Bag generate_bag(const SynthSpec& spec, int label, RngSeed seed, std::string bag_id = "bag");

struct SyntheticDataset {
  DatasetManifest manifest;
  std::vector<Bag> bags;  // same order as manifest.entries
};

// (K+1) * bags_per_class bags, labels cycling 0..K.
SyntheticDataset generate_dataset(const SynthSpec& spec, int bags_per_class);

// `total` bags with labels i mod (K+1), seeded from stream `stream_offset + i`
// so that disjoint offsets give independent splits. Ids are
// "<prefix>_<5-digit index>".
SyntheticDataset generate_split(const SynthSpec& spec, int total, std::uint64_t stream_offset,
                                const std::string& prefix);

// Nearest-mean label oracle: assigns each instance to its nearest cluster
// mean and returns the positive class holding the most instances (lowest
// index on ties), or 0 when every instance is nearest the negative cluster.
int oracle_label(const Bag& bag, const SynthSpec& spec);

// Per-instance nearest cluster index.
std::vector<int> nearest_clusters(const Bag& bag, const SynthSpec& spec);

}  // namespace mexd
