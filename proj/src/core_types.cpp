#include "mexd/core_types.hpp"

#include <cmath>
#include <numeric>
#include <unordered_set>

namespace mexd {

ClassVector::ClassVector(std::vector<double> values, bool probability)
    : values_(std::move(values)), probability_(probability) {}

ClassVector one_hot(int label, int num_classes) {
  if (num_classes < 1 || label < 0 || label >= num_classes) {
    throw DomainError("label " + std::to_string(label) + " out of range for " +
                      std::to_string(num_classes) + " classes");
  }
  std::vector<double> v(static_cast<std::size_t>(num_classes), 0.0);
  v[static_cast<std::size_t>(label)] = 1.0;
  return ClassVector(std::move(v), true);
}

ClassVector validate_probability(const ClassVector& v) {
  if (v.size() == 0) throw ValidationError("empty class vector");
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double x = v[i];
    if (!std::isfinite(x) || x < 0.0 || x > 1.0) {
      throw ValidationError("entry " + std::to_string(i) + " = " + std::to_string(x) +
                                " outside [0,1]",
                            static_cast<std::ptrdiff_t>(i));
    }
  }
  const double sum = std::accumulate(v.values().begin(), v.values().end(), 0.0);
  if (std::abs(sum - 1.0) > 1e-6) {
    throw ValidationError("entries sum to " + std::to_string(sum) + ", not 1");
  }
  return ClassVector(std::vector<double>(v.values().begin(), v.values().end()), true);
}

int argmax(std::span<const double> values) {
  if (values.empty()) throw DomainError("argmax of empty vector");
  int best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  }
  return best;
}

void validate_bag(const Bag& bag, int num_classes, int expected_dim) {
  if (bag.instances.rows() < 1) {
    throw ValidationError("bag '" + bag.bag_id + "' has no instances");
  }
  if (bag.instances.cols() < 1) {
    throw ValidationError("bag '" + bag.bag_id + "' has zero embedding width");
  }
  if (expected_dim > 0 && bag.instances.cols() != expected_dim) {
    throw ValidationError("bag '" + bag.bag_id + "' has width " +
                          std::to_string(bag.instances.cols()) + ", expected " +
                          std::to_string(expected_dim));
  }
  if (!bag.instances.allFinite()) {
    throw ValidationError("bag '" + bag.bag_id + "' contains non-finite values");
  }
  if (bag.label < 0 || bag.label >= num_classes) {
    throw ValidationError("bag '" + bag.bag_id + "' label " + std::to_string(bag.label) +
                          " out of range");
  }
}

void validate_manifest(const DatasetManifest& manifest, const std::filesystem::path& root) {
  if (manifest.class_count < 2) throw ValidationError("manifest needs at least 2 classes");
  if (manifest.embedding_dim < 1) throw ValidationError("manifest embedding_dim must be >= 1");
  std::unordered_set<std::string> seen;
  for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
    const auto& e = manifest.entries[i];
    if (!seen.insert(e.bag_id).second) {
      throw ValidationError("duplicate bag_id '" + e.bag_id + "'", static_cast<std::ptrdiff_t>(i));
    }
    if (e.label < 0 || e.label >= manifest.class_count) {
      throw ValidationError("bag '" + e.bag_id + "' label out of range",
                            static_cast<std::ptrdiff_t>(i));
    }
    if (!root.empty() && !std::filesystem::exists(root / e.file)) {
      throw ValidationError("missing bag file " + (root / e.file).string(),
                            static_cast<std::ptrdiff_t>(i));
    }
  }
}

}  // namespace mexd
