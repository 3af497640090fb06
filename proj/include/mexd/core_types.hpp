#pragma once
// Shared domain types for bag-level (multiple-instance) classification.
//
// Labels are dense integers 0..K; 0 is the negative class and also the index
// of the negative expert. A dataset with K positive subtypes therefore has
// K+1 classes.

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace mexd {

using MatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// ---------------------------------------------------------------------------
// Errors. Every error carries a short machine-readable kind used by the CLI.
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

class DomainError : public Error {
 public:
  explicit DomainError(const std::string& m) : Error("domain", m) {}
};

class ValidationError : public Error {
 public:
  ValidationError(const std::string& m, std::ptrdiff_t index = -1)
      : Error("validation", m), index_(index) {}
  // Offending element, or -1 when the error is not tied to one entry.
  std::ptrdiff_t index() const noexcept { return index_; }

 private:
  std::ptrdiff_t index_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& m) : Error("config", m) {}
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& m) : Error("shape", m) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& m, std::string kind = "io") : Error(std::move(kind), m) {}
};

class BadMagicError : public IoError {
 public:
  explicit BadMagicError(const std::string& m) : IoError(m, "bad_magic") {}
};

class CrcMismatchError : public IoError {
 public:
  explicit CrcMismatchError(const std::string& m) : IoError(m, "crc_mismatch") {}
};

class TruncatedError : public IoError {
 public:
  explicit TruncatedError(const std::string& m) : IoError(m, "truncated") {}
};

class TrainingError : public Error {
 public:
  explicit TrainingError(const std::string& m) : Error("training", m) {}
};

// ---------------------------------------------------------------------------
// Value types
// ---------------------------------------------------------------------------

struct RngSeed {
  std::uint64_t value = 0;
  friend bool operator==(RngSeed, RngSeed) = default;
};

// A point in R^(K+1): one-hot labels, prior predictions, diffusion states.
class ClassVector {
 public:
  ClassVector() = default;
  explicit ClassVector(std::vector<double> values, bool probability = false);

  std::size_t size() const noexcept { return values_.size(); }
  double operator[](std::size_t i) const { return values_[i]; }
  std::span<const double> values() const noexcept { return values_; }
  bool is_probability() const noexcept { return probability_; }

  friend bool operator==(const ClassVector&, const ClassVector&) = default;

 private:
  std::vector<double> values_;
  bool probability_ = false;
};

struct Bag {
  MatrixF instances;  // N x C
  int label = 0;
  std::string bag_id;

  Eigen::Index size() const noexcept { return instances.rows(); }
  Eigen::Index dim() const noexcept { return instances.cols(); }
};

struct ManifestEntry {
  std::string bag_id;
  std::filesystem::path file;  // relative to the dataset directory
  int label = 0;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  int class_count = 0;
  int embedding_dim = 0;
};

// Vector with 1.0 at `label`. Throws DomainError when label is out of range.
ClassVector one_hot(int label, int num_classes);

// Returns `v` flagged as a probability vector. Throws ValidationError naming
// the offending index when an entry lies outside [0,1], or index -1 when
// only the sum is off by more than 1e-6.
ClassVector validate_probability(const ClassVector& v);

// Index of the largest entry, lowest index on ties.
int argmax(std::span<const double> values);
inline int argmax(const ClassVector& v) { return argmax(v.values()); }

// Throws ValidationError unless N >= 1, all entries finite, label in
// [0, num_classes) and (when expected_dim > 0) C == expected_dim.
void validate_bag(const Bag& bag, int num_classes, int expected_dim = 0);

// Throws ValidationError on duplicate ids or out-of-range labels; when
// `root` is non-empty also requires every referenced file to exist.
void validate_manifest(const DatasetManifest& manifest,
                       const std::filesystem::path& root = {});

}  // namespace mexd
