#pragma once
// Binary bag and checkpoint formats plus JSON dataset manifests. All
// integers and floats are little-endian.
//
// Bag file:
//   "MEXB" | u16 version | u32 N | u32 C | N*C f32 row-major | u32 crc32(payload)
//
// Checkpoint file:
//   "MEXC" | u16 version | u32 manifest bytes | manifest JSON
//          | u64 payload bytes | payload (f32 tensors, concatenated)
//          | u32 crc32(manifest JSON + payload)
//
// The checkpoint manifest holds stage, config_hash, epoch, seed, the
// embedded run config and a tensor catalog of {name, rows, cols, offset}
// with offsets in bytes from the start of the payload.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mexd/autograd.hpp"
#include "mexd/config.hpp"
#include "mexd/core_types.hpp"
#include "mexd/metrics.hpp"
#include "mexd/synthetic_mil.hpp"
#include "mexd/training.hpp"

namespace mexd {

inline constexpr std::uint16_t kBagFormatVersion = 1;
inline constexpr std::uint16_t kCheckpointFormatVersion = 1;

using Bytes = std::vector<std::uint8_t>;

std::uint32_t crc32_of(const std::uint8_t* data, std::size_t n);

Bytes encode_bag(const MatrixF& instances);
// Throws BadMagicError, TruncatedError, CrcMismatchError, IoError (version)
// or ValidationError (N = 0).
MatrixF decode_bag(const Bytes& bytes);

void write_bag(const std::filesystem::path& path, const MatrixF& instances);
MatrixF read_bag(const std::filesystem::path& path);

Bytes read_file(const std::filesystem::path& path);
// Writes to a sibling temporary and renames it into place.
void write_file_atomic(const std::filesystem::path& path, const Bytes& bytes);
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

struct CheckpointTensor {
  std::string name;
  MatrixF value;
};

struct Checkpoint {
  std::string stage;  // "moe" or "diffusion"
  std::string config_hash;
  int epoch = 0;
  std::uint64_t seed = 0;
  nlohmann::json config;  // RunConfig as JSON
  std::vector<CheckpointTensor> tensors;
};

Bytes encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const Bytes& bytes);
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

void capture_tensors(Checkpoint& ckpt, const nn::ParamList<float>& params);
// Copies tensors into parameters by name; throws ShapeError on a missing
// name or a shape mismatch.
void restore_tensors(const Checkpoint& ckpt, const nn::ParamList<float>& params);

// Checkpoint of a trained model. Stage "moe" stores the aggregator only,
// "diffusion" both networks.
Checkpoint make_checkpoint(const RunConfig& config, Model& model, const std::string& stage, int epoch);

// Rebuilds the model from an embedded config. Logs a warning when
// `expected_hash` is non-empty and differs from the stored hash.
Model load_model(const Checkpoint& ckpt, RunConfig* config_out = nullptr,
                 const std::string& expected_hash = {});

// Dataset directory: manifest.json plus bags/<id>.mexb.
void write_manifest(const std::filesystem::path& path, const DatasetManifest& m,
                    const nlohmann::json& stamp = nullptr);
DatasetManifest read_manifest(const std::filesystem::path& path);

void write_dataset(const std::filesystem::path& dir, const SyntheticDataset& ds,
                   const nlohmann::json& stamp = nullptr);
std::vector<Bag> load_dataset(const std::filesystem::path& dir, DatasetManifest* manifest_out = nullptr);

// Reports and tables.
nlohmann::json to_json(const MetricReport& r);
// bag_id, true_label, prediction, certain, p_value, mean_0..mean_K
std::string records_tsv(std::span<const PredictionRecord> records);
// bag_id, degenerate, theoretical, empirical (one row per point)
std::string qq_tsv(std::span<const QQTable> tables);
// bag_id, instance, expert, score, routed, retained; score is the router
// probability at the expert's target index for every instance.
std::string router_scores_csv(MoEParams<float>& moe, std::span<const Bag> bags,
                              const SamplingRatios& ratios);

}  // namespace mexd
