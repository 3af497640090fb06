#pragma once
// Run configuration as JSON. Every section and key is optional and defaults
// to the values below; unknown keys and out-of-range values are rejected.
//
//   {
//     "seed": 0,
//     "synthetic": {"num_classes", "embedding_dim", "instances_min",
//                   "instances_max", "positive_fraction",
//                   "cluster_separation", "noise_std", "train_bags",
//                   "test_bags"},
//     "model":     {"heads", "ff_width", "denoiser_hidden", "time_dim"},
//     "ratios":    {"alpha0", "alpha1"},
//     "stage1":    {"epochs", "lr0", "weight_decay"},
//     "stage2":    {"epochs", "lr0"},
//     "training":  {"batch_size", "grad_clip", "eval_every"},
//     "diffusion": {"steps", "beta_min", "beta_max", "stride", "n_samples",
//                   "use_prior"},
//     "uncertainty": {"alpha"}
//   }
//
// beta_max = 0 selects the smallest value meeting the schedule endpoint
// condition.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "mexd/synthetic_mil.hpp"
#include "mexd/training.hpp"

namespace mexd {

inline constexpr const char* kArtifactVersion = "0.1.0";

struct RunConfig {
  SynthSpec synthetic;
  int train_bags = 300;
  int test_bags = 100;
  TrainConfig train;
  double test_alpha = 0.05;

  RngSeed seed() const { return train.seed; }
  void set_seed(RngSeed s);
};

RunConfig default_run_config();

RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RunConfig& c);

// Reads a JSON file; an empty path yields the defaults. MEXD_SEED, when set,
// overrides the seed afterwards.
RunConfig load_run_config(const std::filesystem::path& path);
void apply_env_overrides(RunConfig& c);

// 16 hex digits of FNV-1a over the canonical JSON form.
std::string config_hash(const RunConfig& c);

// {"config_hash", "seed", "artifact_version"}
nlohmann::json reproducibility_stamp(const RunConfig& c);

// "a,b,cxd,e" -> every (alpha0, alpha1) in {a,b,c} x {d,e}, alpha0 outer.
std::vector<SamplingRatios> parse_ratio_grid(const std::string& grid);

}  // namespace mexd
