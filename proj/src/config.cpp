#include "mexd/config.hpp"

#include <cstdio>
#include <cerrno>
#include <cstdlib>
#include <fstream>
#include <set>
#include <type_traits>

namespace mexd {

using nlohmann::json;

namespace {

// Reads typed, range-checked fields out of one JSON object and rejects any
// key that was not consumed.
class Section {
 public:
  Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ConfigError(name_ + ": expected an object");
  }

  template <class T>
  void read(const char* key, T& out, T lo, T hi) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    T v{};
    try {
      if constexpr (std::is_integral_v<T>) {
        if (!it->is_number_integer()) throw ConfigError("");
        if (std::is_unsigned_v<T> && !it->is_number_unsigned() && it->template get<std::int64_t>() < 0) {
          throw ConfigError("");
        }
      } else {
        if (!it->is_number()) throw ConfigError("");
      }
      v = it->template get<T>();
    } catch (const std::exception&) {
      throw ConfigError(path(key) + ": wrong type");
    }
    if (!(v >= lo && v <= hi)) {
      throw ConfigError(path(key) + ": value out of range [" + std::to_string(lo) + ", " +
                        std::to_string(hi) + "]");
    }
    out = v;
  }

  void read_bool(const char* key, bool& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    if (!it->is_boolean()) throw ConfigError(path(key) + ": expected true or false");
    out = it->get<bool>();
  }

  const json* child(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError("unknown key " + path(it.key().c_str()));
    }
  }

 private:
  std::string path(const char* key) const { return name_.empty() ? key : name_ + "." + key; }

  const json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

constexpr int kIntMax = 1 << 30;

}  // namespace

void RunConfig::set_seed(RngSeed s) {
  train.seed = s;
  synthetic.seed = s;
}

RunConfig default_run_config() {
  RunConfig c;
  c.train.diffusion.beta_max = 0.0;
  return c;
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c = default_run_config();
  Section root(j, "");
  std::uint64_t seed = 0;
  {
    root.read<std::uint64_t>("seed", seed, 0, UINT64_MAX);
    c.set_seed(RngSeed{seed});
  }
  if (const json* s = root.child("synthetic")) {
    Section sec(*s, "synthetic");
    SynthSpec& sp = c.synthetic;
    sec.read("num_classes", sp.num_classes, 2, 64);
    sec.read("embedding_dim", sp.embedding_dim, 1, 4096);
    sec.read("instances_min", sp.instances_min, 1, kIntMax);
    sec.read("instances_max", sp.instances_max, 1, kIntMax);
    sec.read("positive_fraction", sp.positive_fraction, 1e-9, 1.0);
    sec.read("cluster_separation", sp.cluster_separation, 0.0, 1e6);
    sec.read("noise_std", sp.noise_std, 1e-9, 1e6);
    sec.read("train_bags", c.train_bags, 1, kIntMax);
    sec.read("test_bags", c.test_bags, 1, kIntMax);
    sec.finish();
  }
  if (const json* s = root.child("model")) {
    Section sec(*s, "model");
    sec.read("heads", c.train.moe.heads, 1, 64);
    sec.read("ff_width", c.train.moe.ff_width, 1, 1 << 16);
    sec.read("denoiser_hidden", c.train.denoiser.hidden, 1, 1 << 16);
    sec.read("time_dim", c.train.denoiser.time_dim, 2, 4096);
    sec.finish();
  }
  if (const json* s = root.child("ratios")) {
    Section sec(*s, "ratios");
    sec.read("alpha0", c.train.ratios.alpha0, 1e-9, 1.0);
    sec.read("alpha1", c.train.ratios.alpha1, 1e-9, 1.0);
    sec.finish();
  }
  if (const json* s = root.child("stage1")) {
    Section sec(*s, "stage1");
    sec.read("epochs", c.train.stage1.epochs, 1, kIntMax);
    sec.read("lr0", c.train.stage1.lr0, 1e-12, 10.0);
    sec.read("weight_decay", c.train.stage1.weight_decay, 0.0, 10.0);
    sec.finish();
  }
  if (const json* s = root.child("stage2")) {
    Section sec(*s, "stage2");
    sec.read("epochs", c.train.stage2.epochs, 1, kIntMax);
    sec.read("lr0", c.train.stage2.lr0, 1e-12, 10.0);
    sec.finish();
  }
  if (const json* s = root.child("training")) {
    Section sec(*s, "training");
    sec.read("batch_size", c.train.batch_size, 1, kIntMax);
    sec.read("grad_clip", c.train.grad_clip, 0.0, 1e12);
    sec.read("eval_every", c.train.eval_every, 0, kIntMax);
    sec.finish();
  }
  if (const json* s = root.child("diffusion")) {
    Section sec(*s, "diffusion");
    DiffusionOptions& d = c.train.diffusion;
    sec.read("steps", d.steps, 1, 100000);
    sec.read("beta_min", d.beta_min, 1e-12, 0.999);
    sec.read("beta_max", d.beta_max, 0.0, 0.999);
    sec.read("stride", d.stride, 1, 100000);
    sec.read("n_samples", d.n_samples, 1, 1000000);
    sec.read_bool("use_prior", d.use_prior);
    sec.finish();
  }
  if (const json* s = root.child("uncertainty")) {
    Section sec(*s, "uncertainty");
    sec.read("alpha", c.test_alpha, 1e-12, 0.5);
    sec.finish();
  }
  root.finish();

  validate(c.synthetic);
  c.train.moe.num_classes = c.synthetic.num_classes;
  c.train.moe.width = c.synthetic.embedding_dim;
  c.train.denoiser.num_classes = c.synthetic.num_classes;
  c.train.denoiser.width = c.synthetic.embedding_dim;
  c.train.validate();
  if (c.train.diffusion.beta_max > 0.0 && c.train.diffusion.beta_max < c.train.diffusion.beta_min) {
    throw ConfigError("diffusion.beta_max must be 0 (auto) or >= beta_min");
  }
  schedule_for(c.train.diffusion);  // endpoint check
  return c;
}

json to_json(const RunConfig& c) {
  const SynthSpec& sp = c.synthetic;
  const TrainConfig& t = c.train;
  json j;
  j["seed"] = t.seed.value;
  j["synthetic"] = {{"num_classes", sp.num_classes},
                    {"embedding_dim", sp.embedding_dim},
                    {"instances_min", sp.instances_min},
                    {"instances_max", sp.instances_max},
                    {"positive_fraction", sp.positive_fraction},
                    {"cluster_separation", sp.cluster_separation},
                    {"noise_std", sp.noise_std},
                    {"train_bags", c.train_bags},
                    {"test_bags", c.test_bags}};
  j["model"] = {{"heads", t.moe.heads},
                {"ff_width", t.moe.ff_width},
                {"denoiser_hidden", t.denoiser.hidden},
                {"time_dim", t.denoiser.time_dim}};
  j["ratios"] = {{"alpha0", t.ratios.alpha0}, {"alpha1", t.ratios.alpha1}};
  j["stage1"] = {{"epochs", t.stage1.epochs}, {"lr0", t.stage1.lr0}, {"weight_decay", t.stage1.weight_decay}};
  j["stage2"] = {{"epochs", t.stage2.epochs}, {"lr0", t.stage2.lr0}};
  j["training"] = {{"batch_size", t.batch_size}, {"grad_clip", t.grad_clip}, {"eval_every", t.eval_every}};
  j["diffusion"] = {{"steps", t.diffusion.steps},
                    {"beta_min", t.diffusion.beta_min},
                    {"beta_max", t.diffusion.beta_max},
                    {"stride", t.diffusion.stride},
                    {"n_samples", t.diffusion.n_samples},
                    {"use_prior", t.diffusion.use_prior}};
  j["uncertainty"] = {{"alpha", c.test_alpha}};
  return j;
}

void apply_env_overrides(RunConfig& c) {
  const char* env = std::getenv("MEXD_SEED");
  if (!env || !*env) return;
  char* end = nullptr;
  errno = 0;
  const unsigned long long v = std::strtoull(env, &end, 10);
  if (errno != 0 || *end != '\0' || env[0] == '-') {
    throw ConfigError(std::string("MEXD_SEED is not an unsigned integer: ") + env);
  }
  c.set_seed(RngSeed{static_cast<std::uint64_t>(v)});
}

RunConfig load_run_config(const std::filesystem::path& path) {
  RunConfig c = default_run_config();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path.string());
    json j;
    try {
      j = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError("config " + path.string() + ": " + e.what());
    }
    c = run_config_from_json(j);
  }
  apply_env_overrides(c);
  return c;
}

std::string config_hash(const RunConfig& c) {
  const std::string s = to_json(c).dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

json reproducibility_stamp(const RunConfig& c) {
  return {{"config_hash", config_hash(c)}, {"seed", c.seed().value}, {"artifact_version", kArtifactVersion}};
}

}  // namespace mexd

namespace mexd {

std::vector<SamplingRatios> parse_ratio_grid(const std::string& grid) {
  const auto x = grid.find('x');
  if (x == std::string::npos || grid.find('x', x + 1) != std::string::npos) {
    throw ConfigError("grid must look like \"a0,a0,...xa1,a1,...\"");
  }
  auto parse_list = [](const std::string& s) {
    std::vector<double> out;
    std::size_t pos = 0;
    while (pos <= s.size()) {
      const auto comma = std::min(s.find(',', pos), s.size());
      const std::string item = s.substr(pos, comma - pos);
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(item, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (item.empty() || used != item.size()) throw ConfigError("grid: bad number '" + item + "'");
      out.push_back(v);
      pos = comma + 1;
    }
    return out;
  };
  std::vector<SamplingRatios> out;
  for (double a0 : parse_list(grid.substr(0, x))) {
    for (double a1 : parse_list(grid.substr(x + 1))) {
      SamplingRatios r{a0, a1};
      r.validate();
      out.push_back(r);
    }
  }
  return out;
}

}  // namespace mexd
