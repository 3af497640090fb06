// mexd: synthetic data generation, two-stage training, evaluation and
// prediction from the command line.
//
// Failures print one line to stderr:
//   error kind=<kind> command=<subcommand> message="<text>"
// and exit 1 (2 for usage errors). Outputs are written via temporaries and
// anything a failed run created is removed.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "mexd/baselines.hpp"
#include "mexd/config.hpp"
#include "mexd/io.hpp"
#include "mexd/metrics.hpp"
#include "mexd/synthetic_mil.hpp"
#include "mexd/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mexd;

namespace {

// Remembers paths a command created so they can be removed on failure.
class Outputs {
 public:
  void claim(const fs::path& p) {
    if (!p.empty() && !fs::exists(p)) created_.push_back(p);
  }
  void rollback() {
    for (auto it = created_.rbegin(); it != created_.rend(); ++it) {
      std::error_code ec;
      fs::remove_all(*it, ec);
    }
    created_.clear();
  }

 private:
  std::vector<fs::path> created_;
};

std::string quote(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c == '\n' ? ' ' : c;
  }
  return out;
}

// A dataset root written by `gen` holds train/ and test/; a directory with
// its own manifest.json is used as is.
fs::path resolve_split(const fs::path& data, const std::string& split) {
  if (fs::exists(data / "manifest.json")) return data;
  if (fs::exists(data / split / "manifest.json")) return data / split;
  throw IoError("no manifest.json in " + data.string() + " or " + (data / split).string());
}

RunConfig config_or_default(const std::string& path) { return load_run_config(path); }

void write_jsonl(std::ostream& os, const LogRecord& r, const json& stamp) {
  json j = {{"stage", r.stage}, {"epoch", r.epoch}, {"loss", r.loss}, {"lr", r.lr}};
  j["eval_accuracy"] = r.eval_accuracy ? json(*r.eval_accuracy) : json(nullptr);
  j["stamp"] = stamp;
  os << j.dump() << "\n";
  os.flush();
}

struct Args {
  std::string spec, config, data, out, moe, ckpt, report, bag, grid, log, records, qq, split;
  int samples = 0;
  int seeds = 1;
  bool verbose = false;
};

int cmd_gen(const Args& a, Outputs& outs) {
  const RunConfig cfg = config_or_default(a.spec);
  const fs::path out = a.out;
  outs.claim(out);
  const json stamp = reproducibility_stamp(cfg);
  const auto train = generate_split(cfg.synthetic, cfg.train_bags, 0, "train");
  const auto test = generate_split(cfg.synthetic, cfg.test_bags, 1ULL << 32, "test");
  outs.claim(out / "train");
  write_dataset(out / "train", train, stamp);
  outs.claim(out / "test");
  write_dataset(out / "test", test, stamp);
  std::cout << json({{"train_bags", train.bags.size()}, {"test_bags", test.bags.size()}, {"out", out.string()},
                     {"stamp", stamp}})
                   .dump()
            << "\n";
  return 0;
}

fs::path log_path_for(const Args& a) {
  if (!a.log.empty()) return a.log;
  fs::path p = a.out;
  p += ".log.jsonl";
  return p;
}

int cmd_train_moe(const Args& a, Outputs& outs) {
  const RunConfig cfg = config_or_default(a.config);
  const auto train = load_dataset(resolve_split(a.data, "train"));
  std::vector<Bag> heldout;
  if (!fs::exists(fs::path(a.data) / "manifest.json") && fs::exists(fs::path(a.data) / "test" / "manifest.json")) {
    heldout = load_dataset(fs::path(a.data) / "test");
  }
  const json stamp = reproducibility_stamp(cfg);
  const fs::path log = log_path_for(a);
  outs.claim(log);
  std::ofstream logf(log);
  if (!logf) throw IoError("cannot write " + log.string());
  auto res = train_stage1(train, cfg.train, heldout, [&](const LogRecord& r) {
    write_jsonl(logf, r, stamp);
    spdlog::info("stage1 epoch {} loss {:.6f} lr {:.3e}", r.epoch, r.loss, r.lr);
  });
  Model m{cfg.train, res.params, DenoiserParams<float>(cfg.train.denoiser)};
  outs.claim(a.out);
  write_checkpoint(a.out, make_checkpoint(cfg, m, "moe", cfg.train.stage1.epochs));
  std::cout << json({{"checkpoint", a.out}, {"final_loss", res.log.epochs.back().loss}, {"stamp", stamp}}).dump()
            << "\n";
  return 0;
}

int cmd_train_diff(const Args& a, Outputs& outs) {
  const RunConfig cfg = config_or_default(a.config);
  const Checkpoint moe_ck = read_checkpoint(a.moe);
  Model m = load_model(moe_ck, nullptr, config_hash(cfg));
  const auto train = load_dataset(resolve_split(a.data, "train"));
  const json stamp = reproducibility_stamp(cfg);
  const fs::path log = log_path_for(a);
  outs.claim(log);
  std::ofstream logf(log);
  if (!logf) throw IoError("cannot write " + log.string());
  auto res = train_stage2(train, m.moe, cfg.train, [&](const LogRecord& r) {
    write_jsonl(logf, r, stamp);
    spdlog::info("stage2 epoch {} loss {:.6f} lr {:.3e}", r.epoch, r.loss, r.lr);
  });
  if (res.moe_hash_before != res.moe_hash_after) throw TrainingError("stage-1 parameters changed during stage 2");
  m.config = cfg.train;
  m.denoiser = std::move(res.params);
  outs.claim(a.out);
  write_checkpoint(a.out, make_checkpoint(cfg, m, "diffusion", cfg.train.stage2.epochs));
  std::cout << json({{"checkpoint", a.out}, {"final_loss", res.log.epochs.back().loss}, {"stamp", stamp}}).dump()
            << "\n";
  return 0;
}

// Model from a diffusion checkpoint; evaluation-time settings (samples,
// stride, test alpha, seed) come from `cfg` when a config path was given.
Model load_for_inference(const std::string& ckpt_path, const std::string& config_path, RunConfig& cfg) {
  const Checkpoint ck = read_checkpoint(ckpt_path);
  if (ck.stage != "diffusion") throw ConfigError(ckpt_path + " is a stage-1 checkpoint; run train-diff first");
  RunConfig stored;
  Model m = load_model(ck, &stored, config_path.empty() ? std::string() : config_hash(cfg));
  if (config_path.empty()) {
    cfg = stored;
    apply_env_overrides(cfg);
  }
  m.config.seed = cfg.train.seed;
  m.config.diffusion.n_samples = cfg.train.diffusion.n_samples;
  m.config.diffusion.stride = cfg.train.diffusion.stride;
  return m;
}

int cmd_eval(const Args& a, Outputs& outs) {
  RunConfig cfg = config_or_default(a.config);
  Model m = load_for_inference(a.ckpt, a.config, cfg);
  const auto bags = load_dataset(resolve_split(a.data, a.split.empty() ? "test" : a.split));
  const auto records = evaluate(m, bags, cfg.test_alpha);
  MetricReport rep = classification_metrics(records);
  rep.pavpu = pavpu(records);
  json j = to_json(rep);
  j["alpha"] = cfg.test_alpha;
  j["n_samples"] = m.config.diffusion.n_samples;
  j["stamp"] = reproducibility_stamp(cfg);
  outs.claim(a.report);
  write_text_atomic(a.report, j.dump(2) + "\n");
  if (!a.records.empty()) {
    outs.claim(a.records);
    write_text_atomic(a.records, records_tsv(records));
  }
  if (!a.qq.empty()) {
    std::vector<QQTable> tables;
    for (const auto& r : records) tables.push_back(qq_export(r));
    outs.claim(a.qq);
    write_text_atomic(a.qq, qq_tsv(tables));
  }
  std::cout << json({{"accuracy", rep.accuracy}, {"f1_macro", rep.f1_macro}, {"auc_macro", rep.auc_macro},
                     {"pavpu", *rep.pavpu}, {"report", a.report}})
                   .dump()
            << "\n";
  return 0;
}

int cmd_predict(const Args& a, Outputs&) {
  RunConfig cfg = config_or_default(a.config);
  Model m = load_for_inference(a.ckpt, a.config, cfg);
  if (a.samples > 0) m.config.diffusion.n_samples = a.samples;
  Bag bag{read_bag(a.bag), 0, fs::path(a.bag).stem().string()};
  validate_bag(bag, m.config.moe.num_classes, m.config.moe.width);
  const PredictionRecord r = predict(m, bag, cfg.test_alpha);
  json mean = json::array();
  for (double v : r.mean.values()) mean.push_back(v);
  std::cout << json({{"bag_id", r.bag_id}, {"label", r.point_prediction}, {"p_value", r.p_value},
                     {"certain", r.certain}, {"mean", mean}, {"n_samples", r.samples.size()},
                     {"stamp", reproducibility_stamp(cfg)}})
                   .dump()
            << "\n";
  return 0;
}

int cmd_export_scores(const Args& a, Outputs& outs) {
  const Checkpoint ck = read_checkpoint(a.ckpt);
  RunConfig cfg;
  Model m = load_model(ck, &cfg);
  const auto bags = load_dataset(resolve_split(a.data, a.split.empty() ? "test" : a.split));
  std::string csv = "# config_hash=" + ck.config_hash + " seed=" + std::to_string(ck.seed) +
                    " artifact_version=" + kArtifactVersion + "\n";
  csv += router_scores_csv(m.moe, bags, cfg.train.ratios);
  outs.claim(a.out);
  write_text_atomic(a.out, csv);
  std::cout << json({{"out", a.out}, {"bags", bags.size()}}).dump() << "\n";
  return 0;
}

int cmd_sweep_alpha(const Args& a, Outputs& outs) {
  const RunConfig base = config_or_default(a.config);
  const auto grid = parse_ratio_grid(a.grid);
  const auto train = load_dataset(resolve_split(a.data, "train"));
  const auto test = load_dataset(resolve_split(a.data, "test"));
  std::ostringstream os;
  os << "# config_hash=" << config_hash(base) << " seed=" << base.seed().value
     << " artifact_version=" << kArtifactVersion << "\n";
  os << "alpha0\talpha1\tseed\taccuracy\tf1_macro\tauc_macro\tpavpu\tmean_sparse_fraction\n";
  for (const SamplingRatios& r : grid) {
    for (int s = 0; s < a.seeds; ++s) {
      RunConfig cfg = base;
      cfg.train.ratios = r;
      cfg.set_seed(RngSeed{base.seed().value + static_cast<std::uint64_t>(s)});
      auto s1 = train_stage1(train, cfg.train);
      auto s2 = train_stage2(train, s1.params, cfg.train);
      Model m{cfg.train, s1.params, s2.params};
      const auto records = evaluate(m, test, cfg.test_alpha);
      const MetricReport rep = classification_metrics(records);
      double frac = 0.0;
      for (const Bag& b : test) {
        frac += static_cast<double>(aggregate(m.moe, b, r).sparse_bag.size()) / static_cast<double>(b.size());
      }
      os << r.alpha0 << '\t' << r.alpha1 << '\t' << cfg.seed().value << '\t' << rep.accuracy << '\t'
         << rep.f1_macro << '\t' << rep.auc_macro << '\t' << pavpu(records) << '\t'
         << frac / static_cast<double>(test.size()) << "\n";
      spdlog::info("alpha ({}, {}) seed {} acc {:.4f}", r.alpha0, r.alpha1, cfg.seed().value, rep.accuracy);
    }
  }
  if (a.out.empty()) {
    std::cout << os.str();
  } else {
    outs.claim(a.out);
    write_text_atomic(a.out, os.str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_default_logger(spdlog::stderr_color_mt("mexd"));
  CLI::App app{"mexd: expert-routed diffusion classifier for multiple-instance bags"};
  app.require_subcommand(1);
  Args a;
  app.add_flag("-v,--verbose", a.verbose, "Debug logging");

  auto* gen = app.add_subcommand("gen", "Generate a synthetic dataset (train/ and test/)");
  gen->add_option("--spec", a.spec, "Run config JSON (synthetic section used)");
  gen->add_option("--out", a.out, "Output directory")->required();

  auto* tm = app.add_subcommand("train-moe", "Stage 1: train the expert aggregator");
  tm->add_option("--config", a.config, "Run config JSON");
  tm->add_option("--data", a.data, "Dataset directory")->required();
  tm->add_option("--out", a.out, "Checkpoint path")->required();
  tm->add_option("--log", a.log, "Training log (default <out>.log.jsonl)");

  auto* td = app.add_subcommand("train-diff", "Stage 2: train the denoiser on a frozen aggregator");
  td->add_option("--config", a.config, "Run config JSON");
  td->add_option("--data", a.data, "Dataset directory")->required();
  td->add_option("--moe", a.moe, "Stage-1 checkpoint")->required();
  td->add_option("--out", a.out, "Checkpoint path")->required();
  td->add_option("--log", a.log, "Training log (default <out>.log.jsonl)");

  auto* ev = app.add_subcommand("eval", "Metrics incl. PAvPU on a dataset");
  ev->add_option("--config", a.config, "Run config JSON");
  ev->add_option("--data", a.data, "Dataset directory")->required();
  ev->add_option("--ckpt", a.ckpt, "Stage-2 checkpoint")->required();
  ev->add_option("--report", a.report, "Report path (JSON)")->required();
  ev->add_option("--records", a.records, "Per-bag records (TSV)");
  ev->add_option("--qq", a.qq, "Q-Q tables of top-2 differences (TSV)");
  ev->add_option("--split", a.split, "Split under a generated dataset root (default test)");

  auto* pr = app.add_subcommand("predict", "Label and p-value for one bag file");
  pr->add_option("--config", a.config, "Run config JSON");
  pr->add_option("--ckpt", a.ckpt, "Stage-2 checkpoint")->required();
  pr->add_option("--bag", a.bag, "Bag file (.mexb)")->required();
  pr->add_option("--samples", a.samples, "Posterior samples")->check(CLI::PositiveNumber);

  auto* ex = app.add_subcommand("export-scores", "Per-instance router scores as CSV");
  ex->add_option("--ckpt", a.ckpt, "Checkpoint")->required();
  ex->add_option("--data", a.data, "Dataset directory")->required();
  ex->add_option("--out", a.out, "CSV path")->required();
  ex->add_option("--split", a.split, "Split under a generated dataset root (default test)");

  auto* sw = app.add_subcommand("sweep-alpha", "Train and evaluate over a grid of sampling ratios");
  sw->add_option("--config", a.config, "Run config JSON");
  sw->add_option("--data", a.data, "Dataset root with train/ and test/")->required();
  sw->add_option("--grid", a.grid, "alpha0 list x alpha1 list, e.g. \"0.1,0.25,0.5x0.25,0.5,0.75\"")->required();
  sw->add_option("--seeds", a.seeds, "Seeds per cell")->check(CLI::PositiveNumber);
  sw->add_option("--out", a.out, "Results table (TSV, default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error kind=usage command=" << (argc > 1 ? argv[1] : "") << " message=\"" << quote(e.what())
              << "\"\n";
    std::cerr << app.help();
    return 2;
  }

  spdlog::set_level(a.verbose ? spdlog::level::debug : spdlog::level::info);
  spdlog::set_pattern("[%l] %v");
  auto* sub = app.get_subcommands().front();
  const std::string name = sub->get_name();
  Outputs outs;
  try {
    if (name == "gen") return cmd_gen(a, outs);
    if (name == "train-moe") return cmd_train_moe(a, outs);
    if (name == "train-diff") return cmd_train_diff(a, outs);
    if (name == "eval") return cmd_eval(a, outs);
    if (name == "predict") return cmd_predict(a, outs);
    if (name == "export-scores") return cmd_export_scores(a, outs);
    if (name == "sweep-alpha") return cmd_sweep_alpha(a, outs);
  } catch (const Error& e) {
    outs.rollback();
    std::cerr << "error kind=" << e.kind() << " command=" << name << " message=\"" << quote(e.what()) << "\"\n";
    return 1;
  } catch (const std::exception& e) {
    outs.rollback();
    std::cerr << "error kind=internal command=" << name << " message=\"" << quote(e.what()) << "\"\n";
    return 1;
  }
  return 1;
}
