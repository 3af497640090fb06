#include <doctest.h>

#include <filesystem>
#include <sstream>

#include <spdlog/sinks/ringbuffer_sink.h>
#include <spdlog/spdlog.h>

#include "mexd/io.hpp"
#include "mexd/rng.hpp"

using namespace mexd;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("mexd_io_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

MatrixF random_instances(int n, int c, std::uint64_t seed) {
  Rng rng = make_rng(RngSeed{seed});
  MatrixF m(n, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(standard_normal(rng));
  return m;
}

RunConfig small_run_config() {
  RunConfig c = default_run_config();
  c.synthetic.embedding_dim = 8;
  c.train.moe = MoEConfig{3, 8, 2, 16};
  c.train.denoiser = DenoiserConfig{3, 8, 16, 8};
  c.train.diffusion.steps = 20;
  return c;
}

Model random_model(const RunConfig& c) {
  Model m{c.train, MoEParams<float>(c.train.moe), DenoiserParams<float>(c.train.denoiser)};
  Rng rng = make_rng(RngSeed{7});
  m.moe.init(rng);
  m.moe.adapter1.perturb_residuals(rng, 0.1);
  m.denoiser.init(rng);
  return m;
}

template <class T>
void put_le(Bytes& b, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

}  // namespace

TEST_SUITE("io") {
  TEST_CASE("bag round trip is bit-identical") {
    TempDir dir("bag");
    const MatrixF x = random_instances(13, 5, 1);
    write_bag(dir.path / "a.mexb", x);
    const MatrixF y = read_bag(dir.path / "a.mexb");
    CHECK(y.rows() == 13);
    CHECK(y.cols() == 5);
    CHECK(std::memcmp(x.data(), y.data(), sizeof(float) * 65) == 0);
    write_bag(dir.path / "b.mexb", y);
    CHECK(read_file(dir.path / "a.mexb") == read_file(dir.path / "b.mexb"));
    CHECK_FALSE(fs::exists(dir.path / "a.mexb.partial"));
  }

  TEST_CASE("bag layout") {
    MatrixF x(1, 2);
    x << 1.0f, -2.0f;
    const Bytes b = encode_bag(x);
    REQUIRE(b.size() == 4 + 2 + 4 + 4 + 8 + 4);
    CHECK(std::string(b.begin(), b.begin() + 4) == "MEXB");
    CHECK(b[4] == kBagFormatVersion);
    CHECK(b[5] == 0);
    CHECK(b[6] == 1);
    CHECK(b[10] == 2);
    // 1.0f little-endian.
    CHECK(b[14] == 0x00);
    CHECK(b[17] == 0x3f);
    const std::uint32_t crc = crc32_of(b.data() + 14, 8);
    CHECK(b[22] == (crc & 0xff));
    CHECK(b[25] == (crc >> 24));
  }

  TEST_CASE("bag corruption is detected") {
    const Bytes good = encode_bag(random_instances(4, 3, 2));
    Bytes flipped = good;
    flipped[20] ^= 0x01;
    CHECK_THROWS_AS(decode_bag(flipped), CrcMismatchError);
    Bytes truncated(good.begin(), good.end() - 3);
    CHECK_THROWS_AS(decode_bag(truncated), TruncatedError);
    Bytes magic = good;
    magic[0] = 'X';
    CHECK_THROWS_AS(decode_bag(magic), BadMagicError);
    Bytes version = good;
    version[4] = 9;
    CHECK_THROWS_AS(decode_bag(version), IoError);
    Bytes trailing = good;
    trailing.push_back(0);
    CHECK_THROWS_AS(decode_bag(trailing), IoError);
    CHECK_THROWS_AS(encode_bag(MatrixF(0, 3)), ValidationError);
  }

  TEST_CASE("an empty bag file is a validation error") {
    Bytes b{'M', 'E', 'X', 'B'};
    put_le<std::uint16_t>(b, kBagFormatVersion);
    put_le<std::uint32_t>(b, 0);
    put_le<std::uint32_t>(b, 4);
    put_le<std::uint32_t>(b, crc32_of(nullptr, 0));
    CHECK_THROWS_AS(decode_bag(b), ValidationError);
    TempDir dir("empty");
    write_file_atomic(dir.path / "e.mexb", b);
    CHECK_THROWS_AS(read_bag(dir.path / "e.mexb"), ValidationError);
    CHECK_THROWS_AS(read_bag(dir.path / "missing.mexb"), IoError);
  }

  TEST_CASE("checkpoint round trip is byte-identical") {
    const RunConfig cfg = small_run_config();
    Model m = random_model(cfg);
    const Checkpoint ck = make_checkpoint(cfg, m, "diffusion", 12);
    const Bytes a = encode_checkpoint(ck);
    const Checkpoint back = decode_checkpoint(a);
    CHECK(back.stage == "diffusion");
    CHECK(back.epoch == 12);
    CHECK(back.config_hash == config_hash(cfg));
    CHECK(encode_checkpoint(back) == a);

    TempDir dir("ckpt");
    write_checkpoint(dir.path / "m.ckpt", ck);
    write_checkpoint(dir.path / "n.ckpt", read_checkpoint(dir.path / "m.ckpt"));
    CHECK(read_file(dir.path / "m.ckpt") == read_file(dir.path / "n.ckpt"));

    Model loaded = load_model(back);
    CHECK(nn::hash_params(loaded.moe.parameters()) == nn::hash_params(m.moe.parameters()));
    CHECK(nn::hash_params(loaded.denoiser.parameters()) == nn::hash_params(m.denoiser.parameters()));
    Model again = load_model(decode_checkpoint(encode_checkpoint(make_checkpoint(cfg, loaded, "diffusion", 12))));
    CHECK(encode_checkpoint(make_checkpoint(cfg, again, "diffusion", 12)) == a);
  }

  TEST_CASE("checkpoint corruption is detected") {
    const RunConfig cfg = small_run_config();
    Model m = random_model(cfg);
    const Bytes good = encode_checkpoint(make_checkpoint(cfg, m, "moe", 1));
    Bytes flipped = good;
    flipped[good.size() / 2] ^= 0x10;
    CHECK_THROWS_AS(decode_checkpoint(flipped), CrcMismatchError);
    Bytes manifest_flip = good;
    manifest_flip[20] ^= 0x01;
    CHECK_THROWS_AS(decode_checkpoint(manifest_flip), IoError);
    CHECK_THROWS_AS(decode_checkpoint(Bytes(good.begin(), good.begin() + 40)), TruncatedError);
    Bytes magic = good;
    magic[3] = 'B';
    CHECK_THROWS_AS(decode_checkpoint(magic), BadMagicError);
  }

  TEST_CASE("stage moe stores only the aggregator") {
    const RunConfig cfg = small_run_config();
    Model m = random_model(cfg);
    const Checkpoint ck = make_checkpoint(cfg, m, "moe", 3);
    for (const auto& t : ck.tensors) CHECK(t.name.rfind("moe.", 0) == 0);
    CHECK_THROWS_AS(make_checkpoint(cfg, m, "other", 3), DomainError);
    Checkpoint missing = ck;
    missing.tensors.pop_back();
    CHECK_THROWS_AS(load_model(missing), ShapeError);
  }

  TEST_CASE("config hash mismatch is logged") {
    const RunConfig cfg = small_run_config();
    Model m = random_model(cfg);
    const Checkpoint ck = make_checkpoint(cfg, m, "moe", 1);
    auto sink = std::make_shared<spdlog::sinks::ringbuffer_sink_mt>(16);
    auto logger = spdlog::default_logger();
    logger->sinks().push_back(sink);
    load_model(ck, nullptr, config_hash(cfg));
    CHECK(sink->last_formatted().empty());
    load_model(ck, nullptr, "0000000000000000");
    logger->sinks().pop_back();
    const auto lines = sink->last_formatted();
    REQUIRE(lines.size() == 1);
    CHECK(lines[0].find("config hash mismatch") != std::string::npos);
  }

  TEST_CASE("dataset round trip") {
    TempDir dir("ds");
    SynthSpec sp;
    sp.embedding_dim = 6;
    sp.instances_min = 3;
    sp.instances_max = 7;
    const SyntheticDataset ds = generate_split(sp, 9, 0, "d");
    write_dataset(dir.path, ds, nlohmann::json{{"seed", 0}});
    DatasetManifest m;
    const std::vector<Bag> bags = load_dataset(dir.path, &m);
    REQUIRE(bags.size() == 9);
    CHECK(m.class_count == 3);
    CHECK(m.embedding_dim == 6);
    for (std::size_t i = 0; i < bags.size(); ++i) {
      CHECK(bags[i].bag_id == ds.bags[i].bag_id);
      CHECK(bags[i].label == ds.bags[i].label);
      CHECK(bags[i].instances == ds.bags[i].instances);
    }
    fs::remove(dir.path / ds.manifest.entries[2].file);
    CHECK_THROWS_AS(load_dataset(dir.path), ValidationError);
  }

  TEST_CASE("report tables") {
    std::vector<PredictionRecord> recs;
    recs.push_back(make_record("x", {ClassVector({0.9, 0.1}), ClassVector({0.8, 0.2})}, 0));
    const std::string tsv = records_tsv(recs);
    CHECK(tsv.rfind("bag_id\ttrue_label\tprediction\tcertain\tp_value\tmean_0\tmean_1\n", 0) == 0);
    CHECK(tsv.find("\nx\t0\t0\t") != std::string::npos);

    MetricReport r;
    r.accuracy = 0.5;
    r.pavpu = 0.25;
    const auto j = to_json(r);
    for (const char* key : {"accuracy", "f1_macro", "auc_macro", "pavpu", "count", "per_class"}) {
      CHECK(j.contains(key));
    }
    CHECK(j["pavpu"].get<double>() == 0.25);

    QQTable flat;
    flat.bag_id = "f";
    flat.degenerate = true;
    const std::vector<QQTable> tables{flat};
    CHECK(qq_tsv(tables) == "bag_id\tdegenerate\ttheoretical\tempirical\nf\t1\t\t\n");
  }

  TEST_CASE("router score export") {
    const RunConfig cfg = small_run_config();
    Model m = random_model(cfg);
    const std::vector<Bag> bags{Bag{random_instances(5, 8, 3), 1, "r"}};
    const std::string csv = router_scores_csv(m.moe, bags, cfg.train.ratios);
    std::istringstream in(csv);
    std::string line;
    std::getline(in, line);
    CHECK(line == "bag_id,instance,expert,score,routed,retained");
    int rows = 0;
    int retained = 0;
    while (std::getline(in, line)) {
      ++rows;
      retained += line.back() == '1';
    }
    CHECK(rows == 15);
    const MoEOutput out = aggregate(m.moe, bags[0], cfg.train.ratios);
    CHECK(retained == static_cast<int>(out.sparse_bag.size()));
  }
}
