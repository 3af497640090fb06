#include "mexd/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include <spdlog/spdlog.h>
#include <zlib.h>

namespace mexd {

namespace fs = std::filesystem;
using nlohmann::json;

std::uint32_t crc32_of(const std::uint8_t* data, std::size_t n) {
  uLong c = crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    c = crc32(c, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(c);
}

namespace {

template <class T>
void put(Bytes& out, T v) {
  static_assert(std::is_integral_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_floats(Bytes& out, const float* p, std::size_t n) {
  const std::size_t at = out.size();
  out.resize(at + 4 * n);
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(out.data() + at, p, 4 * n);
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      const auto u = std::bit_cast<std::uint32_t>(p[i]);
      for (int b = 0; b < 4; ++b) out[at + 4 * i + b] = static_cast<std::uint8_t>(u >> (8 * b));
    }
  }
}

class Reader {
 public:
  Reader(const Bytes& b, std::string what) : b_(b), what_(std::move(what)) {}

  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) throw TruncatedError(what_ + ": file truncated");
  }
  template <class T>
  T get() {
    need(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(b_[pos_ + i]) << (8 * i));
    pos_ += sizeof(T);
    return v;
  }
  void floats(float* dst, std::size_t n) {
    need(4 * n);
    if constexpr (std::endian::native == std::endian::little) {
      std::memcpy(dst, b_.data() + pos_, 4 * n);
    } else {
      for (std::size_t i = 0; i < n; ++i) {
        std::uint32_t u = 0;
        for (int k = 0; k < 4; ++k) u |= static_cast<std::uint32_t>(b_[pos_ + 4 * i + k]) << (8 * k);
        dst[i] = std::bit_cast<float>(u);
      }
    }
    pos_ += 4 * n;
  }
  void magic(const char* m) {
    need(4);
    if (std::memcmp(b_.data() + pos_, m, 4) != 0) throw BadMagicError(what_ + ": bad magic, expected " + m);
    pos_ += 4;
  }
  const std::uint8_t* here() const { return b_.data() + pos_; }
  void skip(std::size_t n) {
    need(n);
    pos_ += n;
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  const Bytes& b_;
  std::string what_;
  std::size_t pos_ = 0;
};

}  // namespace

Bytes encode_bag(const MatrixF& x) {
  if (x.rows() == 0) throw ValidationError("bag has no instances");
  Bytes out;
  out.reserve(18 + 4 * static_cast<std::size_t>(x.size()));
  out.insert(out.end(), {'M', 'E', 'X', 'B'});
  put<std::uint16_t>(out, kBagFormatVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(x.rows()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(x.cols()));
  const std::size_t at = out.size();
  put_floats(out, x.data(), static_cast<std::size_t>(x.size()));
  put<std::uint32_t>(out, crc32_of(out.data() + at, out.size() - at));
  return out;
}

MatrixF decode_bag(const Bytes& bytes) {
  Reader r(bytes, "bag");
  r.magic("MEXB");
  const auto version = r.get<std::uint16_t>();
  if (version != kBagFormatVersion) throw IoError("bag: unsupported format version " + std::to_string(version));
  const auto n = r.get<std::uint32_t>();
  const auto c = r.get<std::uint32_t>();
  if (n == 0) throw ValidationError("bag: N = 0");
  if (c == 0) throw ValidationError("bag: C = 0");
  const std::size_t count = static_cast<std::size_t>(n) * c;
  r.need(4 * count + 4);
  const std::uint32_t crc = crc32_of(r.here(), 4 * count);
  MatrixF x(n, c);
  r.floats(x.data(), count);
  if (r.get<std::uint32_t>() != crc) throw CrcMismatchError("bag: payload CRC mismatch");
  if (r.remaining() != 0) throw IoError("bag: trailing bytes after footer");
  return x;
}

void write_bag(const fs::path& path, const MatrixF& instances) {
  write_file_atomic(path, encode_bag(instances));
}

MatrixF read_bag(const fs::path& path) {
  try {
    return decode_bag(read_file(path));
  } catch (const Error& e) {
    if (e.kind() == "bad_magic") throw BadMagicError(path.string() + ": " + e.what());
    if (e.kind() == "crc_mismatch") throw CrcMismatchError(path.string() + ": " + e.what());
    if (e.kind() == "truncated") throw TruncatedError(path.string() + ": " + e.what());
    throw;
  }
}

Bytes read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return Bytes(std::istreambuf_iterator<char>(in), {});
}

void write_file_atomic(const fs::path& path, const Bytes& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".partial";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
      out.close();
      fs::remove(tmp);
      throw IoError("write failed for " + path.string());
    }
  }
  fs::rename(tmp, path);
}

void write_text_atomic(const fs::path& path, const std::string& text) {
  write_file_atomic(path, Bytes(text.begin(), text.end()));
}

Bytes encode_checkpoint(const Checkpoint& ck) {
  json cat = json::array();
  std::uint64_t offset = 0;
  for (const auto& t : ck.tensors) {
    cat.push_back({{"name", t.name}, {"rows", t.value.rows()}, {"cols", t.value.cols()}, {"offset", offset}});
    offset += 4 * static_cast<std::uint64_t>(t.value.size());
  }
  json m = {{"format", "mexd-checkpoint"},
            {"stage", ck.stage},
            {"config_hash", ck.config_hash},
            {"epoch", ck.epoch},
            {"seed", ck.seed},
            {"config", ck.config},
            {"catalog", cat}};
  const std::string text = m.dump();

  Bytes out;
  out.insert(out.end(), {'M', 'E', 'X', 'C'});
  put<std::uint16_t>(out, kCheckpointFormatVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
  const std::size_t body = out.size();
  out.insert(out.end(), text.begin(), text.end());
  Bytes payload;
  payload.reserve(static_cast<std::size_t>(offset));
  for (const auto& t : ck.tensors) put_floats(payload, t.value.data(), static_cast<std::size_t>(t.value.size()));
  put<std::uint64_t>(out, payload.size());
  out.insert(out.end(), payload.begin(), payload.end());
  // CRC covers the manifest text and the payload, not the length field.
  uLong c = crc32(0L, Z_NULL, 0);
  c = crc32(c, out.data() + body, static_cast<uInt>(text.size()));
  const std::uint32_t crc = static_cast<std::uint32_t>(
      crc32_combine(c, crc32_of(payload.data(), payload.size()), static_cast<z_off_t>(payload.size())));
  put<std::uint32_t>(out, crc);
  return out;
}

Checkpoint decode_checkpoint(const Bytes& bytes) {
  Reader r(bytes, "checkpoint");
  r.magic("MEXC");
  const auto version = r.get<std::uint16_t>();
  if (version != kCheckpointFormatVersion) {
    throw IoError("checkpoint: unsupported format version " + std::to_string(version));
  }
  const auto mlen = r.get<std::uint32_t>();
  r.need(mlen);
  const std::string text(reinterpret_cast<const char*>(r.here()), mlen);
  const std::uint32_t crc_m = crc32_of(r.here(), mlen);
  r.skip(mlen);
  const auto plen = r.get<std::uint64_t>();
  r.need(static_cast<std::size_t>(plen) + 4);
  const std::uint8_t* payload = r.here();
  const std::uint32_t crc = static_cast<std::uint32_t>(crc32_combine(
      crc_m, crc32_of(payload, static_cast<std::size_t>(plen)), static_cast<z_off_t>(plen)));
  r.skip(static_cast<std::size_t>(plen));
  if (r.get<std::uint32_t>() != crc) throw CrcMismatchError("checkpoint: CRC mismatch");
  if (r.remaining() != 0) throw IoError("checkpoint: trailing bytes after footer");

  json m;
  try {
    m = json::parse(text);
  } catch (const json::parse_error& e) {
    throw IoError(std::string("checkpoint: manifest is not valid JSON: ") + e.what());
  }
  Checkpoint ck;
  try {
    ck.stage = m.at("stage").get<std::string>();
    ck.config_hash = m.at("config_hash").get<std::string>();
    ck.epoch = m.at("epoch").get<int>();
    ck.seed = m.at("seed").get<std::uint64_t>();
    ck.config = m.at("config");
    Bytes pay(payload, payload + plen);
    for (const auto& e : m.at("catalog")) {
      CheckpointTensor t;
      t.name = e.at("name").get<std::string>();
      const auto rows = e.at("rows").get<Eigen::Index>();
      const auto cols = e.at("cols").get<Eigen::Index>();
      const auto off = e.at("offset").get<std::uint64_t>();
      const auto n = static_cast<std::uint64_t>(rows * cols);
      if (rows < 0 || cols < 0 || off + 4 * n > plen) throw IoError("checkpoint: tensor " + t.name + " out of bounds");
      t.value.resize(rows, cols);
      Reader tr(pay, "checkpoint");
      tr.skip(static_cast<std::size_t>(off));
      tr.floats(t.value.data(), static_cast<std::size_t>(n));
      ck.tensors.push_back(std::move(t));
    }
  } catch (const json::exception& e) {
    throw IoError(std::string("checkpoint: malformed manifest: ") + e.what());
  }
  return ck;
}

void write_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
  write_file_atomic(path, encode_checkpoint(ckpt));
}

Checkpoint read_checkpoint(const fs::path& path) { return decode_checkpoint(read_file(path)); }

void capture_tensors(Checkpoint& ckpt, const nn::ParamList<float>& params) {
  for (const auto* p : params) ckpt.tensors.push_back(CheckpointTensor{p->name, p->value});
}

void restore_tensors(const Checkpoint& ckpt, const nn::ParamList<float>& params) {
  for (auto* p : params) {
    auto it = std::find_if(ckpt.tensors.begin(), ckpt.tensors.end(),
                           [&](const CheckpointTensor& t) { return t.name == p->name; });
    if (it == ckpt.tensors.end()) throw ShapeError("checkpoint lacks tensor " + p->name);
    if (it->value.rows() != p->value.rows() || it->value.cols() != p->value.cols()) {
      throw ShapeError("checkpoint tensor " + p->name + " has the wrong shape");
    }
    p->value = it->value;
  }
}

Checkpoint make_checkpoint(const RunConfig& config, Model& model, const std::string& stage, int epoch) {
  if (stage != "moe" && stage != "diffusion") throw DomainError("checkpoint stage must be moe or diffusion");
  Checkpoint ck;
  ck.stage = stage;
  ck.config_hash = config_hash(config);
  ck.epoch = epoch;
  ck.seed = config.seed().value;
  ck.config = to_json(config);
  capture_tensors(ck, model.moe.parameters());
  if (stage == "diffusion") capture_tensors(ck, model.denoiser.parameters());
  return ck;
}

Model load_model(const Checkpoint& ckpt, RunConfig* config_out, const std::string& expected_hash) {
  RunConfig cfg = run_config_from_json(ckpt.config);
  if (!expected_hash.empty() && expected_hash != ckpt.config_hash) {
    spdlog::warn("config hash mismatch: checkpoint {} vs current {}", ckpt.config_hash, expected_hash);
  }
  Model m{cfg.train, MoEParams<float>(cfg.train.moe), DenoiserParams<float>(cfg.train.denoiser)};
  restore_tensors(ckpt, m.moe.parameters());
  if (ckpt.stage == "diffusion") restore_tensors(ckpt, m.denoiser.parameters());
  if (config_out) *config_out = cfg;
  return m;
}

void write_manifest(const fs::path& path, const DatasetManifest& m, const json& stamp) {
  json bags = json::array();
  for (const auto& e : m.entries) bags.push_back({{"id", e.bag_id}, {"file", e.file.generic_string()}, {"label", e.label}});
  json j = {{"format", "mexd-manifest"},
            {"version", 1},
            {"class_count", m.class_count},
            {"embedding_dim", m.embedding_dim},
            {"bags", bags}};
  if (!stamp.is_null()) j["stamp"] = stamp;
  write_text_atomic(path, j.dump(2) + "\n");
}

DatasetManifest read_manifest(const fs::path& path) {
  const Bytes b = read_file(path);
  DatasetManifest m;
  try {
    const json j = json::parse(b.begin(), b.end());
    if (j.value("format", "") != "mexd-manifest") throw IoError(path.string() + ": not a mexd manifest");
    m.class_count = j.at("class_count").get<int>();
    m.embedding_dim = j.at("embedding_dim").get<int>();
    for (const auto& e : j.at("bags")) {
      m.entries.push_back(ManifestEntry{e.at("id").get<std::string>(), fs::path(e.at("file").get<std::string>()),
                                        e.at("label").get<int>()});
    }
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": malformed manifest: " + e.what());
  }
  return m;
}

void write_dataset(const fs::path& dir, const SyntheticDataset& ds, const json& stamp) {
  for (std::size_t i = 0; i < ds.bags.size(); ++i) write_bag(dir / ds.manifest.entries[i].file, ds.bags[i].instances);
  write_manifest(dir / "manifest.json", ds.manifest, stamp);
}

std::vector<Bag> load_dataset(const fs::path& dir, DatasetManifest* manifest_out) {
  DatasetManifest m = read_manifest(dir / "manifest.json");
  validate_manifest(m, dir);
  std::vector<Bag> bags;
  bags.reserve(m.entries.size());
  for (const auto& e : m.entries) {
    Bag b{read_bag(dir / e.file), e.label, e.bag_id};
    validate_bag(b, m.class_count, m.embedding_dim);
    bags.push_back(std::move(b));
  }
  if (manifest_out) *manifest_out = std::move(m);
  return bags;
}

}  // namespace mexd

namespace mexd {

nlohmann::json to_json(const MetricReport& r) {
  json per = json::array();
  for (const auto& b : r.per_class) {
    json e = {{"label", b.label}, {"support", b.support}, {"precision", b.precision},
              {"recall", b.recall}, {"f1", b.f1}};
    e["auc"] = b.auc ? json(*b.auc) : json(nullptr);
    per.push_back(e);
  }
  json j = {{"count", r.count}, {"accuracy", r.accuracy}, {"f1_macro", r.f1_macro},
            {"auc_macro", r.auc_macro}, {"per_class", per}};
  j["pavpu"] = r.pavpu ? json(*r.pavpu) : json(nullptr);
  return j;
}

std::string records_tsv(std::span<const PredictionRecord> records) {
  std::ostringstream os;
  os.precision(9);
  os << "bag_id\ttrue_label\tprediction\tcertain\tp_value";
  const std::size_t k = records.empty() ? 0 : records.front().mean.size();
  for (std::size_t c = 0; c < k; ++c) os << "\tmean_" << c;
  os << "\n";
  for (const auto& r : records) {
    os << r.bag_id << '\t' << r.true_label << '\t' << r.point_prediction << '\t' << (r.certain ? 1 : 0)
       << '\t' << r.p_value;
    for (std::size_t c = 0; c < r.mean.size(); ++c) os << '\t' << r.mean[c];
    os << "\n";
  }
  return os.str();
}

std::string qq_tsv(std::span<const QQTable> tables) {
  std::ostringstream os;
  os.precision(9);
  os << "bag_id\tdegenerate\ttheoretical\tempirical\n";
  for (const auto& t : tables) {
    if (t.degenerate) {
      os << t.bag_id << "\t1\t\t\n";
      continue;
    }
    for (const auto& [th, em] : t.points) os << t.bag_id << "\t0\t" << th << '\t' << em << "\n";
  }
  return os.str();
}

std::string router_scores_csv(MoEParams<float>& moe, std::span<const Bag> bags, const SamplingRatios& ratios) {
  std::ostringstream os;
  os.precision(9);
  os << "bag_id,instance,expert,score,routed,retained\n";
  for (const Bag& b : bags) {
    validate_bag(b, moe.config.num_classes, moe.config.width);
    ag::Graph<float> g;
    auto f = aggregate(g, moe, g.constant(b.instances), ratios);
    for (int r = 0; r < moe.config.num_classes; ++r) {
      const int eta = r == 0 ? 0 : 1;
      const ag::Matrix<float> probs = router_probabilities(g, moe, f.adapted, r).value();
      const auto& routed = f.routes[static_cast<std::size_t>(r)].indices;
      for (Eigen::Index i = 0; i < probs.rows(); ++i) {
        const int idx = static_cast<int>(i);
        const bool is_routed = std::find(routed.begin(), routed.end(), idx) != routed.end();
        const bool kept = std::any_of(f.sources.begin(), f.sources.end(), [&](const RetainedInstance& s) {
          return s.expert == r && s.index == idx;
        });
        os << b.bag_id << ',' << i << ',' << r << ',' << probs(i, eta) << ',' << (is_routed ? 1 : 0) << ','
           << (kept ? 1 : 0) << "\n";
      }
    }
  }
  return os.str();
}

}  // namespace mexd
