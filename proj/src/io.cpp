#include "xcvae/io.hpp"

#include <openssl/evp.h>
#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

namespace xcvae {

static_assert(std::endian::native == std::endian::little, "NPZ codec assumes little-endian");

namespace fs = std::filesystem;
using nlohmann::json;

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, std::string_view bytes) {
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw RuntimeError("cannot write '" + tmp.string() + "'");
    out.write(bytes.data(), std::streamsize(bytes.size()));
    if (!out) throw RuntimeError("write failed for '" + tmp.string() + "'");
  }
  fs::rename(tmp, target);
}

std::string sha1_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha1(), nullptr) != 1) {
    throw RuntimeError("sha1 failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += kHex[digest[i] >> 4];
    out += kHex[digest[i] & 15];
  }
  return out;
}

std::string git_blob_hash(std::string_view bytes) {
  std::string buf = "blob " + std::to_string(bytes.size());
  buf.push_back('\0');
  buf.append(bytes);
  return sha1_hex(buf);
}

std::string file_git_hash(const std::string& path) { return git_blob_hash(read_file(path)); }

// ---------------------------------------------------------------------------
// NPY / NPZ

namespace {

void put16(std::string& s, std::uint16_t v) {
  s.push_back(char(v & 0xff));
  s.push_back(char(v >> 8));
}

void put32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(char((v >> (8 * i)) & 0xff));
}

std::uint32_t get_le(std::string_view b, std::size_t at, int bytes) {
  if (at + std::size_t(bytes) > b.size()) throw ValidationError("npz: truncated archive");
  std::uint32_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= std::uint32_t(std::uint8_t(b[at + std::size_t(i)])) << (8 * i);
  return v;
}

std::uint32_t crc(std::string_view b) {
  return std::uint32_t(crc32(0L, reinterpret_cast<const Bytef*>(b.data()), uInt(b.size())));
}

std::string inflate_raw(std::string_view in, std::size_t expected) {
  std::string out(expected, '\0');
  z_stream zs{};
  if (inflateInit2(&zs, -MAX_WBITS) != Z_OK) throw RuntimeError("npz: inflateInit failed");
  zs.next_in = reinterpret_cast<Bytef*>(const_cast<char*>(in.data()));
  zs.avail_in = uInt(in.size());
  zs.next_out = reinterpret_cast<Bytef*>(out.data());
  zs.avail_out = uInt(out.size());
  const int rc = inflate(&zs, Z_FINISH);
  inflateEnd(&zs);
  if (rc != Z_STREAM_END || zs.total_out != expected) {
    throw ValidationError("npz: corrupt deflated member");
  }
  return out;
}

template <class T>
void widen(std::string_view raw, std::size_t n, Tensor& t) {
  for (std::size_t i = 0; i < n; ++i) {
    T v;
    std::memcpy(&v, raw.data() + i * sizeof(T), sizeof(T));
    t[i] = double(v);
  }
}

}  // namespace

std::string encode_npy(const Tensor& t) {
  std::string shape = "(";
  for (std::size_t d : t.shape()) shape += std::to_string(d) + ", ";
  if (t.rank() > 1) shape.erase(shape.size() - 2);  // numpy writes "(n,)" for rank 1
  else if (t.rank() == 1) shape.erase(shape.size() - 1);
  shape += ")";
  std::string header = "{'descr': '<f8', 'fortran_order': False, 'shape': " + shape + ", }";
  const std::size_t unpadded = 10 + header.size() + 1;
  header.append((64 - unpadded % 64) % 64, ' ');
  header.push_back('\n');
  std::string out = "\x93NUMPY";
  out.push_back('\x01');
  out.push_back('\x00');
  put16(out, std::uint16_t(header.size()));
  out += header;
  out.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(double));
  return out;
}

Tensor decode_npy(std::string_view b, const std::string& name) {
  if (b.size() < 10 || b.substr(0, 6) != "\x93NUMPY") {
    throw ValidationError("npy '" + name + "': bad magic");
  }
  const int major = std::uint8_t(b[6]);
  std::size_t header_len, offset;
  if (major == 1) {
    header_len = get_le(b, 8, 2);
    offset = 10;
  } else {
    header_len = get_le(b, 8, 4);
    offset = 12;
  }
  if (offset + header_len > b.size()) throw ValidationError("npy '" + name + "': truncated header");
  const std::string header(b.substr(offset, header_len));
  std::smatch m;
  if (!std::regex_search(header, m, std::regex(R"('descr':\s*'([^']+)')"))) {
    throw ValidationError("npy '" + name + "': missing descr");
  }
  const std::string descr = m[1];
  if (std::regex_search(header, std::regex(R"('fortran_order':\s*True)"))) {
    throw ValidationError("npy '" + name + "': fortran order unsupported");
  }
  if (!std::regex_search(header, m, std::regex(R"('shape':\s*\(([^)]*)\))"))) {
    throw ValidationError("npy '" + name + "': missing shape");
  }
  Shape shape;
  const std::string dims = m[1];
  const std::regex number(R"(\d+)");
  for (std::sregex_iterator it(dims.begin(), dims.end(), number), end; it != end; ++it) {
    shape.push_back(std::stoul(it->str()));
  }
  Tensor t(shape);
  const std::size_t n = t.size();
  const std::string_view raw = b.substr(offset + header_len);
  auto need = [&](std::size_t width) {
    if (raw.size() < n * width) throw ValidationError("npy '" + name + "': truncated data");
  };
  if (descr == "<f8") {
    need(8);
    std::memcpy(t.data(), raw.data(), n * 8);
  } else if (descr == "<f4") {
    need(4);
    widen<float>(raw, n, t);
  } else if (descr == "<i8") {
    need(8);
    widen<std::int64_t>(raw, n, t);
  } else if (descr == "<i4") {
    need(4);
    widen<std::int32_t>(raw, n, t);
  } else if (descr == "|u1" || descr == "|b1") {
    need(1);
    widen<std::uint8_t>(raw, n, t);
  } else {
    throw ValidationError("npy '" + name + "': unsupported dtype " + descr);
  }
  return t;
}

std::string encode_npz(const Archive& archive) {
  struct Member {
    std::string name, bytes;
  };
  std::vector<Member> members;
  for (const auto& [name, t] : archive.arrays) {
    if (name.empty() || name == "__metadata__") {
      throw ValidationError("npz: invalid array name '" + name + "'");
    }
    members.push_back({name + ".npy", encode_npy(t)});
  }
  members.push_back({kMetadataEntry, archive.metadata.dump()});

  std::string out, central;
  for (const Member& m : members) {
    if (m.bytes.size() >= 0xffffffffULL || out.size() >= 0xffffffffULL) {
      throw RuntimeError("npz: archive exceeds 4 GiB");
    }
    const std::uint32_t c = crc(m.bytes), offset = std::uint32_t(out.size());
    const auto size = std::uint32_t(m.bytes.size());
    // Fixed 1980-01-01 timestamp keeps output reproducible.
    put32(out, 0x04034b50);
    put16(out, 20);
    put16(out, 0);
    put16(out, 0);
    put16(out, 0);
    put16(out, 0x21);
    put32(out, c);
    put32(out, size);
    put32(out, size);
    put16(out, std::uint16_t(m.name.size()));
    put16(out, 0);
    out += m.name;
    out += m.bytes;

    put32(central, 0x02014b50);
    put16(central, 20);
    put16(central, 20);
    put16(central, 0);
    put16(central, 0);
    put16(central, 0);
    put16(central, 0x21);
    put32(central, c);
    put32(central, size);
    put32(central, size);
    put16(central, std::uint16_t(m.name.size()));
    put16(central, 0);
    put16(central, 0);
    put16(central, 0);
    put16(central, 0);
    put32(central, 0);
    put32(central, offset);
    central += m.name;
  }
  const auto cd_offset = std::uint32_t(out.size());
  out += central;
  put32(out, 0x06054b50);
  put16(out, 0);
  put16(out, 0);
  put16(out, std::uint16_t(members.size()));
  put16(out, std::uint16_t(members.size()));
  put32(out, std::uint32_t(central.size()));
  put32(out, cd_offset);
  put16(out, 0);
  return out;
}

Archive decode_npz(std::string_view b) {
  if (b.size() < 22) throw ValidationError("npz: file too small");
  std::size_t eocd = std::string_view::npos;
  for (std::size_t i = b.size() - 22 + 1; i-- > 0 && b.size() - i <= 22 + 0xffff;) {
    if (get_le(b, i, 4) == 0x06054b50) {
      eocd = i;
      break;
    }
  }
  if (eocd == std::string_view::npos) throw ValidationError("npz: not a zip archive");
  const std::size_t count = get_le(b, eocd + 10, 2);
  std::size_t p = get_le(b, eocd + 16, 4);
  Archive archive;
  bool have_metadata = false;
  for (std::size_t k = 0; k < count; ++k) {
    if (get_le(b, p, 4) != 0x02014b50) throw ValidationError("npz: bad central directory");
    const std::uint32_t method = get_le(b, p + 10, 2);
    const std::uint32_t expect_crc = get_le(b, p + 16, 4);
    const std::size_t csize = get_le(b, p + 20, 4), usize = get_le(b, p + 24, 4);
    const std::size_t nlen = get_le(b, p + 28, 2), xlen = get_le(b, p + 30, 2),
                      clen = get_le(b, p + 32, 2);
    const std::size_t local = get_le(b, p + 42, 4);
    if (p + 46 + nlen > b.size()) throw ValidationError("npz: truncated central directory");
    const std::string name(b.substr(p + 46, nlen));
    p += 46 + nlen + xlen + clen;

    if (get_le(b, local, 4) != 0x04034b50) throw ValidationError("npz: bad local header");
    const std::size_t data = local + 30 + get_le(b, local + 26, 2) + get_le(b, local + 28, 2);
    if (data + csize > b.size()) throw ValidationError("npz: truncated member '" + name + "'");
    std::string bytes;
    if (method == 0) {
      bytes = std::string(b.substr(data, csize));
    } else if (method == 8) {
      bytes = inflate_raw(b.substr(data, csize), usize);
    } else {
      throw ValidationError("npz: unsupported compression for '" + name + "'");
    }
    if (crc(bytes) != expect_crc) throw ValidationError("npz: CRC mismatch in '" + name + "'");
    if (name == kMetadataEntry) {
      try {
        archive.metadata = json::parse(bytes);
      } catch (const json::parse_error&) {
        throw ValidationError("npz: metadata is not valid JSON");
      }
      have_metadata = true;
    } else if (name.size() > 4 && name.ends_with(".npy")) {
      const std::string key = name.substr(0, name.size() - 4);
      archive.arrays[key] = decode_npy(bytes, key);
    }
  }
  if (!have_metadata) archive.metadata = json::object();
  return archive;
}

void save_npz(const std::string& path, const Archive& archive) {
  write_file(path, encode_npz(archive));
}

Archive load_npz(const std::string& path) { return decode_npz(read_file(path)); }

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

template <class State>
void save_state(const std::string& path, const State& state, const CheckpointInfo& info,
                const json& extra) {
  Archive a;
  visit_params(state, "", [&](const std::string& name, const Tensor& t) { a.arrays[name] = t; });
  a.metadata = {{"schema_version", kCheckpointSchema},
                {"module", info.module},
                {"config", to_json(info.config)},
                {"config_hash", config_hash(info.config)},
                {"epoch", info.epoch},
                {"metrics", info.metrics},
                {"use_side_information", info.use_side_information},
                {"ablation", info.ablation}};
  a.metadata.update(extra);
  save_npz(path, a);
}

template <class State>
void fill_state(State& state, const Archive& a, const std::string& path) {
  visit_params(state, "", [&](const std::string& name, Tensor& t) {
    const auto it = a.arrays.find(name);
    if (it == a.arrays.end()) {
      throw ValidationError("checkpoint '" + path + "': missing array '" + name + "'");
    }
    if (it->second.shape() != t.shape()) {
      throw ValidationError("checkpoint '" + path + "': array '" + name + "' has shape " +
                            to_string(it->second.shape()) + ", expected " + to_string(t.shape()));
    }
    t = it->second;
  });
}

Archive load_checked(const std::string& path, const std::string& module, CheckpointInfo& info) {
  if (!fs::exists(path)) throw ValidationError("checkpoint not found: '" + path + "'");
  Archive a = load_npz(path);
  info = read_checkpoint_info(a);
  if (info.module != module) {
    throw ValidationError("checkpoint '" + path + "' holds module '" + info.module +
                          "', expected '" + module + "'");
  }
  return a;
}

}  // namespace

CheckpointInfo read_checkpoint_info(const Archive& a) {
  const json& m = a.metadata;
  if (!m.contains("schema_version") || !m["schema_version"].is_number_integer()) {
    throw ValidationError("checkpoint: missing schema_version");
  }
  if (m["schema_version"].get<int>() != kCheckpointSchema) {
    throw ValidationError("checkpoint: schema_version " + m["schema_version"].dump() +
                          " is not supported (expected " + std::to_string(kCheckpointSchema) + ")");
  }
  CheckpointInfo info;
  try {
    info.module = m.at("module").get<std::string>();
    info.config = config_from_json(m.at("config"));
    info.epoch = m.at("epoch").get<int>();
    info.metrics = m.value("metrics", json::object());
    info.use_side_information = m.value("use_side_information", true);
    info.ablation = m.value("ablation", std::string("full"));
  } catch (const json::exception& e) {
    throw ValidationError(std::string("checkpoint: malformed metadata: ") + e.what());
  }
  return info;
}

void save_checkpoint(const std::string& path, const CvaeState& state, const CheckpointInfo& info) {
  CheckpointInfo i = info;
  i.module = "cvae";
  save_state(path, state, i, {{"latent_dim", state.config.latent_dim}});
}

void save_checkpoint(const std::string& path, const ClassifierState& state,
                     const CheckpointInfo& info) {
  CheckpointInfo i = info;
  i.module = "classifier";
  save_state(path, state, i, {{"clusters", state.config.clusters}});
}

std::pair<CvaeState, CheckpointInfo> load_cvae_checkpoint(const std::string& path) {
  CheckpointInfo info;
  const Archive a = load_checked(path, "cvae", info);
  CvaeState s = make_cvae(info.config.cvae_model());
  fill_state(s, a, path);
  return {std::move(s), std::move(info)};
}

std::pair<ClassifierState, CheckpointInfo> load_classifier_checkpoint(const std::string& path) {
  CheckpointInfo info;
  const Archive a = load_checked(path, "classifier", info);
  ClassifierState s = make_classifier(info.config.classifier_model());
  fill_state(s, a, path);
  return {std::move(s), std::move(info)};
}

// ---------------------------------------------------------------------------
// Datasets

std::vector<const Volume*> Dataset::split(const std::string& name) const {
  const std::vector<std::size_t>* idx = nullptr;
  if (name == "train") idx = &splits.train;
  else if (name == "validation") idx = &splits.validation;
  else if (name == "test") idx = &splits.test;
  else if (name == "all") {
    std::vector<const Volume*> out;
    for (const Volume& v : volumes) out.push_back(&v);
    return out;
  } else {
    throw ValidationError("unknown split '" + name + "' (train|validation|test|all)");
  }
  std::vector<const Volume*> out;
  for (std::size_t i : *idx) out.push_back(&volumes.at(i));
  return out;
}

std::size_t Dataset::find(const std::string& id) const {
  for (std::size_t i = 0; i < volumes.size(); ++i) {
    if (volumes[i].id == id) return i;
  }
  throw ValidationError("unknown volume id '" + id + "'");
}

Dataset build_dataset(const RunConfig& cfg) {
  cfg.validate();
  Dataset ds;
  ds.config = cfg;
  ds.volumes = generate_dataset(cfg.phantom.generator, cfg.phantom.volumes);
  std::vector<int> labels;
  for (const Volume& v : ds.volumes) labels.push_back(v.label);
  ds.splits = make_splits(labels, cfg.phantom.splits, cfg.phantom.generator.seed);
  return ds;
}

namespace {

fs::path volume_dir(const std::string& dir, const std::string& id) {
  return fs::path(dir) / "volumes" / id;
}

json split_ids(const Dataset& ds, const std::vector<std::size_t>& idx) {
  json out = json::array();
  for (std::size_t i : idx) out.push_back(ds.volumes.at(i).id);
  return out;
}

json counts_json(const ClassCounts& c) {
  return {{"negative", c.negative}, {"positive", c.positive}};
}

}  // namespace

void save_dataset(const std::string& dir, const Dataset& ds) {
  json ids = json::array();
  for (const Volume& v : ds.volumes) {
    const json sidecar = {{"id", v.id},
                          {"label", v.label},
                          {"seed", v.seed},
                          {"spacing_mm", v.spacing_mm},
                          {"generator_version", kGeneratorVersion}};
    Archive a;
    a.arrays["intensities"] = v.intensities;
    a.arrays["lesion_mask"] = v.lesion_mask;
    a.metadata = sidecar;
    const fs::path vd = volume_dir(dir, v.id);
    save_npz((vd / "volume.npz").string(), a);
    write_file((vd / "meta.json").string(), sidecar.dump(2) + "\n");
    ids.push_back(v.id);
  }
  const json index = {{"schema_version", kCheckpointSchema},
                      {"module", "dataset"},
                      {"generator_version", kGeneratorVersion},
                      {"config", to_json(ds.config)},
                      {"volumes", ids},
                      {"splits",
                       {{"train", split_ids(ds, ds.splits.train)},
                        {"validation", split_ids(ds, ds.splits.validation)},
                        {"test", split_ids(ds, ds.splits.test)}}},
                      {"class_counts",
                       {{"train", counts_json(ds.splits.train_counts)},
                        {"validation", counts_json(ds.splits.validation_counts)},
                        {"test", counts_json(ds.splits.test_counts)}}}};
  write_file((fs::path(dir) / kDatasetFile).string(), index.dump(2) + "\n");
}

Dataset load_dataset(const std::string& dir) {
  const std::string path = (fs::path(dir) / kDatasetFile).string();
  if (!fs::exists(path)) throw ValidationError("dataset not found: '" + path + "'");
  json index;
  try {
    index = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ValidationError("dataset index '" + path + "' is not valid JSON");
  }
  if (index.value("module", "") != "dataset" ||
      index.value("schema_version", 0) != kCheckpointSchema) {
    throw ValidationError("'" + path + "' is not a dataset index of this schema");
  }
  Dataset ds;
  std::map<std::string, std::size_t> position;
  try {
    ds.config = config_from_json(index.at("config"));
    for (const json& jid : index.at("volumes")) {
      const std::string id = jid.get<std::string>();
      const fs::path vd = volume_dir(dir, id);
      if (!fs::exists(vd / "volume.npz")) {
        throw ValidationError("dataset: missing volume file for '" + id + "'");
      }
      const Archive a = load_npz((vd / "volume.npz").string());
      const json side = json::parse(read_file((vd / "meta.json").string()));
      Volume v;
      v.id = id;
      v.label = side.at("label").get<int>();
      v.seed = side.at("seed").get<std::uint64_t>();
      v.spacing_mm = side.at("spacing_mm").get<std::array<double, 3>>();
      const auto img = a.arrays.find("intensities");
      const auto msk = a.arrays.find("lesion_mask");
      if (img == a.arrays.end() || msk == a.arrays.end()) {
        throw ValidationError("dataset: arrays missing for volume '" + id + "'");
      }
      v.intensities = img->second;
      v.lesion_mask = msk->second;
      validate(v);
      position[id] = ds.volumes.size();
      ds.volumes.push_back(std::move(v));
    }
    auto read_split = [&](const char* name, std::vector<std::size_t>& idx, ClassCounts& c) {
      for (const json& jid : index.at("splits").at(name)) {
        const auto it = position.find(jid.get<std::string>());
        if (it == position.end()) {
          throw ValidationError("dataset: split '" + std::string(name) + "' names unknown volume " +
                                jid.dump());
        }
        idx.push_back(it->second);
        (ds.volumes[it->second].label == 1 ? c.positive : c.negative)++;
      }
    };
    read_split("train", ds.splits.train, ds.splits.train_counts);
    read_split("validation", ds.splits.validation, ds.splits.validation_counts);
    read_split("test", ds.splits.test, ds.splits.test_counts);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("dataset: malformed metadata: ") + e.what());
  }
  return ds;
}

std::vector<std::string> dataset_files(const std::string& dir, const Dataset& ds) {
  std::vector<std::string> out{(fs::path(dir) / kDatasetFile).string()};
  for (const Volume& v : ds.volumes) {
    const fs::path vd = volume_dir(dir, v.id);
    out.push_back((vd / "volume.npz").string());
    out.push_back((vd / "meta.json").string());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifests

void write_manifest(const std::string& dir, const Manifest& m) {
  auto hashes = [](const std::vector<std::string>& paths) {
    json out = json::array();
    for (const std::string& p : paths) out.push_back({{"path", p}, {"git_hash", file_git_hash(p)}});
    return out;
  };
  const json j = {{"command", m.command},
                  {"seed", m.seed},
                  {"config", m.config},
                  {"inputs", hashes(m.inputs)},
                  {"outputs", hashes(m.outputs)},
                  {"wall_time_s", m.wall_time_s}};
  write_file((fs::path(dir) / "manifest.json").string(), j.dump(2) + "\n");
}

}  // namespace xcvae
