// Copyright 2026 The mcsh Authors
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "mcsh/serialize.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>

#include <json.hpp>

static_assert(std::endian::native == std::endian::little,
              "file formats assume a little-endian host");

namespace mcsh {

using nlohmann::json;

void ByteWriter::u16(uint16_t v) { raw(&v, 2); }
void ByteWriter::u32(uint32_t v) { raw(&v, 4); }
void ByteWriter::u64(uint64_t v) { raw(&v, 8); }
void ByteWriter::f64(double v) { raw(&v, 8); }

void ByteWriter::raw(const void* p, size_t n) {
  const auto* b = static_cast<const uint8_t*>(p);
  buf_.insert(buf_.end(), b, b + n);
}

void ByteWriter::str(const std::string& s) {
  u32(static_cast<uint32_t>(s.size()));
  raw(s.data(), s.size());
}

void ByteReader::need(size_t n) const {
  if (pos_ + n > buf_.size()) throw ConfigError("file truncated");
}

uint8_t ByteReader::u8() {
  need(1);
  return buf_[pos_++];
}
uint16_t ByteReader::u16() {
  uint16_t v;
  raw(&v, 2);
  return v;
}
uint32_t ByteReader::u32() {
  uint32_t v;
  raw(&v, 4);
  return v;
}
uint64_t ByteReader::u64() {
  uint64_t v;
  raw(&v, 8);
  return v;
}
double ByteReader::f64() {
  double v;
  raw(&v, 8);
  return v;
}
void ByteReader::raw(void* p, size_t n) {
  need(n);
  std::memcpy(p, buf_.data() + pos_, n);
  pos_ += n;
}
std::string ByteReader::str() {
  const uint32_t n = u32();
  need(n);
  std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
  pos_ += n;
  return s;
}

uint32_t crc32(const uint8_t* data, size_t n) {
  static const auto table = [] {
    std::array<uint32_t, 256> t{};
    for (uint32_t i = 0; i < 256; ++i) {
      uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  uint32_t c = 0xffffffffu;
  for (size_t i = 0; i < n; ++i) c = table[(c ^ data[i]) & 0xffu] ^ (c >> 8);
  return c ^ 0xffffffffu;
}

void atomic_write_file(const std::string& path, const std::vector<uint8_t>& bytes) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ConfigError("short write to " + tmp.string());
  }
  fs::rename(tmp, target);
}

void atomic_write_text(const std::string& path, const std::string& text) {
  std::vector<uint8_t> bytes(text.begin(), text.end());
  atomic_write_file(path, bytes);
}

std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("missing input: " + path);
  return std::vector<uint8_t>((std::istreambuf_iterator<char>(in)),
                              std::istreambuf_iterator<char>());
}

std::string read_text_file(const std::string& path) {
  const auto bytes = read_file(path);
  return std::string(bytes.begin(), bytes.end());
}

// ---- config json ----

namespace {

json config_json(const MoEConfig& c) {
  return json{{"num_layers", c.num_layers},
              {"hidden", c.hidden},
              {"ffn_inner", c.ffn_inner},
              {"num_experts", c.num_experts},
              {"top_k", c.top_k},
              {"vocab", c.vocab},
              {"num_shared_experts", c.num_shared_experts},
              {"seed", c.seed}};
}

MoEConfig config_from(const json& j) {
  MoEConfig c;
  c.num_layers = j.at("num_layers").get<int>();
  c.hidden = j.at("hidden").get<int>();
  c.ffn_inner = j.at("ffn_inner").get<int>();
  c.num_experts = j.at("num_experts").get<int>();
  c.top_k = j.at("top_k").get<int>();
  c.vocab = j.at("vocab").get<int>();
  c.num_shared_experts = j.at("num_shared_experts").get<int>();
  c.seed = j.at("seed").get<uint64_t>();
  c.validate();
  return c;
}

}  // namespace

std::string config_to_json(const MoEConfig& config) {
  return config_json(config).dump();
}

MoEConfig config_from_json(const std::string& json_text) {
  try {
    return config_from(json::parse(json_text));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad config json: ") + e.what());
  }
}

// ---- checkpoint ----

void save_checkpoint(const MoEModel& model, const std::string& path) {
  json header;
  header["format_version"] = 1;
  header["config"] = config_json(model.config);
  header["seed"] = model.config.seed;
  json params = json::array();
  int64_t offset = 0;
  const auto named = model.named_params();
  for (const auto& [name, t] : named) {
    params.push_back({{"name", name}, {"shape", t->shape()}, {"offset", offset}});
    offset += t->numel() * 8;
  }
  header["params"] = params;
  const std::string htext = header.dump();

  ByteWriter w;
  w.u32(static_cast<uint32_t>(htext.size()));
  w.raw(htext.data(), htext.size());
  for (const auto& [name, t] : named)
    w.raw(t->data().data(), static_cast<size_t>(t->numel()) * 8);
  atomic_write_file(path, w.buffer());
}

MoEModel load_checkpoint(const std::string& path) {
  const auto bytes = read_file(path);
  ByteReader r(bytes);
  const uint32_t hlen = r.u32();
  std::string htext(static_cast<size_t>(hlen), '\0');
  r.raw(htext.data(), hlen);
  json header;
  try {
    header = json::parse(htext);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad checkpoint header: ") + e.what());
  }
  if (header.at("format_version").get<int>() != 1)
    throw ConfigError("unsupported checkpoint version");
  MoEConfig config = config_from(header.at("config"));

  // Materialize a model with the right shapes, then fill blobs by name.
  MoEModel model = init_model(config);
  auto named = model.named_params();
  const size_t blob_base = r.pos();
  std::map<std::string, Tensor*> by_name(named.begin(), named.end());
  size_t filled = 0;
  for (const auto& p : header.at("params")) {
    const std::string name = p.at("name").get<std::string>();
    const auto shape = p.at("shape").get<std::vector<int>>();
    const int64_t offset = p.at("offset").get<int64_t>();
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw ConfigError("checkpoint has unknown param " + name);
    Tensor t(shape);
    if (blob_base + static_cast<size_t>(offset) +
            static_cast<size_t>(t.numel()) * 8 >
        bytes.size())
      throw ConfigError("checkpoint blob out of range for " + name);
    std::memcpy(t.data().data(), bytes.data() + blob_base + offset,
                static_cast<size_t>(t.numel()) * 8);
    if (!t.same_shape(*it->second))
      throw ConfigError("checkpoint shape mismatch for " + name);
    *it->second = std::move(t);
    ++filled;
  }
  if (filled != named.size())
    throw ConfigError("checkpoint is missing parameters");
  return model;
}

// ---- packed matrix sections ----

namespace {
constexpr char kMatrixMagic[4] = {'P', 'K', 'D', 'W'};
constexpr char kModelMagic[4] = {'M', 'C', 'S', 'H'};
constexpr uint16_t kFormatVersion = 1;
}  // namespace

std::vector<uint8_t> encode_packed_matrix(const QuantMatrix& q) {
  ByteWriter w;
  w.raw(kMatrixMagic, 4);
  w.u16(kFormatVersion);
  if (std::holds_alternative<PackedMatrix>(q.packed)) {
    const auto& p = std::get<PackedMatrix>(q.packed);
    w.u8(static_cast<uint8_t>(p.bits));
    w.u32(static_cast<uint32_t>(p.d));
    w.u32(static_cast<uint32_t>(p.m));
    w.u32(static_cast<uint32_t>(p.params.group_size));
    w.u8(0);  // scheme: linear
    for (double s : p.params.scales) w.f64(s);
    for (uint8_t z : p.params.zeros) w.u8(z);
    w.raw(p.payload.data(), p.payload.size());
  } else {
    const auto& b = std::get<BinarizedMatrix>(q.packed);
    w.u8(1);
    w.u32(static_cast<uint32_t>(b.d));
    w.u32(static_cast<uint32_t>(b.m));
    w.u32(0);  // group_size unused by the binary scheme
    w.u8(1);   // scheme: binary
    for (double a : b.alpha) w.f64(a);
    w.raw(b.payload.data(), b.payload.size());
  }
  return w.take();
}

QuantMatrix decode_packed_matrix(const std::vector<uint8_t>& bytes) {
  ByteReader r(bytes);
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, kMatrixMagic, 4) != 0)
    throw ConfigError("bad packed-matrix magic");
  if (r.u16() != kFormatVersion)
    throw ConfigError("unsupported packed-matrix version");
  const int bits = r.u8();
  const int d = static_cast<int>(r.u32());
  const int m = static_cast<int>(r.u32());
  const int group_size = static_cast<int>(r.u32());
  const uint8_t scheme = r.u8();

  QuantMatrix q;
  if (scheme == 0) {
    PackedMatrix p;
    p.bits = bits;
    p.d = d;
    p.m = m;
    p.params.bits = bits;
    p.params.group_size = group_size;
    const int ng = (m + group_size - 1) / group_size;
    p.params.scales.resize(static_cast<size_t>(ng));
    for (auto& s : p.params.scales) s = r.f64();
    p.params.zeros.resize(static_cast<size_t>(ng));
    for (auto& z : p.params.zeros) z = r.u8();
    const int64_t nbytes = (p.elements() * bits + 7) / 8;
    p.payload.resize(static_cast<size_t>(nbytes));
    r.raw(p.payload.data(), p.payload.size());
    if (r.remaining() != 0) throw ConfigError("packed-matrix payload overlong");
    q.dense = dequantize(p);
    q.packed = std::move(p);
  } else if (scheme == 1) {
    if (bits != 1) throw ConfigError("binary scheme requires 1-bit payload");
    BinarizedMatrix b;
    b.d = d;
    b.m = m;
    b.alpha.resize(static_cast<size_t>(m));
    for (auto& a : b.alpha) a = r.f64();
    const int64_t nbytes = (b.elements() + 7) / 8;
    b.payload.resize(static_cast<size_t>(nbytes));
    r.raw(b.payload.data(), b.payload.size());
    if (r.remaining() != 0) throw ConfigError("packed-matrix payload overlong");
    q.dense = dequantize(b);
    q.packed = std::move(b);
  } else {
    throw ConfigError("unknown packed-matrix scheme");
  }
  return q;
}

std::vector<uint8_t> encode_raw_tensor(const Tensor& t) {
  ByteWriter w;
  w.u32(static_cast<uint32_t>(t.rank()));
  for (int i = 0; i < t.rank(); ++i) w.u32(static_cast<uint32_t>(t.dim(i)));
  w.raw(t.data().data(), static_cast<size_t>(t.numel()) * 8);
  return w.take();
}

Tensor decode_raw_tensor(const std::vector<uint8_t>& bytes) {
  ByteReader r(bytes);
  const uint32_t rank = r.u32();
  std::vector<int> shape(rank);
  for (auto& d : shape) d = static_cast<int>(r.u32());
  Tensor t(shape);
  r.raw(t.data().data(), static_cast<size_t>(t.numel()) * 8);
  if (r.remaining() != 0) throw ConfigError("raw tensor payload overlong");
  return t;
}

std::vector<uint8_t> encode_routers(const std::vector<RouterParams>& routers) {
  ByteWriter w;
  w.u32(static_cast<uint32_t>(routers.size()));
  for (const auto& r : routers) {
    auto fc1 = encode_raw_tensor(r.fc1);
    auto fc2 = encode_raw_tensor(r.fc2);
    w.u64(fc1.size());
    w.raw(fc1.data(), fc1.size());
    w.u64(fc2.size());
    w.raw(fc2.data(), fc2.size());
  }
  return w.take();
}

std::vector<RouterParams> decode_routers(const std::vector<uint8_t>& bytes) {
  ByteReader r(bytes);
  const uint32_t n = r.u32();
  std::vector<RouterParams> out(n);
  for (auto& rp : out) {
    std::vector<uint8_t> b1(static_cast<size_t>(r.u64()));
    r.raw(b1.data(), b1.size());
    rp.fc1 = decode_raw_tensor(b1);
    std::vector<uint8_t> b2(static_cast<size_t>(r.u64()));
    r.raw(b2.data(), b2.size());
    rp.fc2 = decode_raw_tensor(b2);
  }
  return out;
}

// ---- packed model container ----

const PackedSection* PackedModelFile::find(const std::string& name) const {
  for (const auto& s : sections)
    if (s.name == name) return &s;
  return nullptr;
}

void save_packed_file(const PackedModelFile& file, const std::string& path) {
  ByteWriter w;
  w.raw(kModelMagic, 4);
  w.u16(file.version);
  w.str(config_to_json(file.config));
  w.str(file.allocation_json);
  w.u32(static_cast<uint32_t>(file.sections.size()));
  for (const auto& s : file.sections) {
    w.str(s.name);
    w.u8(s.kind);
    w.u64(s.bytes.size());
    w.raw(s.bytes.data(), s.bytes.size());
  }
  const uint32_t crc = crc32(w.buffer().data(), w.buffer().size());
  w.u32(crc);
  atomic_write_file(path, w.buffer());
}

PackedModelFile load_packed_file(const std::string& path) {
  const auto bytes = read_file(path);
  if (bytes.size() < 8) throw ConfigError("packed model file truncated");
  uint32_t stored_crc;
  std::memcpy(&stored_crc, bytes.data() + bytes.size() - 4, 4);
  if (crc32(bytes.data(), bytes.size() - 4) != stored_crc)
    throw ConfigError("packed model checksum failure: " + path);

  ByteReader r(bytes);
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, kModelMagic, 4) != 0)
    throw ConfigError("bad packed model magic");
  PackedModelFile file;
  file.version = r.u16();
  if (file.version != kFormatVersion)
    throw ConfigError("unsupported packed model version");
  file.config = config_from_json(r.str());
  file.allocation_json = r.str();
  const uint32_t nsections = r.u32();
  file.sections.resize(nsections);
  for (auto& s : file.sections) {
    s.name = r.str();
    s.kind = r.u8();
    s.bytes.resize(static_cast<size_t>(r.u64()));
    r.raw(s.bytes.data(), s.bytes.size());
  }
  if (r.remaining() != 4) throw ConfigError("packed model trailing bytes");
  return file;
}

}  // namespace mcsh
