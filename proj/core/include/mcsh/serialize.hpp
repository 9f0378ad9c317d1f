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

#ifndef MCSH_SERIALIZE_HPP
#define MCSH_SERIALIZE_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "mcsh/moe.hpp"
#include "mcsh/otp.hpp"
#include "mcsh/quant.hpp"

namespace mcsh {

// Little-endian byte views; all file formats in this project are LE.
class ByteWriter {
 public:
  void u8(uint8_t v) { buf_.push_back(v); }
  void u16(uint16_t v);
  void u32(uint32_t v);
  void u64(uint64_t v);
  void f64(double v);
  void raw(const void* p, size_t n);
  void str(const std::string& s);  // u32 length + bytes
  const std::vector<uint8_t>& buffer() const { return buf_; }
  std::vector<uint8_t> take() { return std::move(buf_); }

 private:
  std::vector<uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<uint8_t>& buf) : buf_(buf) {}
  uint8_t u8();
  uint16_t u16();
  uint32_t u32();
  uint64_t u64();
  double f64();
  void raw(void* p, size_t n);
  std::string str();
  size_t remaining() const { return buf_.size() - pos_; }
  size_t pos() const { return pos_; }

 private:
  void need(size_t n) const;
  const std::vector<uint8_t>& buf_;
  size_t pos_ = 0;
};

uint32_t crc32(const uint8_t* data, size_t n);

// Write to a temp file in the same directory, then rename over the target.
void atomic_write_file(const std::string& path, const std::vector<uint8_t>& bytes);
void atomic_write_text(const std::string& path, const std::string& text);
std::vector<uint8_t> read_file(const std::string& path);
std::string read_text_file(const std::string& path);

// ---- full-precision checkpoint ----
// u32 header length + JSON header {format_version, config, seed, params:
// [{name, shape, offset}]} + little-endian float64 blobs.
void save_checkpoint(const MoEModel& model, const std::string& path);
MoEModel load_checkpoint(const std::string& path);

// ---- packed-weight matrix sections ----
// 'PKDW' | version u16 | bits u8 | d u32 | m u32 | group_size u32 |
// scheme u8 (0=linear, 1=binary) | scales f64 LE | zeros u8 | payload.
// Bit order inside payload bytes: least-significant bits first.
std::vector<uint8_t> encode_packed_matrix(const QuantMatrix& q);
QuantMatrix decode_packed_matrix(const std::vector<uint8_t>& bytes);

std::vector<uint8_t> encode_raw_tensor(const Tensor& t);
Tensor decode_raw_tensor(const std::vector<uint8_t>& bytes);

std::vector<uint8_t> encode_routers(const std::vector<RouterParams>& routers);
std::vector<RouterParams> decode_routers(const std::vector<uint8_t>& bytes);

// ---- packed model container ----
// 'MCSH' | version u16 | config JSON | allocation JSON | sections | crc32.
struct PackedSection {
  std::string name;
  uint8_t kind = 0;
  std::vector<uint8_t> bytes;
};

inline constexpr uint8_t kSectionPackedMatrix = 0;
inline constexpr uint8_t kSectionRawTensor = 1;
inline constexpr uint8_t kSectionRouters = 2;

struct PackedModelFile {
  uint16_t version = 1;
  MoEConfig config;
  std::string allocation_json;
  std::vector<PackedSection> sections;

  const PackedSection* find(const std::string& name) const;
};

void save_packed_file(const PackedModelFile& file, const std::string& path);
PackedModelFile load_packed_file(const std::string& path);

std::string config_to_json(const MoEConfig& config);
MoEConfig config_from_json(const std::string& json_text);

}  // namespace mcsh

#endif  // MCSH_SERIALIZE_HPP
