// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The promptalign Authors

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "promptalign/tensor.hpp"

namespace promptalign {

// Named tensor file:
//   "MPAF" | u32 version | u32 count |
//   count x (u32 name_len | name | u32 rank | rank x u32 dim | f32 data...)
// All integers and floats little-endian, data row-major.

inline constexpr char kTensorFileMagic[4] = {'M', 'P', 'A', 'F'};
inline constexpr std::uint32_t kTensorFileVersion = 1;

/// Ordered name -> tensor list; order is preserved on save and load.
class TensorMap {
 public:
  void set(const std::string& name, Tensor t) {
    for (auto& [n, v] : entries_)
      if (n == name) {
        v = std::move(t);
        return;
      }
    entries_.emplace_back(name, std::move(t));
  }
  bool contains(const std::string& name) const {
    for (const auto& e : entries_)
      if (e.first == name) return true;
    return false;
  }
  const Tensor& at(const std::string& name) const {
    for (const auto& e : entries_)
      if (e.first == name) return e.second;
    throw std::out_of_range("tensor file has no entry '" + name + "'");
  }
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

class ByteReader {
 public:
  ByteReader(const std::string& bytes, std::string origin)
      : bytes_(bytes), origin_(std::move(origin)) {}
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string take(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }
  [[noreturn]] void fail(const std::string& msg) const {
    throw std::runtime_error(origin_ + ": " + msg + " at byte " + std::to_string(pos_));
  }

 private:
  void need(std::size_t n) {
    if (bytes_.size() - pos_ < n) fail("truncated file");
  }
  const std::string& bytes_;
  std::string origin_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_tensors(const TensorMap& map) {
  std::string out(kTensorFileMagic, 4);
  detail::put_u32(out, kTensorFileVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(map.size()));
  for (const auto& [name, t] : map.entries()) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : t.values()) detail::put_f32(out, v);
  }
  return out;
}

inline TensorMap deserialize_tensors(const std::string& bytes, const std::string& origin) {
  detail::ByteReader in(bytes, origin);
  if (in.take(4) != std::string(kTensorFileMagic, 4)) in.fail("bad magic");
  const auto version = in.u32();
  if (version != kTensorFileVersion)
    in.fail("unsupported format version " + std::to_string(version));
  const auto count = in.u32();
  TensorMap map;
  for (std::uint32_t e = 0; e < count; ++e) {
    const auto name = in.take(in.u32());
    const auto rank = in.u32();
    if (rank > 16) in.fail("implausible rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& d : shape) {
      d = in.u32();
      if (d == 0) in.fail("zero dimension in entry '" + name + "'");
    }
    Buffer<float> values(numel(shape));
    for (auto& v : values) v = in.f32();
    if (map.contains(name)) in.fail("duplicate entry '" + name + "'");
    map.set(name, Tensor(std::move(shape), std::move(values)));
  }
  if (!in.done()) in.fail("trailing bytes");
  return map;
}

inline void write_file_atomically(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void save_tensors(const std::filesystem::path& path, const TensorMap& map) {
  write_file_atomically(path, serialize_tensors(map));
}

inline TensorMap load_tensors(const std::filesystem::path& path) {
  return deserialize_tensors(read_file(path), path.string());
}

// Helpers for storing non-tensor values exactly in float32 entries.

/// 64-bit value as four 16-bit limbs (each exact in float32).
inline Tensor encode_u64(std::uint64_t v) {
  Buffer<float> limbs(4);
  for (int i = 0; i < 4; ++i) limbs[i] = static_cast<float>((v >> (16 * i)) & 0xFFFF);
  return Tensor({4}, std::move(limbs));
}

inline std::uint64_t decode_u64(const Tensor& t) {
  if (t.size() != 4) throw std::runtime_error("64-bit entry must hold 4 limbs");
  std::uint64_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint64_t>(t[i]) << (16 * i);
  return v;
}

/// Byte string as one float per byte.
inline Tensor encode_text(const std::string& s) {
  Buffer<float> out;
  for (unsigned char c : s) out.push_back(static_cast<float>(c));
  if (out.empty()) out.push_back(0.0f);  // tensors have no empty dimension
  const std::size_t n = out.size();
  return Tensor({n}, std::move(out));
}

inline std::string decode_text(const Tensor& t) {
  std::string s;
  for (float f : t.values())
    if (f != 0.0f) s.push_back(static_cast<char>(static_cast<unsigned char>(f)));
  return s;
}

}  // namespace promptalign
