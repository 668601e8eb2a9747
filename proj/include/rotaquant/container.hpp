/*
 * Copyright 2026 The rotaquant Authors. All Rights Reserved.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

// RTA1 tensor container.
//
//   bytes 0..3    magic "RTA1"
//   bytes 4..11   header length N, unsigned 64-bit little endian
//   bytes 12..    N bytes of UTF-8 JSON: {"<tensor>": {"dtype", "shape", "offset", "byte_len"}, ..., "meta": {...}}
//   payload       little-endian tensor data; offsets are relative to the payload start and 8-byte aligned
//
// The header is padded with spaces so the payload itself starts on an 8-byte boundary.

#include <algorithm>
#include <array>
#include <bit>
#include <optional>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "rotaquant/error.hpp"
#include "rotaquant/linalg.hpp"

namespace rotaquant {

using json = nlohmann::json;

enum class DType { kF32, kI8, kI16, kI32 };

inline std::string to_string(DType t) {
  switch (t) {
    case DType::kF32: return "f32";
    case DType::kI8: return "i8";
    case DType::kI16: return "i16";
    case DType::kI32: return "i32";
  }
  return "?";
}

inline std::size_t dtype_size(DType t) {
  switch (t) {
    case DType::kF32: return 4;
    case DType::kI8: return 1;
    case DType::kI16: return 2;
    case DType::kI32: return 4;
  }
  return 0;
}

inline std::optional<DType> parse_dtype(const std::string& s) {
  if (s == "f32") return DType::kF32;
  if (s == "i8") return DType::kI8;
  if (s == "i16") return DType::kI16;
  if (s == "i32") return DType::kI32;
  return std::nullopt;
}

struct TensorRecord {
  DType dtype = DType::kF32;
  std::vector<std::uint64_t> shape;
  std::vector<std::byte> bytes;  // little endian

  std::uint64_t element_count() const {
    std::uint64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }
};

namespace detail {

template <typename T>
void append_le(std::vector<std::byte>& out, T value) {
  std::array<std::byte, sizeof(T)> raw;
  std::memcpy(raw.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(raw.begin(), raw.end());
  out.insert(out.end(), raw.begin(), raw.end());
}

template <typename T>
T read_le(const std::byte* p) {
  std::array<std::byte, sizeof(T)> raw;
  std::memcpy(raw.data(), p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(raw.begin(), raw.end());
  T value;
  std::memcpy(&value, raw.data(), sizeof(T));
  return value;
}

}  // namespace detail

/// Named tensors plus a free-form JSON `meta` object.
class Container {
 public:
  json meta = json::object();

  const std::map<std::string, TensorRecord>& tensors() const { return tensors_; }
  bool contains(const std::string& name) const { return tensors_.count(name) > 0; }

  void put(const std::string& name, TensorRecord record) {
    if (name == "meta") throw ConfigError("tensor name 'meta' is reserved");
    if (record.bytes.size() != record.element_count() * dtype_size(record.dtype))
      throw ShapeError("tensor " + name + ": byte length does not match shape");
    tensors_[name] = std::move(record);
  }

  /// Stores a matrix as 32-bit floats.
  void put_matrix(const std::string& name, const Matrix& m) {
    TensorRecord r;
    r.dtype = DType::kF32;
    r.shape = {m.rows(), m.cols()};
    r.bytes.reserve(m.size() * 4);
    for (double v : m.values()) detail::append_le<float>(r.bytes, static_cast<float>(v));
    put(name, std::move(r));
  }

  void put_ints(const std::string& name, DType dtype, std::vector<std::uint64_t> shape,
                std::span<const std::int32_t> values) {
    TensorRecord r;
    r.dtype = dtype;
    r.shape = std::move(shape);
    for (std::int32_t v : values) {
      switch (dtype) {
        case DType::kI8:
          if (v < -128 || v > 127) throw ConfigError("value " + std::to_string(v) + " does not fit i8 in " + name);
          detail::append_le<std::int8_t>(r.bytes, static_cast<std::int8_t>(v));
          break;
        case DType::kI16:
          if (v < -32768 || v > 32767) throw ConfigError("value " + std::to_string(v) + " does not fit i16 in " + name);
          detail::append_le<std::int16_t>(r.bytes, static_cast<std::int16_t>(v));
          break;
        case DType::kI32: detail::append_le<std::int32_t>(r.bytes, v); break;
        case DType::kF32: throw ConfigError("put_ints needs an integer dtype");
      }
    }
    put(name, std::move(r));
  }

  const TensorRecord& get(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw FormatError(FormatErrorKind::kMalformedHeader, "missing tensor '" + name + "'");
    return it->second;
  }

  /// Reads a 2-D f32 tensor, checking the expected shape.
  Matrix get_matrix(const std::string& name, std::size_t rows, std::size_t cols) const {
    const TensorRecord& r = get(name);
    if (r.dtype != DType::kF32) throw FormatError(FormatErrorKind::kMalformedHeader, name + ": expected f32");
    if (r.shape != std::vector<std::uint64_t>{rows, cols})
      throw FormatError(FormatErrorKind::kShapeMismatch, name + ": shape does not match the model config");
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = detail::read_le<float>(r.bytes.data() + 4 * i);
    if (!all_finite(m)) throw FormatError(FormatErrorKind::kMalformedHeader, name + ": non-finite values");
    return m;
  }

  std::vector<std::int32_t> get_ints(const std::string& name) const {
    const TensorRecord& r = get(name);
    const std::size_t n = r.element_count();
    std::vector<std::int32_t> out(n);
    for (std::size_t i = 0; i < n; ++i) {
      switch (r.dtype) {
        case DType::kI8: out[i] = detail::read_le<std::int8_t>(r.bytes.data() + i); break;
        case DType::kI16: out[i] = detail::read_le<std::int16_t>(r.bytes.data() + 2 * i); break;
        case DType::kI32: out[i] = detail::read_le<std::int32_t>(r.bytes.data() + 4 * i); break;
        case DType::kF32: throw FormatError(FormatErrorKind::kMalformedHeader, name + ": expected integer dtype");
      }
    }
    return out;
  }

  friend bool operator==(const Container& a, const Container& b) {
    if (a.meta != b.meta || a.tensors_.size() != b.tensors_.size()) return false;
    for (const auto& [k, v] : a.tensors_) {
      auto it = b.tensors_.find(k);
      if (it == b.tensors_.end() || it->second.dtype != v.dtype || it->second.shape != v.shape ||
          it->second.bytes != v.bytes)
        return false;
    }
    return true;
  }

 private:
  std::map<std::string, TensorRecord> tensors_;
};

inline constexpr char kRtaMagic[4] = {'R', 'T', 'A', '1'};

inline std::vector<std::byte> encode_container(const Container& c) {
  json header = json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, rec] : c.tensors()) {
    header[name] = {{"dtype", to_string(rec.dtype)}, {"shape", rec.shape}, {"offset", offset}, {"byte_len", rec.bytes.size()}};
    offset += rec.bytes.size();
    offset = (offset + 7) / 8 * 8;
  }
  header["meta"] = c.meta;
  std::string text = header.dump();
  while ((12 + text.size()) % 8 != 0) text.push_back(' ');

  std::vector<std::byte> out;
  out.reserve(12 + text.size() + offset);
  for (char ch : kRtaMagic) out.push_back(static_cast<std::byte>(ch));
  detail::append_le<std::uint64_t>(out, text.size());
  for (char ch : text) out.push_back(static_cast<std::byte>(ch));
  const std::size_t payload_start = out.size();
  for (const auto& [name, rec] : c.tensors()) {
    out.insert(out.end(), rec.bytes.begin(), rec.bytes.end());
    while ((out.size() - payload_start) % 8 != 0) out.push_back(std::byte{0});
  }
  return out;
}

inline Container decode_container(std::span<const std::byte> bytes) {
  if (bytes.size() < 12) throw FormatError(FormatErrorKind::kTruncated, "file shorter than the 12-byte preamble");
  if (std::memcmp(bytes.data(), kRtaMagic, 4) != 0) throw FormatError(FormatErrorKind::kBadMagic, "expected 'RTA1'");
  const auto header_len = detail::read_le<std::uint64_t>(bytes.data() + 4);
  if (header_len > bytes.size() - 12)
    throw FormatError(FormatErrorKind::kTruncated, "header length " + std::to_string(header_len) + " exceeds file size");
  const std::string text(reinterpret_cast<const char*>(bytes.data() + 12), header_len);
  json header;
  try {
    header = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(FormatErrorKind::kMalformedHeader, std::string("header is not valid JSON: ") + e.what());
  }
  if (!header.is_object()) throw FormatError(FormatErrorKind::kMalformedHeader, "header is not a JSON object");
  const std::span<const std::byte> payload = bytes.subspan(12 + header_len);

  Container c;
  for (const auto& [name, entry] : header.items()) {
    if (name == "meta") {
      if (!entry.is_object()) throw FormatError(FormatErrorKind::kMalformedHeader, "meta is not an object");
      c.meta = entry;
      continue;
    }
    TensorRecord rec;
    std::uint64_t offset = 0, byte_len = 0;
    try {
      const auto dt = parse_dtype(entry.at("dtype").get<std::string>());
      if (!dt) throw FormatError(FormatErrorKind::kMalformedHeader, name + ": unknown dtype");
      rec.dtype = *dt;
      rec.shape = entry.at("shape").get<std::vector<std::uint64_t>>();
      offset = entry.at("offset").get<std::uint64_t>();
      byte_len = entry.at("byte_len").get<std::uint64_t>();
    } catch (const json::exception& e) {
      throw FormatError(FormatErrorKind::kMalformedHeader, name + ": " + e.what());
    }
    if (rec.element_count() * dtype_size(rec.dtype) != byte_len)
      throw FormatError(FormatErrorKind::kShapeMismatch,
                        name + ": shape implies " + std::to_string(rec.element_count() * dtype_size(rec.dtype)) +
                            " bytes but byte_len is " + std::to_string(byte_len));
    if (offset % 8 != 0) throw FormatError(FormatErrorKind::kShapeMismatch, name + ": offset not 8-byte aligned");
    if (offset > payload.size() || byte_len > payload.size() - offset)
      throw FormatError(FormatErrorKind::kTruncated, name + ": payload ends before tensor data");
    rec.bytes.assign(payload.begin() + static_cast<std::ptrdiff_t>(offset),
                     payload.begin() + static_cast<std::ptrdiff_t>(offset + byte_len));
    c.put(name, std::move(rec));
  }
  return c;
}

inline void write_container(const std::filesystem::path& path, const Container& c) {
  const auto bytes = encode_container(c);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

inline std::vector<std::byte> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::vector<std::byte> bytes(raw.size());
  std::memcpy(bytes.data(), raw.data(), raw.size());
  return bytes;
}

inline Container read_container(const std::filesystem::path& path) { return decode_container(read_file_bytes(path)); }

}  // namespace rotaquant
