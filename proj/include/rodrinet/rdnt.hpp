#pragma once

// RDNT container: magic "RDNT", u16 version, u16 flags, u32 metadata length,
// UTF-8 JSON metadata, raw little-endian arrays in declared order, then the
// FNV-1a 64 checksum of every preceding byte.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "rodrinet/errors.hpp"
#include "rodrinet/rng.hpp"
#include "rodrinet/tensor.hpp"

namespace rodrinet::rdnt {

static_assert(std::endian::native == std::endian::little, "RDNT arrays are written in host byte order");

inline constexpr char kMagic[4] = {'R', 'D', 'N', 'T'};
inline constexpr std::uint16_t kVersion = 1;
inline constexpr std::size_t kHeaderBytes = 12;

enum class DType { float32, float64 };

inline std::string to_string(DType d) { return d == DType::float32 ? "float32" : "float64"; }
inline std::size_t dtype_size(DType d) { return d == DType::float32 ? 4 : 8; }

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::float32 : DType::float64;
}

struct NamedArray {
  std::string name;
  DType dtype = DType::float32;
  Shape shape;
  std::vector<unsigned char> bytes;

  template <typename T>
  static NamedArray from(std::string name, const Tensor<T>& t) {
    NamedArray a{std::move(name), dtype_of<T>(), t.shape, std::vector<unsigned char>(t.size() * sizeof(T))};
    if (!a.bytes.empty()) std::memcpy(a.bytes.data(), t.ptr(), a.bytes.size());
    return a;
  }

  template <typename T>
  Tensor<T> as() const {
    if (dtype != dtype_of<T>())
      throw SchemaError("array '" + name + "' holds " + to_string(dtype) + ", requested " +
                        to_string(dtype_of<T>()));
    Tensor<T> t(shape);
    if (!bytes.empty()) std::memcpy(t.ptr(), bytes.data(), bytes.size());
    return t;
  }

  bool operator==(const NamedArray&) const = default;
};

struct Document {
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<NamedArray> arrays;

  const NamedArray& array(const std::string& name) const {
    for (const auto& a : arrays)
      if (a.name == name) return a;
    throw SchemaError("container has no array '" + name + "'");
  }
};

namespace detail {

template <typename U>
void put(std::string& out, U v) {
  char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  out.append(buf, sizeof(U));
}

template <typename U>
U get(const std::string& in, std::size_t at) {
  U v;
  std::memcpy(&v, in.data() + at, sizeof(U));
  return v;
}

}  // namespace detail

/// Serializes `doc`. The "arrays" metadata key is reserved for the array table.
inline std::string encode(const Document& doc) {
  nlohmann::json meta = doc.metadata;
  if (meta.contains("arrays")) throw SchemaError("metadata key 'arrays' is reserved");
  nlohmann::json table = nlohmann::json::array();
  for (const auto& a : doc.arrays) {
    if (a.bytes.size() != numel(a.shape) * dtype_size(a.dtype))
      throw ShapeError("array '" + a.name + "' byte length does not match shape " + shape_str(a.shape));
    table.push_back({{"name", a.name}, {"dtype", to_string(a.dtype)}, {"shape", a.shape}});
  }
  meta["arrays"] = std::move(table);
  const std::string text = meta.dump();

  std::string out(kMagic, 4);
  detail::put<std::uint16_t>(out, kVersion);
  detail::put<std::uint16_t>(out, 0);
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  for (const auto& a : doc.arrays) out.append(reinterpret_cast<const char*>(a.bytes.data()), a.bytes.size());
  detail::put<std::uint64_t>(out, fnv1a64(reinterpret_cast<const unsigned char*>(out.data()), out.size()));
  return out;
}

inline Document decode(const std::string& in) {
  if (in.size() < 4 || std::memcmp(in.data(), kMagic, 4) != 0) throw FormatError("bad magic", 0);
  if (in.size() < kHeaderBytes + 8) throw FormatError("truncated header", in.size());
  const auto version = detail::get<std::uint16_t>(in, 4);
  if (version != kVersion) throw FormatError("unsupported version " + std::to_string(version), 4);
  const std::size_t body = in.size() - 8;
  const auto stored = detail::get<std::uint64_t>(in, body);
  if (stored != fnv1a64(reinterpret_cast<const unsigned char*>(in.data()), body))
    throw FormatError("checksum mismatch (truncated or corrupted)", body);

  const std::size_t meta_len = detail::get<std::uint32_t>(in, 8);
  if (kHeaderBytes + meta_len > body) throw FormatError("metadata runs past end of data", 8);
  Document doc;
  try {
    doc.metadata = nlohmann::json::parse(in.substr(kHeaderBytes, meta_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("metadata is not valid JSON: ") + e.what(), kHeaderBytes);
  }
  if (!doc.metadata.is_object() || !doc.metadata.contains("arrays") || !doc.metadata["arrays"].is_array())
    throw FormatError("metadata lacks an array table", kHeaderBytes);

  std::size_t at = kHeaderBytes + meta_len;
  for (const auto& e : doc.metadata["arrays"]) {
    NamedArray a;
    try {
      a.name = e.at("name").get<std::string>();
      const std::string dt = e.at("dtype").get<std::string>();
      if (dt == "float32") a.dtype = DType::float32;
      else if (dt == "float64") a.dtype = DType::float64;
      else throw FormatError("unknown dtype '" + dt + "'", kHeaderBytes);
      a.shape = e.at("shape").get<Shape>();
    } catch (const nlohmann::json::exception& ex) {
      throw FormatError(std::string("malformed array entry: ") + ex.what(), kHeaderBytes);
    }
    const std::size_t n = numel(a.shape) * dtype_size(a.dtype);
    if (at + n > body) throw FormatError("array '" + a.name + "' runs past end of data", at);
    a.bytes.assign(in.begin() + std::ptrdiff_t(at), in.begin() + std::ptrdiff_t(at + n));
    at += n;
    doc.arrays.push_back(std::move(a));
  }
  if (at != body) throw FormatError("trailing bytes after last array", at);
  doc.metadata.erase("arrays");
  return doc;
}

inline std::string read_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void write_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write '" + path + "'");
  f.write(bytes.data(), std::streamsize(bytes.size()));
  if (!f) throw IoError("short write to '" + path + "'");
}

inline Document read_file(const std::string& path) { return decode(read_bytes(path)); }
inline void write_file(const std::string& path, const Document& doc) { write_bytes(path, encode(doc)); }

/// Checksum of a file's full contents, as 16 hex digits.
inline std::string file_checksum(const std::string& path) {
  const std::string b = read_bytes(path);
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a64(reinterpret_cast<const unsigned char*>(b.data()), b.size())));
  return buf;
}

}  // namespace rodrinet::rdnt
