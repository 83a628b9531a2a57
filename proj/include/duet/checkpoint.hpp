#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "duet/errors.hpp"
#include "duet/tensor.hpp"

namespace duet {

// Binary tensor container. Layout:
//   "RPCK" | version u32 | dtype u32 (0=f32, 1=f64) | tensor count u32
//   per tensor: name length u32 | name bytes | rank u32 | dims u64...
//               | raw little-endian element bytes
// Tensors are written sorted by name so serialization is canonical.

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DtypeTag : std::uint32_t { f32 = 0, f64 = 1 };

template <typename T>
constexpr DtypeTag dtype_tag() {
  if constexpr (std::is_same_v<T, float>) {
    return DtypeTag::f32;
  } else {
    return DtypeTag::f64;
  }
}

inline const char* dtype_name(DtypeTag tag) {
  return tag == DtypeTag::f32 ? "f32" : "f64";
}

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>(v >> (8 * i)));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>(v >> (8 * i)));
}

inline std::uint32_t get_u32(std::string_view in, std::size_t& pos) {
  if (pos + 4 > in.size()) throw IoError("checkpoint truncated (u32)");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    v |= std::uint32_t(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  }
  pos += 4;
  return v;
}

inline std::uint64_t get_u64(std::string_view in, std::size_t& pos) {
  if (pos + 8 > in.size()) throw IoError("checkpoint truncated (u64)");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    v |= std::uint64_t(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  }
  pos += 8;
  return v;
}

template <typename T>
void put_scalar(std::string& out, T x) {
  if constexpr (std::is_same_v<T, float>) {
    put_u32(out, std::bit_cast<std::uint32_t>(x));
  } else {
    put_u64(out, std::bit_cast<std::uint64_t>(x));
  }
}

template <typename T>
T get_scalar(std::string_view in, std::size_t& pos) {
  if constexpr (std::is_same_v<T, float>) {
    return std::bit_cast<float>(get_u32(in, pos));
  } else {
    return std::bit_cast<double>(get_u64(in, pos));
  }
}

}  // namespace detail

template <typename T>
std::string serialize_checkpoint(
    const std::vector<std::pair<std::string, Tensor<T>>>& tensors) {
  std::map<std::string, const Tensor<T>*> sorted;
  for (const auto& [name, t] : tensors) {
    if (!sorted.emplace(name, &t).second) {
      throw IoError("duplicate tensor name \"" + name + "\"");
    }
  }
  std::string out;
  out.append("RPCK");
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(dtype_tag<T>()));
  detail::put_u32(out, static_cast<std::uint32_t>(sorted.size()));
  for (const auto& [name, t] : sorted) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.append(name);
    detail::put_u32(out, static_cast<std::uint32_t>(t->rank()));
    for (std::size_t d : t->shape()) detail::put_u64(out, d);
    for (T x : t->data()) detail::put_scalar(out, x);
  }
  return out;
}

inline DtypeTag peek_checkpoint_dtype(std::string_view bytes) {
  std::size_t pos = 0;
  if (bytes.size() < 4 || bytes.substr(0, 4) != "RPCK") {
    throw IoError("bad checkpoint magic");
  }
  pos = 4;
  const std::uint32_t version = detail::get_u32(bytes, pos);
  if (version != kCheckpointVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint32_t tag = detail::get_u32(bytes, pos);
  if (tag > 1) throw IoError("bad dtype tag " + std::to_string(tag));
  return static_cast<DtypeTag>(tag);
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> deserialize_checkpoint(
    std::string_view bytes) {
  if (peek_checkpoint_dtype(bytes) != dtype_tag<T>()) {
    throw IoError("checkpoint dtype does not match requested scalar type");
  }
  std::size_t pos = 12;
  const std::uint32_t count = detail::get_u32(bytes, pos);
  std::vector<std::pair<std::string, Tensor<T>>> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = detail::get_u32(bytes, pos);
    if (pos + name_len > bytes.size()) throw IoError("checkpoint truncated (name)");
    std::string name(bytes.substr(pos, name_len));
    pos += name_len;
    const std::uint32_t rank = detail::get_u32(bytes, pos);
    std::vector<std::size_t> shape(rank);
    std::size_t numel = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      shape[r] = static_cast<std::size_t>(detail::get_u64(bytes, pos));
      numel *= shape[r];
    }
    std::vector<T> data(numel);
    for (std::size_t j = 0; j < numel; ++j) {
      data[j] = detail::get_scalar<T>(bytes, pos);
    }
    out.emplace_back(std::move(name),
                     Tensor<T>::from(std::move(shape), std::move(data)));
  }
  if (pos != bytes.size()) throw IoError("trailing bytes in checkpoint");
  return out;
}

inline void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open \"" + path + "\" for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("short write to \"" + path + "\"");
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open \"" + path + "\" for reading");
  std::string out((std::istreambuf_iterator<char>(f)),
                  std::istreambuf_iterator<char>());
  return out;
}

}  // namespace duet
