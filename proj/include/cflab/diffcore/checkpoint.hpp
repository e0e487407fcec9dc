#ifndef CFLAB_DIFFCORE_CHECKPOINT_HPP
#define CFLAB_DIFFCORE_CHECKPOINT_HPP

// Binary weight container:
//   "CFLAB1" | u32 entry count | entries...
//   entry = u32 name length | UTF-8 name | u32 rank | u32 dims[rank] | f32 data[]
// All integers and floats little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

#include "cflab/diffcore/parameters.hpp"

namespace cflab::diffcore {

inline constexpr char kCheckpointMagic[] = "CFLAB1";

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline std::uint32_t get_u32(const std::string& in, std::size_t& pos) {
  if (pos + 4 > in.size()) throw MissingArtifact("checkpoint truncated");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += 4;
  return v;
}

}  // namespace detail

template <typename T>
std::string encode_checkpoint(const NamedTensors<T>& entries) {
  std::string out(kCheckpointMagic, 6);
  detail::put_u32(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, tensor] : entries) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_u32(out, static_cast<std::uint32_t>(tensor.rank()));
    for (auto d : tensor.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (T v : tensor.data()) detail::put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  return out;
}

inline NamedTensors<float> decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 6 || bytes.compare(0, 6, kCheckpointMagic) != 0)
    throw MissingArtifact("not a checkpoint (bad magic)");
  std::size_t pos = 6;
  const std::uint32_t count = detail::get_u32(bytes, pos);
  NamedTensors<float> out;
  for (std::uint32_t e = 0; e < count; ++e) {
    const std::uint32_t len = detail::get_u32(bytes, pos);
    if (pos + len > bytes.size()) throw MissingArtifact("checkpoint truncated");
    std::string name = bytes.substr(pos, len);
    pos += len;
    const std::uint32_t rank = detail::get_u32(bytes, pos);
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(detail::get_u32(bytes, pos));
    Tensor<float> t(shape);
    for (auto& v : t.data()) v = std::bit_cast<float>(detail::get_u32(bytes, pos));
    out.emplace_back(std::move(name), std::move(t));
  }
  if (pos != bytes.size()) throw MissingArtifact("trailing bytes after checkpoint entries");
  return out;
}

template <typename T>
void save_checkpoint(const std::string& path, const NamedTensors<T>& entries) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw MissingArtifact("cannot write checkpoint: " + path);
  const std::string bytes = encode_checkpoint(entries);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw MissingArtifact("write failed: " + path);
}

inline NamedTensors<float> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw MissingArtifact("cannot open checkpoint: " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

/// Scalar stored under `name` as a shape {1} entry, if present.
inline std::optional<double> checkpoint_scalar(const NamedTensors<float>& entries,
                                               const std::string& name) {
  for (const auto& [n, t] : entries)
    if (n == name && t.size() == 1) return t[0];
  return std::nullopt;
}

}  // namespace cflab::diffcore

#endif  // CFLAB_DIFFCORE_CHECKPOINT_HPP
